//! Dense building blocks with hand-written backward passes.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A learnable tensor and its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.value.nrows(), self.value.ncols()]
    }
}

/// Anything that owns parameters. Visiting order is fixed and defines the
/// block order used by the optimizer, checkpoints and gradient checks.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, p| total += p.value.len());
        total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at pre-activation `x` (0 at the ReLU kink).
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// He-uniform weights; bias uniform in `±1/sqrt(input)` so that zero
    /// inputs do not sit exactly on a ReLU kink.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input.max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((input, output), |_| rng.random_range(-bound..bound));
        let bb = 1.0 / fan_in.sqrt();
        let b = Array2::from_shape_fn((1, output), |_| rng.random_range(-bb..bb));
        Self {
            weight: Param::new(w),
            bias: Param::new(b),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Param::new(Array2::zeros((input, output))),
            bias: Param::new(Array2::zeros((1, output))),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
        self.weight.grad += &x.t().dot(dz);
        self.bias.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        dz.dot(&self.weight.value.t())
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Shared per-row MLP: ReLU between layers, configurable final activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_activation: Activation,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(widths: &[usize], final_activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self {
            layers,
            final_activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_width)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Linear::output_width));
        w
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.final_activation
        } else {
            Activation::Relu
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            let act = self.activation(l);
            let out = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &MlpCache, dout: &Array2<f64>) -> Array2<f64> {
        let mut grad = dout.clone();
        for l in (0..self.layers.len()).rev() {
            let act = self.activation(l);
            let mut dz = grad;
            if act != Activation::Identity {
                dz.zip_mut_with(&cache.pre[l], |g, &z| *g *= act.derivative(z));
            }
            grad = self.layers[l].backward(&cache.inputs[l], &dz);
        }
        grad
    }

    /// Append the on/off state of every ReLU unit in a cached pass.
    pub fn relu_pattern(&self, cache: &MlpCache, out: &mut Vec<u32>) {
        for (l, z) in cache.pre.iter().enumerate() {
            if self.activation(l) == Activation::Relu {
                out.extend(z.iter().map(|&v| u32::from(v > 0.0)));
            }
        }
    }

    /// Smallest |pre-activation| over ReLU units in a cached pass; a proxy
    /// for how close the pass sits to a kink.
    pub fn kink_margin(&self, cache: &MlpCache) -> f64 {
        let mut m = f64::INFINITY;
        for (l, z) in cache.pre.iter().enumerate() {
            if self.activation(l) == Activation::Relu {
                m = z.iter().fold(m, |acc, v| acc.min(v.abs()));
            }
        }
        m
    }
}

impl Parameterized for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
