//! Geometric convolution: each output channel is a kernel of `m` learnable
//! 3-D vectors plus a bias. A point's response is the best achievable sum
//! of dot products between its `m` nearest neighbor directions and the
//! kernel vectors, maximized over every one-to-one assignment.
//!
//! Directions are unit-normalized, kernel vectors are not. All `m!`
//! assignments are enumerated in lexicographic order and the first maximum
//! wins, which keeps the backward pass deterministic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::knn::{knn_index, relative_positions, RelativePositions};
use crate::nn::{join, Activation, Param, Parameterized};

/// Scale applied to unit vectors at initialization.
pub const INIT_NORM: f64 = 0.5;

/// A single kernel, detached from any bank.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricKernel {
    /// `m x 3`.
    pub vectors: Array2<f64>,
    pub bias: f64,
}

impl GeometricKernel {
    pub fn new(vectors: Array2<f64>, bias: f64) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() != 3 {
            return Err(Error::Shape("kernel vectors must be a non-empty m x 3 array".into()));
        }
        if !vectors.iter().all(|v| v.is_finite()) || !bias.is_finite() {
            return Err(Error::Range("kernel values must be finite".into()));
        }
        Ok(Self { vectors, bias })
    }

    pub fn m(&self) -> usize {
        self.vectors.nrows()
    }
}

/// `channels` kernels of `m` vectors each, stored as learnable parameters.
/// Kernel `c` occupies rows `c*m .. (c+1)*m` of `vectors`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    m: usize,
    pub vectors: Param,
    pub bias: Param,
}

impl KernelBank {
    pub fn from_kernels(kernels: &[GeometricKernel]) -> Result<Self> {
        let m = kernels
            .first()
            .map(GeometricKernel::m)
            .ok_or_else(|| Error::Argument("a kernel bank needs at least one kernel".into()))?;
        if kernels.iter().any(|k| k.m() != m) {
            return Err(Error::Shape("all kernels in a bank must have the same m".into()));
        }
        let mut vectors = Array2::zeros((kernels.len() * m, 3));
        let mut bias = Array2::zeros((1, kernels.len()));
        for (c, k) in kernels.iter().enumerate() {
            vectors
                .slice_mut(ndarray::s![c * m..(c + 1) * m, ..])
                .assign(&k.vectors);
            bias[[0, c]] = k.bias;
        }
        Ok(Self {
            m,
            vectors: Param::new(vectors),
            bias: Param::new(bias),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn channels(&self) -> usize {
        self.bias.value.ncols()
    }

    pub fn kernel(&self, c: usize) -> Result<GeometricKernel> {
        if c >= self.channels() {
            return Err(Error::Range(format!(
                "kernel {c} out of range for {} channels",
                self.channels()
            )));
        }
        GeometricKernel::new(
            self.vectors
                .value
                .slice(ndarray::s![c * self.m..(c + 1) * self.m, ..])
                .to_owned(),
            self.bias.value[[0, c]],
        )
    }

    /// Zero every vector and bias; the bank then outputs `σ(0)`.
    pub fn zero(&mut self) {
        self.vectors.value.fill(0.0);
        self.bias.value.fill(0.0);
    }
}

impl Parameterized for KernelBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "vectors"), &self.vectors);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "vectors"), &mut self.vectors);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Unit-sphere directions scaled to [`INIT_NORM`], zero bias.
pub fn kernel_init(m: usize, channels: usize, seed: u64) -> Result<KernelBank> {
    if m == 0 || channels == 0 {
        return Err(Error::Argument(
            "kernel size and channel count must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = Array2::zeros((channels * m, 3));
    for mut row in vectors.rows_mut() {
        let v: [f64; 3] = UnitSphere.sample(&mut rng);
        for c in 0..3 {
            row[c] = v[c] * INIT_NORM;
        }
    }
    Ok(KernelBank {
        m,
        vectors: Param::new(vectors),
        bias: Param::new(Array2::zeros((1, channels))),
    })
}

/// All permutations of `0..m` in lexicographic order.
pub fn permutations(m: usize) -> Vec<Vec<usize>> {
    fn rec(current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == used.len() {
            out.push(current.clone());
            return;
        }
        for t in 0..used.len() {
            if !used[t] {
                used[t] = true;
                current.push(t);
                rec(current, used, out);
                current.pop();
                used[t] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(m), &mut vec![false; m], &mut out);
    out
}

/// Per (point, channel): the winning assignment, its pre-activation and the
/// gap to the runner-up assignment.
#[derive(Clone, Debug)]
pub struct MappingChoice {
    m: usize,
    rows: usize,
    channels: usize,
    activation: Activation,
    perm_index: Vec<u32>,
    pre: Vec<f64>,
    margin: Vec<f64>,
}

impl MappingChoice {
    pub fn perm_index(&self, row: usize, channel: usize) -> usize {
        self.perm_index[row * self.channels + channel] as usize
    }

    pub fn pre_activation(&self, row: usize, channel: usize) -> f64 {
        self.pre[row * self.channels + channel]
    }

    /// Gap between best and second-best assignment (`inf` when `m = 1`).
    pub fn margin(&self, row: usize, channel: usize) -> f64 {
        self.margin[row * self.channels + channel]
    }

    /// Distance to the nearest non-differentiable configuration: either a
    /// tie between assignments or the activation kink at zero.
    pub fn tie_distance(&self) -> f64 {
        let mut d = self.margin.iter().copied().fold(f64::INFINITY, f64::min);
        if self.activation == Activation::Relu {
            d = self.pre.iter().fold(d, |acc, p| acc.min(p.abs()));
        }
        d
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Append the winning permutation of every (row, channel) and, under
    /// ReLU, whether the response is active.
    pub fn pattern(&self, out: &mut Vec<u32>) {
        out.extend(&self.perm_index);
        if self.activation == Activation::Relu {
            out.extend(self.pre.iter().map(|&v| u32::from(v > 0.0)));
        }
    }
}

/// Responses (`rows x channels`) for the first `m` directions of each row.
pub fn gco_forward(
    rel: &RelativePositions,
    bank: &KernelBank,
    activation: Activation,
) -> Result<(Array2<f64>, MappingChoice)> {
    let m = bank.m();
    if rel.k() < m {
        return Err(Error::Argument(format!(
            "geometric convolution needs {m} neighbors per point, only {} available",
            rel.k()
        )));
    }
    let perms = permutations(m);
    let rows = rel.len();
    let channels = bank.channels();
    let mut out = Array2::zeros((rows, channels));
    let mut perm_index = Vec::with_capacity(rows * channels);
    let mut pre = Vec::with_capacity(rows * channels);
    let mut margin = Vec::with_capacity(rows * channels);
    let v = &bank.vectors.value;
    let mut dots = vec![0.0; m * m];
    for r in 0..rows {
        let dirs = &rel.directions(r)[..m];
        for c in 0..channels {
            for (j, d) in dirs.iter().enumerate() {
                for t in 0..m {
                    let vr = c * m + t;
                    dots[j * m + t] = d[0] * v[[vr, 0]] + d[1] * v[[vr, 1]] + d[2] * v[[vr, 2]];
                }
            }
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            let mut best_p = 0;
            for (p, perm) in perms.iter().enumerate() {
                let mut s = 0.0;
                for (j, &t) in perm.iter().enumerate() {
                    s += dots[j * m + t];
                }
                if s > best {
                    second = best;
                    best = s;
                    best_p = p;
                } else if s > second {
                    second = s;
                }
            }
            let z = bank.bias.value[[0, c]] + best;
            out[[r, c]] = activation.apply(z);
            perm_index.push(best_p as u32);
            pre.push(z);
            margin.push(if perms.len() > 1 { best - second } else { f64::INFINITY });
        }
    }
    Ok((
        out,
        MappingChoice {
            m,
            rows,
            channels,
            activation,
            perm_index,
            pre,
            margin,
        },
    ))
}

/// Gradients with respect to a bank's vectors and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBankGrad {
    pub vectors: Array2<f64>,
    pub bias: Array2<f64>,
}

/// Subgradient through the cached winning assignments. No gradient reaches
/// point positions.
pub fn gco_backward(cache: &MappingChoice, rel: &RelativePositions, upstream: &Array2<f64>) -> Result<KernelBankGrad> {
    let m = cache.m;
    if upstream.dim() != (cache.rows, cache.channels) || rel.len() != cache.rows || rel.k() < m {
        return Err(Error::State(format!(
            "mapping cache is {}x{} (m = {m}), got upstream {:?} and {} offset rows",
            cache.rows,
            cache.channels,
            upstream.dim(),
            rel.len()
        )));
    }
    let perms = permutations(m);
    let mut vectors = Array2::zeros((cache.channels * m, 3));
    let mut bias = Array2::zeros((1, cache.channels));
    for r in 0..cache.rows {
        let dirs = &rel.directions(r)[..m];
        for c in 0..cache.channels {
            let g = upstream[[r, c]] * cache.activation.derivative(cache.pre_activation(r, c));
            if g == 0.0 {
                continue;
            }
            bias[[0, c]] += g;
            let perm = &perms[cache.perm_index(r, c)];
            for (j, &t) in perm.iter().enumerate() {
                let vr = c * m + t;
                for x in 0..3 {
                    vectors[[vr, x]] += g * dirs[j][x];
                }
            }
        }
    }
    Ok(KernelBankGrad { vectors, bias })
}

impl KernelBank {
    pub fn accumulate(&mut self, grad: &KernelBankGrad) {
        self.vectors.grad += &grad.vectors;
        self.bias.grad += &grad.bias;
    }
}

/// Single-kernel response at every point of `cloud` (ReLU activation), using
/// each point's `m` nearest neighbors.
pub fn kernel_response_field(cloud: &PointCloud, kernel: &GeometricKernel) -> Result<Vec<f64>> {
    let m = kernel.m();
    if cloud.len() < m + 1 {
        return Err(Error::Argument(format!(
            "a kernel of {m} vectors needs at least {} points",
            m + 1
        )));
    }
    let idx = knn_index(cloud, m)?;
    let rel = relative_positions(cloud, &idx)?;
    let bank = KernelBank::from_kernels(std::slice::from_ref(kernel))?;
    let (out, _) = gco_forward(&rel, &bank, Activation::Relu)?;
    Ok(out.column(0).to_vec())
}

/// Render a scalar field: header `n`, one value per line.
pub fn to_fld_string(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 20);
    let _ = writeln!(out, "{}", values.len());
    for v in values {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn parse_fld(text: &str, origin: &Path) -> Result<Vec<f64>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .unwrap_or("")
        .trim()
        .parse()
        .map_err(|_| err(1, "header must be the value count".into()))?;
    let values = lines
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| l.parse::<f64>().map_err(|_| err(i + 2, format!("bad real {l:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != n {
        return Err(err(
            values.len() + 2,
            format!("expected {n} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

pub fn save_field(values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_fld_string(values)).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fld(&text, path)
}
