//! Neighborhood feature aggregation.
//!
//! For query point `i` with neighbors `j`:
//!
//! ```text
//! w_ij = phi(r_ij)                   (weight net, C_mid outputs)
//! h_j  = M(c_j * f_j)                (feature net, C_f outputs)
//! A_i  = sum_j w_ij (outer) h_j      (C_mid x C_f, a k x C_mid by k x C_f product)
//! out_i = sigma(vec(A_i) P + b)
//! ```
//!
//! The per-source coefficient `c_j` selects the rule: the soft boundary
//! score for masked aggregation, `2 - score` for the boundary-augmented
//! variant, and no scaling at all for global aggregation. Coefficients are
//! constants: no gradient flows into them.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryField;
use crate::error::{Error, Result};
use crate::knn::{NeighborhoodIndex, RelativePositions};
use crate::nn::{join, Activation, Linear, Mlp, MlpCache, Param, Parameterized};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Neighbor features scaled by their boundary score.
    Masked,
    /// No boundary information.
    #[default]
    Global,
    /// Neighbor features scaled by `2 - score`.
    Augmented,
}

impl AggregationMode {
    pub fn uses_boundary(self) -> bool {
        !matches!(self, AggregationMode::Global)
    }

    /// Per-source coefficients for this mode, `None` for global aggregation.
    pub fn coefficients(self, scores: &[f64]) -> Option<Vec<f64>> {
        match self {
            AggregationMode::Masked => Some(scores.to_vec()),
            AggregationMode::Augmented => Some(scores.iter().map(|g| 2.0 - g).collect()),
            AggregationMode::Global => None,
        }
    }
}

/// Weight net `phi`: relative position (3) to `C_mid` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNet(pub Mlp);

/// Feature net `M`: shared per-point MLP over (scaled) input features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet(pub Mlp);

impl WeightNet {
    pub fn new(hidden: usize, mid: usize, rng: &mut impl Rng) -> Self {
        Self(Mlp::new(&[3, hidden, mid], Activation::Identity, rng))
    }

    pub fn output_width(&self) -> usize {
        self.0.output_width()
    }
}

impl FeatureNet {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self(Mlp::new(&[input, output], Activation::Relu, rng))
    }

    pub fn input_width(&self) -> usize {
        self.0.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.0.output_width()
    }
}

/// One aggregation block: weight net, feature net and output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    pub weightnet: WeightNet,
    pub featurenet: FeatureNet,
    pub proj: Linear,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct AggregationCache {
    coeff: Option<Vec<f64>>,
    feat: MlpCache,
    transformed: Array2<f64>,
    weight: MlpCache,
    weights: Array2<f64>,
    flat: Array2<f64>,
    pre: Array2<f64>,
    neighbors: Vec<usize>,
    k: usize,
}

impl Aggregator {
    pub fn new(
        input: usize,
        feature: usize,
        mid: usize,
        weight_hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weightnet = WeightNet::new(weight_hidden, mid, rng);
        let featurenet = FeatureNet::new(input, feature, rng);
        let proj = Linear::new(mid * feature, output, rng);
        Self {
            weightnet,
            featurenet,
            proj,
            activation: Activation::Relu,
        }
    }

    pub fn input_width(&self) -> usize {
        self.featurenet.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.proj.output_width()
    }

    /// `features` are the source points (`idx.num_points()` rows); one output
    /// row per index row. `coeff` scales each source row before the feature
    /// net.
    pub fn forward(
        &self,
        features: &Array2<f64>,
        idx: &NeighborhoodIndex,
        rel: &RelativePositions,
        coeff: Option<&[f64]>,
    ) -> Result<(Array2<f64>, AggregationCache)> {
        let n_src = features.nrows();
        if features.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "feature net expects {} channels, got {}",
                self.input_width(),
                features.ncols()
            )));
        }
        if idx.num_points() != n_src {
            return Err(Error::Shape(format!(
                "neighborhood over {} points, features have {n_src} rows",
                idx.num_points()
            )));
        }
        if rel.len() != idx.len() || rel.k() != idx.k() {
            return Err(Error::Shape("relative positions do not match the neighborhood".into()));
        }
        if let Some(c) = coeff {
            if c.len() != n_src {
                return Err(Error::Shape(format!(
                    "{} boundary coefficients for {n_src} points",
                    c.len()
                )));
            }
        }
        let input = match coeff {
            Some(c) => {
                let mut x = features.clone();
                for (mut row, &g) in x.rows_mut().into_iter().zip(c) {
                    row.mapv_inplace(|v| g * v);
                }
                x
            }
            None => features.clone(),
        };
        let (transformed, feat) = self.featurenet.0.forward(&input);
        let (weights, weight) = self.weightnet.0.forward(&rel.offset_matrix());

        let q = idx.len();
        let k = idx.k();
        let mid = self.weightnet.output_width();
        let cf = self.featurenet.output_width();
        let mut flat = Array2::zeros((q, mid * cf));
        for (i, mut acc) in flat.rows_mut().into_iter().enumerate() {
            let acc = acc.as_slice_mut().expect("standard layout");
            for (t, &j) in idx.neighbors(i).iter().enumerate() {
                let w = weights.row(i * k + t);
                let h = transformed.row(j);
                let h = h.as_slice().expect("standard layout");
                for (a, &wa) in w.iter().enumerate() {
                    let dst = &mut acc[a * cf..(a + 1) * cf];
                    for (d, &hb) in dst.iter_mut().zip(h) {
                        *d += wa * hb;
                    }
                }
            }
        }
        let pre = self.proj.forward(&flat);
        let act = self.activation;
        let out = pre.mapv(|v| act.apply(v));
        let neighbors = (0..q).flat_map(|i| idx.neighbors(i).iter().copied()).collect();
        Ok((
            out,
            AggregationCache {
                coeff: coeff.map(<[f64]>::to_vec),
                feat,
                transformed,
                weight,
                weights,
                flat,
                pre,
                neighbors,
                k,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient with respect to
    /// the (unscaled) source features.
    pub fn backward(&mut self, cache: &AggregationCache, dout: &Array2<f64>) -> Result<Array2<f64>> {
        if dout.dim() != cache.pre.dim() {
            return Err(Error::State(format!(
                "aggregation cache is {:?}, upstream gradient {:?}",
                cache.pre.dim(),
                dout.dim()
            )));
        }
        let act = self.activation;
        let mut dz = dout.clone();
        dz.zip_mut_with(&cache.pre, |g, &z| *g *= act.derivative(z));
        let dflat = self.proj.backward(&cache.flat, &dz);

        let k = cache.k;
        let q = dz.nrows();
        let mid = self.weightnet.output_width();
        let cf = self.featurenet.output_width();
        let mut dweights = Array2::zeros(cache.weights.raw_dim());
        let mut dtransformed = Array2::zeros(cache.transformed.raw_dim());
        for i in 0..q {
            let dm = dflat.row(i);
            let dm = dm.as_slice().expect("standard layout");
            for t in 0..k {
                let j = cache.neighbors[i * k + t];
                let w = cache.weights.row(i * k + t);
                let h = cache.transformed.row(j);
                let h = h.as_slice().expect("standard layout");
                let mut dw = dweights.row_mut(i * k + t);
                let mut dh = dtransformed.row_mut(j);
                let dh = dh.as_slice_mut().expect("standard layout");
                for a in 0..mid {
                    let row = &dm[a * cf..(a + 1) * cf];
                    let mut s = 0.0;
                    for (b, &g) in row.iter().enumerate() {
                        s += g * h[b];
                        dh[b] += w[a] * g;
                    }
                    dw[a] = s;
                }
            }
        }
        self.weightnet.0.backward(&cache.weight, &dweights);
        let mut dinput = self.featurenet.0.backward(&cache.feat, &dtransformed);
        if let Some(c) = &cache.coeff {
            for (mut row, &g) in dinput.rows_mut().into_iter().zip(c) {
                row.mapv_inplace(|v| g * v);
            }
        }
        Ok(dinput)
    }

    /// Append the on/off state of every ReLU unit in a cached pass.
    pub fn relu_pattern(&self, cache: &AggregationCache, out: &mut Vec<u32>) {
        self.weightnet.0.relu_pattern(&cache.weight, out);
        self.featurenet.0.relu_pattern(&cache.feat, out);
        if self.activation == Activation::Relu {
            out.extend(cache.pre.iter().map(|&v| u32::from(v > 0.0)));
        }
    }

    /// Smallest distance of any ReLU pre-activation in a cached pass from zero.
    pub fn kink_margin(&self, cache: &AggregationCache) -> f64 {
        let own = cache.pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        own.min(self.featurenet.0.kink_margin(&cache.feat))
            .min(self.weightnet.0.kink_margin(&cache.weight))
    }
}

impl AggregationCache {
    pub fn coefficients(&self) -> Option<&[f64]> {
        self.coeff.as_deref()
    }

    pub fn rows(&self) -> usize {
        self.pre.nrows()
    }
}

impl Parameterized for Aggregator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.weightnet.0.visit(&join(prefix, "weightnet"), f);
        self.featurenet.0.visit(&join(prefix, "featurenet"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.weightnet.0.visit_mut(&join(prefix, "weightnet"), f);
        self.featurenet.0.visit_mut(&join(prefix, "featurenet"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

fn require_scores(mask: &BoundaryField) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::State("boundary field is empty".into()));
    }
    Ok(mask.mask_values())
}

/// Boundary-masked aggregation: source features scaled by their score.
pub fn masked_local_aggregation(
    agg: &Aggregator,
    features: &Array2<f64>,
    idx: &NeighborhoodIndex,
    rel: &RelativePositions,
    mask: &BoundaryField,
) -> Result<Array2<f64>> {
    let scores = require_scores(mask)?;
    let coeff = AggregationMode::Masked.coefficients(&scores);
    Ok(agg.forward(features, idx, rel, coeff.as_deref())?.0)
}

/// Aggregation with no boundary information.
pub fn global_aggregation(
    agg: &Aggregator,
    features: &Array2<f64>,
    idx: &NeighborhoodIndex,
    rel: &RelativePositions,
) -> Result<Array2<f64>> {
    Ok(agg.forward(features, idx, rel, None)?.0)
}

/// Boundary-augmented aggregation: source features scaled by `2 - score`.
pub fn augmented_aggregation(
    agg: &Aggregator,
    features: &Array2<f64>,
    idx: &NeighborhoodIndex,
    rel: &RelativePositions,
    mask: &BoundaryField,
) -> Result<Array2<f64>> {
    let scores = require_scores(mask)?;
    let coeff = AggregationMode::Augmented.coefficients(&scores);
    Ok(agg.forward(features, idx, rel, coeff.as_deref())?.0)
}

/// Row-wise concatenation `[a | b]`.
pub(crate) fn concat_columns(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts match")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::{knn_index_points, relative_positions_points};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Case {
        agg: Aggregator,
        features: Array2<f64>,
        idx: NeighborhoodIndex,
        rel: RelativePositions,
    }

    fn case(seed: u64, n: usize, k: usize, cin: usize) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let features = Array2::from_shape_fn((n, cin), |_| rng.random_range(-1.0..1.0));
        let idx = knn_index_points(positions.view(), k).unwrap();
        let rel = relative_positions_points(positions.view(), &idx).unwrap();
        let agg = Aggregator::new(cin, 6, 4, 5, 7, &mut rng);
        Case {
            agg,
            features,
            idx,
            rel,
        }
    }

    #[test]
    fn unit_mask_equals_global_and_augmented() {
        let c = case(1, 30, 5, 4);
        let ones = BoundaryField::from_hard(vec![1; 30]).unwrap();
        let g = global_aggregation(&c.agg, &c.features, &c.idx, &c.rel).unwrap();
        let m = masked_local_aggregation(&c.agg, &c.features, &c.idx, &c.rel, &ones).unwrap();
        let a = augmented_aggregation(&c.agg, &c.features, &c.idx, &c.rel, &ones).unwrap();
        assert_eq!(g, m);
        assert_eq!(g, a);
    }

    #[test]
    fn full_mask_ignores_features() {
        let c = case(2, 25, 4, 3);
        let zeros = BoundaryField::from_hard(vec![0; 25]).unwrap();
        let out = masked_local_aggregation(&c.agg, &c.features, &c.idx, &c.rel, &zeros).unwrap();
        let other = c.features.mapv(|v| v * 3.0 - 1.0);
        let out2 = masked_local_aggregation(&c.agg, &other, &c.idx, &c.rel, &zeros).unwrap();
        assert_eq!(out, out2);
        let zero_feats = Array2::zeros(c.features.raw_dim());
        let reference = global_aggregation(&c.agg, &zero_feats, &c.idx, &c.rel).unwrap();
        assert_eq!(out, reference);
    }

    #[test]
    fn augmented_doubles_boundary_features() {
        let c = case(3, 20, 4, 3);
        let mut hard = vec![1u8; 20];
        hard[4] = 0;
        let mask = BoundaryField::from_hard(hard).unwrap();
        let aug = augmented_aggregation(&c.agg, &c.features, &c.idx, &c.rel, &mask).unwrap();
        let mut doubled = c.features.clone();
        doubled.row_mut(4).mapv_inplace(|v| 2.0 * v);
        let reference = global_aggregation(&c.agg, &doubled, &c.idx, &c.rel).unwrap();
        assert_eq!(aug, reference);
    }

    #[test]
    fn single_neighbor_unit_reduction() {
        let mut c = case(4, 10, 1, 3);
        // phi outputs exactly one weight of value 1
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        c.agg = Aggregator::new(3, 5, 1, 4, 5, &mut rng);
        let last = c.agg.weightnet.0.layers.last_mut().unwrap();
        last.weight.value.fill(0.0);
        last.bias.value.fill(1.0);
        c.agg.proj.weight.value = Array2::eye(5);
        c.agg.proj.bias.value.fill(0.0);
        c.agg.activation = Activation::Identity;
        let out = global_aggregation(&c.agg, &c.features, &c.idx, &c.rel).unwrap();
        let transformed = c.agg.featurenet.0.infer(&c.features);
        for i in 0..10 {
            let j = c.idx.neighbors(i)[0];
            assert_eq!(out.row(i), transformed.row(j));
        }
    }

    #[test]
    fn width_mismatch() {
        let c = case(5, 10, 3, 4);
        let bad = Array2::zeros((10, 3));
        assert!(matches!(
            global_aggregation(&c.agg, &bad, &c.idx, &c.rel),
            Err(Error::Shape(_))
        ));
        let short = BoundaryField::from_hard(vec![1; 9]).unwrap();
        assert!(masked_local_aggregation(&c.agg, &c.features, &c.idx, &c.rel, &short).is_err());
    }

    fn objective(agg: &Aggregator, c: &Case, coeff: Option<&[f64]>, probe: &Array2<f64>) -> f64 {
        let (out, _) = agg.forward(&c.features, &c.idx, &c.rel, coeff).unwrap();
        (&out * probe).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let c = case(6, 24, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coeff: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..1.0)).collect();
        let probe = Array2::from_shape_fn((24, 7), |_| rng.random_range(-1.0..1.0));
        let mut agg = c.agg.clone();
        agg.zero_grad();
        let (_, cache) = agg.forward(&c.features, &c.idx, &c.rel, Some(&coeff)).unwrap();
        let dfeat = agg.backward(&cache, &probe).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let names = agg.param_names();
        for name in &names {
            let mut grad = None;
            agg.visit("", &mut |n, p| {
                if n == name {
                    grad = Some(p.grad.clone());
                }
            });
            let grad = grad.unwrap();
            for e in 0..grad.len() {
                let eval = |delta: f64| {
                    let mut m = c.agg.clone();
                    m.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value.as_slice_mut().unwrap()[e] += delta;
                        }
                    });
                    objective(&m, &c, Some(&coeff), &probe)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = grad.as_slice().unwrap()[e];
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-5, "worst parameter error {worst}");
        for (r, col) in [(3usize, 1usize), (10, 0), (17, 3)] {
            let eval = |delta: f64| {
                let mut f = c.features.clone();
                f[[r, col]] += delta;
                let (out, _) = c.agg.forward(&f, &c.idx, &c.rel, Some(&coeff)).unwrap();
                (&out * &probe).sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - dfeat[[r, col]]).abs() < 1e-6 * fd.abs().max(1.0),
                "{fd} vs {}",
                dfeat[[r, col]]
            );
        }
    }
}
