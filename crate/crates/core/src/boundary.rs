//! Boundary ground truth, the boundary prediction network and its loss,
//! label downsampling, and the two perturbation protocols used in
//! robustness evaluation.
//!
//! Convention throughout: `0` marks a boundary point, `1` a non-boundary
//! point. Soft scores follow the same polarity, so a score below
//! [`BINARIZE_THRESHOLD`] reads as boundary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::knn::NeighborhoodIndex;
use crate::nn::{join, sigmoid, Activation, Mlp, MlpCache, Param, Parameterized};

/// Soft scores are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;
pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryField {
    hard: Option<Vec<u8>>,
    soft: Option<Vec<f64>>,
}

impl BoundaryField {
    pub fn from_hard(hard: Vec<u8>) -> Result<Self> {
        if let Some(v) = hard.iter().find(|&&v| v > 1) {
            return Err(Error::Range(format!("hard boundary value {v} is not 0 or 1")));
        }
        Ok(Self {
            hard: Some(hard),
            soft: None,
        })
    }

    /// Soft scores, clamped into `[EPS, 1 - EPS]`.
    pub fn from_soft(soft: Vec<f64>) -> Result<Self> {
        if soft.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("non-finite soft boundary score".into()));
        }
        Ok(Self {
            hard: None,
            soft: Some(soft.into_iter().map(clamp_score).collect()),
        })
    }

    pub fn with_both(hard: Vec<u8>, soft: Vec<f64>) -> Result<Self> {
        if hard.len() != soft.len() {
            return Err(Error::Shape("hard and soft fields differ in length".into()));
        }
        let mut f = Self::from_hard(hard)?;
        f.soft = Self::from_soft(soft)?.soft;
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.hard
            .as_ref()
            .map(Vec::len)
            .or_else(|| self.soft.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hard(&self) -> Option<&[u8]> {
        self.hard.as_deref()
    }

    pub fn soft(&self) -> Option<&[f64]> {
        self.soft.as_deref()
    }

    /// Hard values if present, otherwise soft scores thresholded at 0.5.
    pub fn binarized(&self) -> Vec<u8> {
        match (&self.hard, &self.soft) {
            (Some(h), _) => h.clone(),
            (None, Some(s)) => s.iter().map(|&v| u8::from(v >= BINARIZE_THRESHOLD)).collect(),
            (None, None) => Vec::new(),
        }
    }

    /// `true` for boundary points.
    pub fn boundary_mask(&self) -> Vec<bool> {
        self.binarized().into_iter().map(|v| v == 0).collect()
    }

    pub fn boundary_count(&self) -> usize {
        self.binarized().iter().filter(|&&v| v == 0).count()
    }

    /// Mask values for aggregation: soft scores when present, else hard values.
    pub fn mask_values(&self) -> Vec<f64> {
        match (&self.soft, &self.hard) {
            (Some(s), _) => s.clone(),
            (None, Some(h)) => h.iter().map(|&v| f64::from(v)).collect(),
            (None, None) => Vec::new(),
        }
    }
}

pub fn clamp_score(v: f64) -> f64 {
    v.clamp(EPS, 1.0 - EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryRule {
    pub k: usize,
    pub ratio: f64,
}

impl Default for BoundaryRule {
    fn default() -> Self {
        Self { k: 32, ratio: 0.4 }
    }
}

impl BoundaryRule {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("boundary rule k must be at least 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("boundary ratio {} not in (0, 1)", self.ratio)));
        }
        Ok(())
    }
}

/// `g_i = 0` iff strictly more than `ratio * k` of point `i`'s neighbors
/// carry a different label.
pub fn annotate_boundary_gt(cloud: &PointCloud, idx: &NeighborhoodIndex, rule: &BoundaryRule) -> Result<BoundaryField> {
    rule.validate()?;
    let labels = cloud.require_labels()?;
    if idx.k() != rule.k {
        return Err(Error::Argument(format!(
            "neighborhood has k = {} but the rule asks for k = {}",
            idx.k(),
            rule.k
        )));
    }
    annotate_labels(labels, idx, rule.ratio)
}

pub(crate) fn annotate_labels(labels: &[usize], idx: &NeighborhoodIndex, ratio: f64) -> Result<BoundaryField> {
    if idx.len() != labels.len() || idx.num_points() != labels.len() {
        return Err(Error::Shape(format!(
            "neighborhood covers {} rows over {} points, cloud has {}",
            idx.len(),
            idx.num_points(),
            labels.len()
        )));
    }
    let limit = ratio * idx.k() as f64;
    let hard = (0..idx.len())
        .map(|r| {
            let own = labels[idx.queries()[r]];
            let other = idx.neighbors(r).iter().filter(|&&j| labels[j] != own).count();
            u8::from(other as f64 <= limit)
        })
        .collect();
    BoundaryField::from_hard(hard)
}

/// Population variance of each channel over each row's neighbors (the query
/// point itself is not part of its neighborhood).
pub fn neighbor_feature_variance(features: &Array2<f64>, idx: &NeighborhoodIndex) -> Result<Array2<f64>> {
    if idx.k() == 0 {
        return Err(Error::Argument("variance needs at least one neighbor".into()));
    }
    if idx.num_points() != features.nrows() {
        return Err(Error::Shape(format!(
            "index over {} points, features have {} rows",
            idx.num_points(),
            features.nrows()
        )));
    }
    let k = idx.k() as f64;
    let width = features.ncols();
    let mut out = Array2::zeros((idx.len(), width));
    for r in 0..idx.len() {
        let nbrs = idx.neighbors(r);
        for c in 0..width {
            let mean = nbrs.iter().map(|&j| features[[j, c]]).sum::<f64>() / k;
            let var = nbrs
                .iter()
                .map(|&j| {
                    let d = features[[j, c]] - mean;
                    d * d
                })
                .sum::<f64>()
                / k;
            out[[r, c]] = var;
        }
    }
    Ok(out)
}

/// Boundary prediction network: a shared per-point MLP over neighbor color
/// variance followed by a sigmoid, plus the class-balance loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BpmParams {
    pub mlp: Mlp,
    /// Constant multiplier on the variance input. Color variances are
    /// small, so this only conditions the first layer.
    pub input_scale: f64,
    pub w1: f64,
    pub w2: f64,
}

#[derive(Clone, Debug)]
pub struct BpmCache {
    mlp: MlpCache,
    raw: Vec<f64>,
}

impl BpmParams {
    /// `widths` must start at the feature width (3 for colors) and end at 1.
    pub fn new(widths: &[usize], w1: f64, w2: f64, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 1 {
            return Err(Error::Config(format!("BPM widths {widths:?} must end in 1")));
        }
        if !(w1 > 0.0 && w2 > 0.0) {
            return Err(Error::Config("BPM loss weights must be positive".into()));
        }
        Ok(Self {
            mlp: Mlp::new(widths, Activation::Identity, rng),
            input_scale: 1.0,
            w1,
            w2,
        })
    }

    /// Soft scores from per-point variance features, with a cache for backward.
    pub fn forward(&self, variance: &Array2<f64>) -> Result<(Vec<f64>, BpmCache)> {
        if variance.ncols() != self.mlp.input_width() {
            return Err(Error::Shape(format!(
                "BPM expects {} input channels, got {}",
                self.mlp.input_width(),
                variance.ncols()
            )));
        }
        let (logits, mlp) = if self.input_scale == 1.0 {
            self.mlp.forward(variance)
        } else {
            self.mlp.forward(&(variance * self.input_scale))
        };
        let raw: Vec<f64> = logits.column(0).iter().map(|&z| sigmoid(z)).collect();
        let scores = raw.iter().map(|&s| clamp_score(s)).collect();
        Ok((scores, BpmCache { mlp, raw }))
    }

    /// Append the on/off state of every ReLU unit in a cached pass.
    pub fn relu_pattern(&self, cache: &BpmCache, out: &mut Vec<u32>) {
        self.mlp.relu_pattern(&cache.mlp, out);
    }

    /// Backpropagate `d loss / d score` into the MLP parameters.
    pub fn backward(&mut self, cache: &BpmCache, dscore: &[f64]) -> Result<()> {
        if dscore.len() != cache.raw.len() {
            return Err(Error::State("BPM cache does not match the gradient length".into()));
        }
        let dz = Array2::from_shape_fn((dscore.len(), 1), |(i, _)| {
            let s = cache.raw[i];
            if (EPS..=1.0 - EPS).contains(&s) {
                dscore[i] * s * (1.0 - s)
            } else {
                0.0
            }
        });
        self.mlp.backward(&cache.mlp, &dz);
        Ok(())
    }
}

impl Parameterized for BpmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Predicted soft boundary from the variance of colors over `idx`.
pub fn bpm_forward(cloud: &PointCloud, idx: &NeighborhoodIndex, params: &BpmParams) -> Result<BoundaryField> {
    let variance = neighbor_feature_variance(cloud.colors(), idx)?;
    let (scores, _) = params.forward(&variance)?;
    BoundaryField::from_soft(scores)
}

/// Weighted binary cross-entropy summed over points, and its gradient with
/// respect to each soft score.
pub fn bpm_loss(pred: &BoundaryField, truth: &BoundaryField, w1: f64, w2: f64) -> Result<(f64, Vec<f64>)> {
    let scores = pred
        .soft()
        .ok_or_else(|| Error::State("prediction has no soft scores".into()))?;
    let g = truth
        .hard()
        .ok_or_else(|| Error::State("ground truth has no hard labels".into()))?;
    bpm_loss_raw(scores, g, w1, w2)
}

pub(crate) fn bpm_loss_raw(scores: &[f64], g: &[u8], w1: f64, w2: f64) -> Result<(f64, Vec<f64>)> {
    if scores.len() != g.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            scores.len(),
            g.len()
        )));
    }
    if !(w1 > 0.0 && w2 > 0.0) {
        return Err(Error::Argument("loss weights must be positive".into()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &t) in scores.iter().zip(g) {
        let s = clamp_score(s);
        let t = f64::from(t);
        loss -= w1 * t * s.ln() + w2 * (1.0 - t) * (1.0 - s).ln();
        grad.push(-(w1 * t / s) + w2 * (1.0 - t) / (1.0 - s));
    }
    Ok((loss, grad))
}

/// Row gather of a boundary field.
pub fn downsample_boundary(field: &BoundaryField, sampled: &[usize]) -> Result<BoundaryField> {
    let n = field.len();
    if let Some(&bad) = sampled.iter().find(|&&i| i >= n) {
        return Err(Error::Range(format!("index {bad} out of range for {n} points")));
    }
    Ok(BoundaryField {
        hard: field.hard.as_ref().map(|h| sampled.iter().map(|&i| h[i]).collect()),
        soft: field.soft.as_ref().map(|s| sampled.iter().map(|&i| s[i]).collect()),
    })
}

/// Flip `round(fraction * n)` uniformly chosen points of the binarized field.
pub fn perturb_random_flip(field: &BoundaryField, fraction: f64, seed: u64) -> Result<BoundaryField> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!("fraction {fraction} not in [0, 1]")));
    }
    let mut values = field.binarized();
    let n = values.len();
    let amount = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, n, amount.min(n)) {
        values[i] ^= 1;
    }
    BoundaryField::from_hard(values)
}

/// Among boundary points, a seeded sample of `round(fraction * |boundary|)`
/// each swap their value with their nearest neighbor. Swaps run one after
/// another in ascending point index.
pub fn perturb_exchange_neighbor(
    field: &BoundaryField,
    idx: &NeighborhoodIndex,
    fraction: f64,
    seed: u64,
) -> Result<BoundaryField> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!("fraction {fraction} not in [0, 1]")));
    }
    let mut values = field.binarized();
    if idx.len() != values.len() {
        return Err(Error::Shape(format!(
            "neighborhood has {} rows, field has {} points",
            idx.len(),
            values.len()
        )));
    }
    let boundary: Vec<usize> = (0..values.len()).filter(|&i| values[i] == 0).collect();
    let amount = (fraction * boundary.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, boundary.len(), amount.min(boundary.len()))
        .into_iter()
        .map(|i| boundary[i])
        .collect();
    chosen.sort_unstable();
    for i in chosen {
        let j = idx.neighbors(i)[0];
        values.swap(i, j);
    }
    BoundaryField::from_hard(values)
}

/// Render in the `.bnd` format: header `n hard|soft`, one value per line.
pub fn to_bnd_string(field: &BoundaryField) -> String {
    let mut out = String::new();
    if let Some(h) = field.hard() {
        let _ = writeln!(out, "{} hard", h.len());
        for v in h {
            let _ = writeln!(out, "{v}");
        }
    } else if let Some(s) = field.soft() {
        let _ = writeln!(out, "{} soft", s.len());
        for v in s {
            let _ = writeln!(out, "{v}");
        }
    }
    out
}

pub fn parse_bnd(text: &str, origin: &Path) -> Result<BoundaryField> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if header.len() != 2 {
        return Err(err(1, "header must be `n hard|soft`".into()));
    }
    let n: usize = header[0].parse().map_err(|_| err(1, "bad count".into()))?;
    let values: Vec<&str> = lines.map(str::trim).filter(|l| !l.is_empty()).collect();
    if values.len() != n {
        return Err(err(
            values.len() + 2,
            format!("expected {n} values, found {}", values.len()),
        ));
    }
    match header[1] {
        "hard" => {
            let hard = values
                .iter()
                .enumerate()
                .map(|(i, v)| match *v {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(err(i + 2, format!("hard value must be 0 or 1, found {other:?}"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            BoundaryField::from_hard(hard)
        }
        "soft" => {
            let soft = values
                .iter()
                .enumerate()
                .map(|(i, v)| v.parse::<f64>().map_err(|_| err(i + 2, format!("bad real {v:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            BoundaryField::from_soft(soft)
        }
        other => Err(err(1, format!("unknown field kind {other:?}"))),
    }
}

pub fn save_boundary(field: &BoundaryField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bnd_string(field)).map_err(|e| Error::io(path, e))
}

pub fn load_boundary(path: impl AsRef<Path>) -> Result<BoundaryField> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bnd(&text, path)
}
