use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::PreparedScene;
use super::loss::predict_classes;
use crate::boundary::{perturb_exchange_neighbor, perturb_random_flip, BoundaryField, BINARIZE_THRESHOLD};
use crate::encode::{ForwardOptions, MaskOverride, Network};
use crate::error::{Error, Result};
use crate::metrics::{miou, BoundaryCounts, ConfusionMatrix};

/// Corruption applied to the predicted boundary before it is used as a mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perturbation {
    #[default]
    None,
    /// Flip this fraction of binarized scores.
    Flip(f64),
    /// Swap this fraction of predicted boundary points with a neighbor.
    Exchange(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub mask: MaskOverride,
    pub perturbation: Perturbation,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub accuracy: f64,
    /// Binarized prediction against ground truth, boundary as positive.
    pub boundary: BoundaryCounts,
    /// Point accuracy on ground-truth boundary points, if there are any.
    pub band_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(confusion: ConfusionMatrix, boundary: BoundaryCounts, band: (u64, u64)) -> Result<Self> {
        Ok(Self {
            miou: miou(&confusion)?,
            class_iou: confusion.class_iou(),
            accuracy: confusion.accuracy().unwrap_or(0.0),
            confusion,
            boundary,
            band_accuracy: (band.1 > 0).then(|| band.0 as f64 / band.1 as f64),
        })
    }
}

struct SceneResult {
    confusion: ConfusionMatrix,
    boundary: BoundaryCounts,
    band: (u64, u64),
}

/// Mask values for one scene under a perturbation. The scores are
/// binarized and corrupted; points whose binary value changed take the new
/// hard value, all others keep their soft score.
fn perturbed_mask(scene: &PreparedScene, scores: &[f64], opts: &EvalOptions) -> Result<Option<Vec<f64>>> {
    let seed = opts.seed ^ scene.fingerprint;
    let field = BoundaryField::from_soft(scores.to_vec())?;
    let before = field.binarized();
    let after = match opts.perturbation {
        Perturbation::None => return Ok(None),
        Perturbation::Flip(f) => perturb_random_flip(&field, f, seed)?,
        Perturbation::Exchange(f) => perturb_exchange_neighbor(&field, &scene.geometry.bpm_idx, f, seed)?,
    };
    let after = after.hard().expect("perturbations yield hard fields");
    Ok(Some(
        scores
            .iter()
            .zip(before.iter().zip(after))
            .map(|(&s, (&b, &a))| if a == b { s } else { f64::from(a) })
            .collect(),
    ))
}

fn evaluate_scene(net: &Network, scene: &PreparedScene, opts: &EvalOptions) -> Result<SceneResult> {
    let (scores, _) = net.bpm.forward(&scene.geometry.bpm_input)?;
    let forward = ForwardOptions {
        mask: opts.mask,
        mask_values: perturbed_mask(scene, &scores, opts)?,
        zero_gco: false,
    };
    let out = net.forward(&scene.geometry, &forward)?;
    let pred = predict_classes(&out.logits);
    let mut confusion = ConfusionMatrix::new(net.num_classes());
    confusion.accumulate(&scene.labels, &pred)?;
    let truth: Vec<bool> = scene.boundary.iter().map(|&g| g == 0).collect();
    let predicted: Vec<bool> = out.scores.iter().map(|&s| s < BINARIZE_THRESHOLD).collect();
    let mut boundary = BoundaryCounts::default();
    boundary.accumulate(&truth, &predicted)?;
    let mut band = (0, 0);
    for ((&t, &p), &on) in scene.labels.iter().zip(&pred).zip(&truth) {
        if on {
            band.1 += 1;
            band.0 += u64::from(t == p);
        }
    }
    Ok(SceneResult {
        confusion,
        boundary,
        band,
    })
}

/// Metrics over a labeled dataset with one confusion matrix summed across
/// scenes. Scenes run in parallel; the merge is order-independent.
pub fn evaluate(dataset: &[PreparedScene], net: &Network, opts: &EvalOptions) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    if let Perturbation::Flip(f) | Perturbation::Exchange(f) = opts.perturbation {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Range(format!("perturbation fraction {f} outside [0, 1]")));
        }
    }
    let results: Vec<SceneResult> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_scene(net, s, opts).map_err(|e| e.in_layer(format!("scene {i}"))))
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(net.num_classes());
    let mut boundary = BoundaryCounts::default();
    let mut band = (0, 0);
    for r in results {
        confusion.merge(&r.confusion)?;
        boundary.merge(&r.boundary);
        band.0 += r.band.0;
        band.1 += r.band.1;
    }
    EvalReport::from_counts(confusion, boundary, band)
}
