use std::fmt;

use ndarray::Array2;
use rayon::prelude::*;

use super::engine::PreparedScene;
use super::loss::seg_loss;
use crate::boundary::{bpm_loss_raw, BoundaryRule};
use crate::cloud::PointCloud;
use crate::encode::{ForwardOptions, Network};
use crate::error::{Error, Result};
use crate::nn::Parameterized;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Kernel blocks are only checked when no assignment is this close to a tie.
pub const TIE_SAFE_MARGIN: f64 = 1e-4;
pub const MAX_POINTS: usize = 64;
/// Gradient magnitudes below this are compared in absolute terms.
const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockStatus {
    Passed,
    Failed,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub entries: usize,
    /// Entries compared; differences that cross a kink are left out.
    pub checked: usize,
    pub max_rel_error: f64,
    pub status: BlockStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    /// Smallest distance to a kernel assignment tie in the checked pass.
    pub tie_distance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.status != BlockStatus::Failed)
    }

    pub fn failed_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| b.status == BlockStatus::Failed)
            .map(|b| b.name.as_str())
            .collect()
    }

    pub fn skipped_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| matches!(b.status, BlockStatus::Skipped(_)))
            .map(|b| b.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            let status = match &b.status {
                BlockStatus::Passed => "ok".to_string(),
                BlockStatus::Failed => "FAILED".to_string(),
                BlockStatus::Skipped(why) => format!("skipped ({why})"),
            };
            writeln!(
                f,
                "{:<36} {:>5}/{:<5} {:>10.3e}  {status}",
                b.name, b.checked, b.entries, b.max_rel_error
            )?;
        }
        write!(
            f,
            "tolerance {:.1e}, kernel tie distance {:.3e}: {}",
            self.tolerance,
            self.tie_distance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// The two loss terms, kept apart so each is differenced on its own scale,
/// and the activation pattern of the pass.
fn objective(net: &Network, scene: &PreparedScene, opts: &ForwardOptions) -> Result<([f64; 2], Vec<u32>)> {
    let out = net.forward(&scene.geometry, opts)?;
    let (seg, _) = seg_loss(&out.logits, &scene.labels)?;
    let (bpm, _) = bpm_loss_raw(&out.scores, &scene.boundary, net.bpm.w1, net.bpm.w2)?;
    Ok(([seg, bpm], net.activation_pattern(&out.cache)))
}

/// Compare analytic gradients of the joint loss with central differences,
/// block by block. The mask is held at the unperturbed boundary scores, as
/// it is detached from the segmentation loss. Entries whose `±h` passes
/// change a ReLU state or kernel assignment are not compared.
pub fn grad_check(net: &Network, cloud: &PointCloud, rule: &BoundaryRule, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(net, cloud, rule, tolerance, |_, _| {})
}

/// As [`grad_check`], passing each analytic gradient block through
/// `tamper` before comparison (fault injection).
pub fn grad_check_with(
    net: &Network,
    cloud: &PointCloud,
    rule: &BoundaryRule,
    tolerance: f64,
    mut tamper: impl FnMut(&str, &mut Array2<f64>),
) -> Result<GradCheckReport> {
    if cloud.len() > MAX_POINTS {
        return Err(Error::Argument(format!(
            "gradient checks take at most {MAX_POINTS} points, got {}",
            cloud.len()
        )));
    }
    let scene = PreparedScene::new(cloud, &net.arch, rule)?;
    let (scores, _) = net.bpm.forward(&scene.geometry.bpm_input)?;
    let opts = ForwardOptions {
        mask_values: Some(scores),
        ..Default::default()
    };

    let mut analytic = net.clone();
    analytic.zero_grad();
    let out = analytic.forward(&scene.geometry, &opts)?;
    let (_, dlogits) = seg_loss(&out.logits, &scene.labels)?;
    let (_, dscores) = bpm_loss_raw(&out.scores, &scene.boundary, net.bpm.w1, net.bpm.w2)?;
    analytic.backward(&scene.geometry, &out.cache, &dlogits, Some(&dscores))?;
    let tie_distance = analytic.kink_margin(&out.cache).gco;
    let pattern = analytic.activation_pattern(&out.cache);

    let mut grads = Vec::new();
    analytic.visit("", &mut |name, p| {
        let mut g = p.grad.clone();
        tamper(name, &mut g);
        grads.push((name.to_string(), g));
    });

    let mut blocks = Vec::with_capacity(grads.len());
    for (name, grad) in grads {
        let entries = grad.len();
        if name.contains(".gco.") && tie_distance <= TIE_SAFE_MARGIN {
            blocks.push(BlockCheck {
                name,
                entries,
                checked: 0,
                max_rel_error: 0.0,
                status: BlockStatus::Skipped(format!("tie distance {tie_distance:.2e}")),
            });
            continue;
        }
        let flat: Vec<f64> = grad.iter().copied().collect();
        let errors: Vec<Option<f64>> = (0..entries)
            .into_par_iter()
            .map(|e| {
                let eval = |delta: f64| {
                    let mut m = net.clone();
                    m.visit_mut("", &mut |n, p| {
                        if n == name {
                            let v = p.value.iter_mut().nth(e).expect("entry in range");
                            *v += delta;
                        }
                    });
                    objective(&m, &scene, &opts)
                };
                let ((up, up_pattern), (down, down_pattern)) = (eval(STEP)?, eval(-STEP)?);
                if up_pattern != pattern || down_pattern != pattern {
                    return Ok(None);
                }
                let fd = (up[0] - down[0]) / (2.0 * STEP) + (up[1] - down[1]) / (2.0 * STEP);
                let a = flat[e];
                Ok(Some((a - fd).abs() / a.abs().max(fd.abs()).max(MAGNITUDE_FLOOR)))
            })
            .collect::<Result<_>>()?;
        let checked: Vec<f64> = errors.into_iter().flatten().collect();
        let worst = checked.iter().copied().fold(0.0, f64::max);
        let status = if checked.is_empty() {
            BlockStatus::Skipped("every difference crosses a kink".into())
        } else if worst <= tolerance {
            BlockStatus::Passed
        } else {
            BlockStatus::Failed
        };
        blocks.push(BlockCheck {
            name,
            entries,
            checked: checked.len(),
            max_rel_error: worst,
            status,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        tie_distance,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::ArchConfig;
    use crate::scene::{generate_scene, SceneSpec};

    fn setup() -> (Network, PointCloud) {
        let cloud = generate_scene(&SceneSpec::random(21, 3, 64, [1.5, 1.5, 1.0]).unwrap()).unwrap();
        let net = Network::new(ArchConfig::tiny(3), 1.0, 10.0).unwrap();
        (net, cloud)
    }

    #[test]
    fn fresh_tiny_net_passes_and_lists_each_block_once() {
        let (net, cloud) = setup();
        let report = grad_check(&net, &cloud, &BoundaryRule::default(), 1e-4).unwrap();
        assert!(report.passed(), "{report}");
        let names: Vec<_> = report.blocks.iter().map(|b| b.name.clone()).collect();
        assert_eq!(names, net.param_names());
    }

    #[test]
    fn sign_flipped_feature_gradient_is_flagged() {
        let (net, cloud) = setup();
        let report = grad_check_with(&net, &cloud, &BoundaryRule::default(), 1e-4, |name, g| {
            if name == "encoder.1.featurenet.0.weight" {
                g.mapv_inplace(|v| -v);
            }
        })
        .unwrap();
        assert_eq!(report.failed_blocks(), vec!["encoder.1.featurenet.0.weight"]);
    }

    #[test]
    fn large_clouds_rejected() {
        let (net, _) = setup();
        let big = generate_scene(&SceneSpec::random(2, 3, 100, [2.0, 2.0, 1.0]).unwrap()).unwrap();
        assert!(grad_check(&net, &big, &BoundaryRule::default(), 1e-4).is_err());
    }
}
