use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::{predict_classes, seg_loss, total_loss};
use super::optim::{adam_step, check_adam_settings, OptimizerState};
use crate::boundary::{annotate_boundary_gt, bpm_loss_raw, BoundaryRule};
use crate::cloud::PointCloud;
use crate::encode::{ArchConfig, ForwardOptions, Geometry, MaskOverride, Network};
use crate::error::{Error, Result};
use crate::knn::knn_index;
use crate::metrics::{miou, ConfusionMatrix};
use crate::nn::Parameterized;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Constant learning rate.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Add the boundary loss to the objective.
    pub bpm_loss: bool,
    pub mask: MaskOverride,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            epochs: 50,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            bpm_loss: true,
            mask: MaskOverride::AsConfigured,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        check_adam_settings(self.learning_rate, self.beta1, self.beta2, self.epsilon)
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            mask: self.mask,
            ..Default::default()
        }
    }
}

/// A labeled cloud with its network geometry and boundary ground truth,
/// computed once and reused every epoch.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub geometry: Geometry,
    pub labels: Vec<usize>,
    /// Ground truth per point, 0 on boundaries.
    pub boundary: Vec<u8>,
    /// Content hash, used to derive per-scene seeds independent of order.
    pub fingerprint: u64,
}

impl PreparedScene {
    pub fn new(cloud: &PointCloud, arch: &ArchConfig, rule: &BoundaryRule) -> Result<Self> {
        let labels = cloud.require_labels()?.to_vec();
        if let Some(&bad) = labels.iter().find(|&&l| l >= arch.num_classes) {
            return Err(Error::Config(format!(
                "cloud has label {bad} but the network predicts {} classes",
                arch.num_classes
            )));
        }
        rule.validate()?;
        let idx = knn_index(cloud, rule.k)?;
        let boundary = annotate_boundary_gt(cloud, &idx, rule)?
            .hard()
            .expect("annotation is hard")
            .to_vec();
        let geometry = Geometry::build(cloud, arch)?;
        Ok(Self {
            geometry,
            labels,
            boundary,
            fingerprint: fingerprint(cloud),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn fingerprint(cloud: &PointCloud) -> u64 {
    let mut h = Sha256::new();
    for v in cloud.positions().iter().chain(cloud.colors().iter()) {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn prepare_dataset(clouds: &[PointCloud], arch: &ArchConfig, rule: &BoundaryRule) -> Result<Vec<PreparedScene>> {
    clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| PreparedScene::new(c, arch, rule).map_err(|e| e.in_layer(format!("scene {i}"))))
        .collect()
}

/// Network, optimizer and progress: everything a checkpoint captures.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: Network,
    pub opt: OptimizerState,
    pub epochs_completed: usize,
}

impl TrainState {
    pub fn new(net: Network, cfg: &TrainConfig) -> Result<Self> {
        let opt = OptimizerState::new(&net, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)?;
        Ok(Self {
            net,
            opt,
            epochs_completed: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub seg: f64,
    pub bpm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total_loss: f64,
    pub seg_loss: f64,
    pub bpm_loss: f64,
    pub train_miou: f64,
}

impl EpochMetrics {
    /// `epoch total_loss seg_loss bpm_loss train_miou`, tab separated.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.8}\t{:.8}\t{:.8}\t{:.6}",
            self.epoch, self.total_loss, self.seg_loss, self.bpm_loss, self.train_miou
        )
    }
}

struct ElementResult {
    grads: Vec<Array2<f64>>,
    seg: f64,
    bpm: f64,
    predictions: Vec<usize>,
}

fn run_element(net: &Network, scene: &PreparedScene, cfg: &TrainConfig, scale: f64) -> Result<ElementResult> {
    let mut local = net.clone();
    local.zero_grad();
    let out = local.forward(&scene.geometry, &cfg.forward_options())?;
    let (seg, mut dlogits) = seg_loss(&out.logits, &scene.labels)?;
    dlogits *= scale;
    let (bpm, dscores) = if cfg.bpm_loss {
        let (loss, mut grad) = bpm_loss_raw(&out.scores, &scene.boundary, net.bpm.w1, net.bpm.w2)?;
        grad.iter_mut().for_each(|g| *g *= scale);
        (loss, Some(grad))
    } else {
        (0.0, None)
    };
    let predictions = predict_classes(&out.logits);
    if seg.is_finite() && bpm.is_finite() {
        local.backward(&scene.geometry, &out.cache, &dlogits, dscores.as_deref())?;
    }
    let mut grads = Vec::new();
    local.visit("", &mut |_, p| grads.push(p.grad.clone()));
    Ok(ElementResult {
        grads,
        seg,
        bpm,
        predictions,
    })
}

/// One optimizer step on `batch`. The objective is the batch mean of the
/// per-scene losses; gradients are reduced in batch order.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&PreparedScene],
    cfg: &TrainConfig,
    confusion: Option<&mut ConfusionMatrix>,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let net = &state.net;
    let results: Vec<ElementResult> = batch
        .par_iter()
        .map(|scene| run_element(net, scene, cfg, scale))
        .collect::<Result<_>>()?;
    let seg = results.iter().map(|r| r.seg).sum::<f64>() * scale;
    let bpm = results.iter().map(|r| r.bpm).sum::<f64>() * scale;
    let total = total_loss(seg, bpm).map_err(|e| Error::NonFinite {
        epoch: state.epochs_completed + 1,
        batch: 0,
        detail: e.to_string(),
    })?;
    if let Some(cm) = confusion {
        for (r, scene) in results.iter().zip(batch) {
            cm.accumulate(&scene.labels, &r.predictions)?;
        }
    }
    state.net.zero_grad();
    for r in &results {
        let mut i = 0;
        state.net.visit_mut("", &mut |_, p| {
            p.grad += &r.grads[i];
            i += 1;
        });
    }
    adam_step(&mut state.net, &mut state.opt)?;
    Ok(StepLoss { total, seg, bpm })
}

/// Scene order for `epoch` (1-based). Depends only on the seed and the
/// epoch so a resumed run replays the same batches.
pub fn epoch_order(seed: u64, epoch: usize, scenes: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..scenes).collect();
    order.shuffle(&mut rng);
    order
}

/// Train from `state.epochs_completed` up to `cfg.epochs`, calling `on_epoch`
/// after each epoch.
pub fn train_loop(
    dataset: &[PreparedScene],
    state: &mut TrainState,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let classes = state.net.num_classes();
    let mut log = Vec::new();
    for epoch in state.epochs_completed + 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, dataset.len());
        let mut confusion = ConfusionMatrix::new(classes);
        let (mut total, mut seg, mut bpm) = (0.0, 0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, chunk) in batches.iter().enumerate() {
            let scenes: Vec<&PreparedScene> = chunk.iter().map(|&i| &dataset[i]).collect();
            let step = train_step(state, &scenes, cfg, Some(&mut confusion)).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("{detail}; scenes {chunk:?}"),
                },
                other => other,
            })?;
            total += step.total;
            seg += step.seg;
            bpm += step.bpm;
        }
        let nb = batches.len() as f64;
        state.epochs_completed = epoch;
        let metrics = EpochMetrics {
            epoch,
            total_loss: total / nb,
            seg_loss: seg / nb,
            bpm_loss: bpm / nb,
            train_miou: miou(&confusion)?,
        };
        on_epoch(state, &metrics)?;
        log.push(metrics);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Pose, Primitive, SceneSpec, Shape};

    fn two_blocks() -> PointCloud {
        let spec = SceneSpec {
            seed: 3,
            extent: [4.0, 2.0, 1.0],
            num_classes: 2,
            primitives: vec![
                Primitive {
                    shape: Shape::Box,
                    pose: Pose {
                        position: [-1.0, 0.0, 0.0],
                        yaw: 0.0,
                    },
                    size: [0.8, 0.8, 0.8],
                    class: 0,
                    color: [0.9, 0.1, 0.1],
                },
                Primitive {
                    shape: Shape::Box,
                    pose: Pose {
                        position: [1.0, 0.0, 0.0],
                        yaw: 0.0,
                    },
                    size: [0.8, 0.8, 0.8],
                    class: 1,
                    color: [0.1, 0.1, 0.9],
                },
            ],
            density: 40.0,
            color_noise: 0.02,
        };
        generate_scene(&spec).unwrap()
    }

    fn tiny_setup(cloud: &PointCloud) -> (PreparedScene, TrainState, TrainConfig) {
        let arch = ArchConfig::tiny(2);
        let rule = BoundaryRule { k: 16, ratio: 0.4 };
        let scene = PreparedScene::new(cloud, &arch, &rule).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            epochs: 3,
            ..Default::default()
        };
        let state = TrainState::new(Network::new(arch, 1.0, 10.0).unwrap(), &cfg).unwrap();
        (scene, state, cfg)
    }

    #[test]
    fn separable_scene_loss_decreases() {
        let cloud = two_blocks();
        let (scene, mut state, cfg) = tiny_setup(&cloud);
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let loss = train_step(&mut state, &[&scene], &cfg, None).unwrap().total;
            assert!(loss < last, "step {step}: {loss} after {last}");
            last = loss;
        }
    }

    #[test]
    fn disabling_boundary_loss_leaves_seg_term() {
        let cloud = two_blocks();
        let (scene, state, cfg) = tiny_setup(&cloud);
        let mut with = state.clone();
        let mut without = state;
        let off = TrainConfig {
            bpm_loss: false,
            ..cfg.clone()
        };
        let a = train_step(&mut with, &[&scene], &cfg, None).unwrap();
        let b = train_step(&mut without, &[&scene], &off, None).unwrap();
        assert_eq!(a.seg, b.seg);
        assert!(a.bpm > 0.0);
        assert_eq!(b.bpm, 0.0);
        assert_eq!(b.total, b.seg);
        // the boundary term only reaches the boundary branch
        with.net.visit("", &mut |n, p| {
            let mut other = None;
            without.net.visit("", &mut |m, q| {
                if m == n {
                    other = Some(q.value.clone());
                }
            });
            assert_eq!(n.starts_with("bpm"), other.unwrap() != p.value, "{n}");
        });
    }

    #[test]
    fn shuffles_depend_on_seed_and_epoch_only() {
        assert_eq!(epoch_order(4, 2, 10), epoch_order(4, 2, 10));
        assert_ne!(epoch_order(4, 1, 10), epoch_order(4, 2, 10));
        let mut sorted = epoch_order(9, 3, 10);
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let clouds: Vec<PointCloud> = (0..3)
            .map(|s| generate_scene(&SceneSpec::random(s, 3, 160, [2.0, 2.0, 1.5]).unwrap()).unwrap())
            .collect();
        let arch = ArchConfig::tiny(3);
        let rule = BoundaryRule::default();
        let data = prepare_dataset(&clouds, &arch, &rule).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            ..Default::default()
        };
        let fresh = TrainState::new(Network::new(arch, 1.0, 10.0).unwrap(), &cfg).unwrap();

        let mut full = fresh.clone();
        let full_log = train_loop(&data, &mut full, &cfg, |_, _| Ok(())).unwrap();

        let mut part = fresh;
        let first = TrainConfig {
            epochs: 2,
            ..cfg.clone()
        };
        let mut log = train_loop(&data, &mut part, &first, |_, _| Ok(())).unwrap();
        log.extend(train_loop(&data, &mut part, &cfg, |_, _| Ok(())).unwrap());
        assert_eq!(part, full);
        assert_eq!(log, full_log);
        assert_eq!(log.len(), 4);
    }

    #[test]
    fn nan_aborts_with_batch() {
        let cloud = two_blocks();
        let (scene, mut state, cfg) = tiny_setup(&cloud);
        state.net.visit_mut("", &mut |n, p| {
            if n == "head.1.bias" {
                p.value.fill(f64::NAN);
            }
        });
        let data = vec![scene];
        let err = train_loop(&data, &mut state, &cfg, |_, _| Ok(())).unwrap_err();
        match err {
            Error::NonFinite { epoch, batch, .. } => assert_eq!((epoch, batch), (1, 0)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn log_line_has_five_fields() {
        let m = EpochMetrics {
            epoch: 3,
            total_loss: 1.5,
            seg_loss: 1.0,
            bpm_loss: 0.5,
            train_miou: 0.25,
        };
        assert_eq!(m.log_line().split('\t').count(), 5);
        assert!(m.log_line().starts_with("3\t"));
    }
}
