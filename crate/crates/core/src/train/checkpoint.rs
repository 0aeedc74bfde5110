//! JSON checkpoints.
//!
//! Layout: `format_version`, `config_hash` (hex SHA-256 of the architecture
//! and loss weights), `arch`, `w1`, `w2`, `epochs_completed`, `params` (one
//! record per block in visiting order: `name`, `shape` `[rows, cols]`,
//! row-major `data`) and `optimizer` (step, hyperparameters and per-block
//! first/second moments in the same record form).

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::engine::TrainState;
use super::optim::{Moment, OptimizerState};
use crate::encode::{ArchConfig, Network};
use crate::error::{Error, Result};
use crate::nn::Parameterized;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentRecord {
    name: String,
    shape: [usize; 2],
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerRecord {
    step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    moments: Vec<MomentRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config_hash: String,
    arch: ArchConfig,
    w1: f64,
    w2: f64,
    epochs_completed: usize,
    params: Vec<Tensor>,
    optimizer: OptimizerRecord,
}

pub fn config_hash(arch: &ArchConfig, w1: f64, w2: f64) -> String {
    let text = serde_json::to_string(&(arch, w1, w2)).expect("config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn to_array(name: &str, shape: [usize; 2], data: Vec<f64>) -> Result<Array2<f64>> {
    Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|_| Error::Checkpoint(format!("block {name}: data length does not match shape {shape:?}")))
}

pub fn checkpoint_string(state: &TrainState) -> String {
    let net = &state.net;
    let mut params = Vec::new();
    net.visit("", &mut |name, p| {
        params.push(Tensor {
            name: name.to_string(),
            shape: p.shape(),
            data: p.value.iter().copied().collect(),
        })
    });
    let opt = &state.opt;
    let moments = opt
        .moments
        .iter()
        .map(|m| MomentRecord {
            name: m.name.clone(),
            shape: [m.first.nrows(), m.first.ncols()],
            first: m.first.iter().copied().collect(),
            second: m.second.iter().copied().collect(),
        })
        .collect();
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&net.arch, net.bpm.w1, net.bpm.w2),
        arch: net.arch.clone(),
        w1: net.bpm.w1,
        w2: net.bpm.w2,
        epochs_completed: state.epochs_completed,
        params,
        optimizer: OptimizerRecord {
            step: opt.step,
            learning_rate: opt.learning_rate,
            beta1: opt.beta1,
            beta2: opt.beta2,
            epsilon: opt.epsilon,
            moments,
        },
    };
    let mut text = serde_json::to_string(&file).expect("checkpoint serializes");
    text.push('\n');
    text
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_string(state)).map_err(|e| Error::io(path, e))
}

fn parse(text: &str) -> Result<CheckpointFile> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    match value.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "format version {v}, this build reads version {FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Checkpoint("missing format_version".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
}

/// Copy stored blocks into `net`, which must have the same block names and
/// shapes.
fn restore_params(net: &mut Network, params: Vec<Tensor>) -> Result<()> {
    let expected = net.param_names();
    if params.len() != expected.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} parameter blocks, network has {}",
            params.len(),
            expected.len()
        )));
    }
    let mut arrays = Vec::with_capacity(params.len());
    let mut shapes = Vec::new();
    net.visit("", &mut |_, p| shapes.push(p.shape()));
    for ((t, name), shape) in params.into_iter().zip(&expected).zip(shapes) {
        if &t.name != name {
            return Err(Error::Shape(format!(
                "checkpoint block {} where {name} was expected",
                t.name
            )));
        }
        if t.shape != shape {
            return Err(Error::Shape(format!(
                "block {name}: checkpoint shape {:?}, network shape {shape:?}",
                t.shape
            )));
        }
        arrays.push(to_array(name, t.shape, t.data)?);
    }
    let mut it = arrays.into_iter();
    net.visit_mut("", &mut |_, p| {
        p.value = it.next().expect("one array per block");
        p.zero_grad();
    });
    Ok(())
}

fn restore_optimizer(rec: OptimizerRecord) -> Result<OptimizerState> {
    let moments = rec
        .moments
        .into_iter()
        .map(|m| {
            Ok(Moment {
                first: to_array(&m.name, m.shape, m.first)?,
                second: to_array(&m.name, m.shape, m.second)?,
                name: m.name,
            })
        })
        .collect::<Result<_>>()?;
    Ok(OptimizerState {
        step: rec.step,
        learning_rate: rec.learning_rate,
        beta1: rec.beta1,
        beta2: rec.beta2,
        epsilon: rec.epsilon,
        moments,
    })
}

fn build(file: CheckpointFile, mut net: Network) -> Result<TrainState> {
    restore_params(&mut net, file.params)?;
    let opt = restore_optimizer(file.optimizer)?;
    opt.check_matches(&net)?;
    Ok(TrainState {
        net,
        opt,
        epochs_completed: file.epochs_completed,
    })
}

pub fn read_checkpoint(text: &str) -> Result<TrainState> {
    let file = parse(text)?;
    let hash = config_hash(&file.arch, file.w1, file.w2);
    if hash != file.config_hash {
        return Err(Error::Checkpoint(
            "config hash does not match the stored architecture".into(),
        ));
    }
    let net = Network::new(file.arch.clone(), file.w1, file.w2)?;
    build(file, net)
}

/// Load a checkpoint using the architecture stored inside it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text)
}

/// Load a checkpoint into a network built from `arch`. Blocks whose shapes
/// differ are reported by name.
pub fn load_checkpoint_for(path: impl AsRef<Path>, arch: &ArchConfig, w1: f64, w2: f64) -> Result<TrainState> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = parse(&text)?;
    let stored = file.config_hash.clone();
    let state = build(file, Network::new(arch.clone(), w1, w2)?)?;
    if stored != config_hash(arch, w1, w2) {
        return Err(Error::Checkpoint(
            "checkpoint was written for a different architecture or loss weights".into(),
        ));
    }
    Ok(state)
}
