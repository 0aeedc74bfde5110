//! Run configuration: one TOML file with `[arch]`, `[train]`, `[boundary]`
//! and `[paths]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryRule;
use crate::encode::{ArchConfig, LayerConfig, MaskOverride};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPreset {
    #[default]
    Full,
    Baseline,
    Tiny,
}

/// A preset with optional field overrides. Explicit `encoder` / `decoder`
/// layer lists replace the preset's stacks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(default)]
    pub preset: ArchPreset,
    pub num_classes: usize,
    pub gco: Option<bool>,
    pub bpm_k: Option<usize>,
    pub bpm_hidden: Option<Vec<usize>>,
    pub bpm_input_scale: Option<f64>,
    pub gco_m: Option<usize>,
    pub gco_channels: Option<usize>,
    pub weight_hidden: Option<usize>,
    pub mid_channels: Option<usize>,
    pub head_hidden: Option<usize>,
    pub mask_min_points: Option<usize>,
    pub init_seed: Option<u64>,
    pub encoder: Option<Vec<LayerConfig>>,
    pub decoder: Option<Vec<LayerConfig>>,
}

impl ArchSection {
    pub fn resolve(&self) -> Result<ArchConfig> {
        let mut arch = match self.preset {
            ArchPreset::Full => ArchConfig::full(self.num_classes),
            ArchPreset::Baseline => ArchConfig::baseline(self.num_classes),
            ArchPreset::Tiny => ArchConfig::tiny(self.num_classes),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    arch.$field = v.clone();
                })*
            };
        }
        take!(
            bpm_k,
            bpm_hidden,
            bpm_input_scale,
            gco_m,
            gco_channels,
            weight_hidden,
            mid_channels,
            head_hidden,
            mask_min_points,
            init_seed,
            encoder,
            decoder
        );
        if self.gco == Some(false) {
            arch.strip_gco();
        }
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundarySection {
    pub k: usize,
    pub ratio: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for BoundarySection {
    fn default() -> Self {
        let rule = BoundaryRule::default();
        Self {
            k: rule.k,
            ratio: rule.ratio,
            w1: 1.0,
            w2: 10.0,
        }
    }
}

impl BoundarySection {
    pub fn rule(&self) -> BoundaryRule {
        BoundaryRule {
            k: self.k,
            ratio: self.ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory of labeled `.pts` training scenes.
    pub train_dir: PathBuf,
    /// Optional validation scenes; best-checkpoint selection uses them.
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            train_dir: PathBuf::from("data/train"),
            val_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub boundary: BoundarySection,
    #[serde(default)]
    pub paths: PathsSection,
}

/// A fully validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub rule: BoundaryRule,
    pub w1: f64,
    pub w2: f64,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Parse `text`, apply `key=value` overrides, then validate. Relative
    /// paths are resolved against `base`.
    pub fn parse(text: &str, overrides: &[String], base: &Path) -> Result<Resolved> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut resolved = cfg.resolve()?;
        for p in [&mut resolved.paths.train_dir, &mut resolved.paths.out_dir]
            .into_iter()
            .chain(resolved.paths.val_dir.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(resolved)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Resolved> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, overrides, base)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let arch = self.arch.resolve()?;
        self.train.validate()?;
        let rule = self.boundary.rule();
        rule.validate()?;
        let (w1, w2) = (self.boundary.w1, self.boundary.w2);
        if !(w1 > 0.0 && w2 > 0.0 && w1.is_finite() && w2.is_finite()) {
            return Err(Error::Config(format!(
                "boundary loss weights must be positive, got {w1}, {w2}"
            )));
        }
        Ok(Resolved {
            arch,
            train: self.train.clone(),
            rule,
            w1,
            w2,
            paths: self.paths.clone(),
        })
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply one `key=value` override. Dotted keys address nested tables.
/// Shorthands: `mask=off|on|augmented|as-configured` (off also disables the
/// boundary loss) and `gco=off|on`.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    match key {
        "mask" => {
            let mode: MaskOverride = toml::Value::String(raw.to_string())
                .try_into()
                .map_err(|_| Error::Config(format!("mask must be off, on, augmented or as-configured, got `{raw}`")))?;
            set(table, "train.mask", toml::Value::String(raw.to_string()))?;
            set(table, "train.bpm_loss", toml::Value::Boolean(mode != MaskOverride::Off))
        }
        "gco" => {
            let on = match raw {
                "on" | "true" => true,
                "off" | "false" => false,
                _ => return Err(Error::Config(format!("gco must be on or off, got `{raw}`"))),
            };
            set(table, "arch.gco", toml::Value::Boolean(on))
        }
        _ if !key.contains('.') => Err(Error::Config(format!("unknown override key `{key}`"))),
        _ => set(table, key, parse_value(raw)),
    }
}

fn set(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
