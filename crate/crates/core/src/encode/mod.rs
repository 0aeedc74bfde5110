//! Boundary-aware geometric encoding: aggregation rules, encoder and
//! decoder layers, and the full segmentation network.

mod aggregation;
mod geometry;
mod network;

pub use aggregation::{
    augmented_aggregation, global_aggregation, masked_local_aggregation, AggregationCache, AggregationMode, Aggregator,
    FeatureNet, WeightNet,
};
pub use geometry::{idw_weights, DecoderGeometry, EncoderGeometry, Geometry};
pub use network::{
    decoder_layer, encoder_layer, network_forward, DecoderLayer, EncoderLayer, EncoderState, ForwardCache,
    ForwardOptions, KinkMargins, LayerProbe, MaskOverride, Network, NetworkOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of input channels: color (3) and coordinates (3).
pub const INPUT_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerRole {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub role: LayerRole,
    #[serde(default)]
    pub mode: AggregationMode,
    #[serde(default)]
    pub use_gco: bool,
    /// Aggregation neighbors per point.
    pub k: usize,
    /// Encoder only: keep `ceil(n / stride)` points. Decoders use 1.
    #[serde(default = "one")]
    pub stride: usize,
    /// Width of the feature net output.
    pub feature_channels: usize,
    pub out_channels: usize,
}

fn one() -> usize {
    1
}

fn default_bpm_input_scale() -> f64 {
    100.0
}

impl LayerConfig {
    pub fn boundary_masked(&self) -> bool {
        self.mode.uses_boundary()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub num_classes: usize,
    pub bpm_k: usize,
    pub bpm_hidden: Vec<usize>,
    /// Multiplier applied to the color variance fed to the boundary network.
    #[serde(default = "default_bpm_input_scale")]
    pub bpm_input_scale: f64,
    /// Vectors per geometric kernel.
    pub gco_m: usize,
    /// Geometric kernels (output channels) per encoder layer.
    pub gco_channels: usize,
    pub weight_hidden: usize,
    pub mid_channels: usize,
    pub head_hidden: usize,
    /// Boundary-using layers must see at least this many points.
    pub mask_min_points: usize,
    pub init_seed: u64,
    pub encoder: Vec<LayerConfig>,
    pub decoder: Vec<LayerConfig>,
}

impl ArchConfig {
    /// Four encoder layers (each keeping a quarter of the points) mirrored by
    /// four decoder layers. Masking in the first two encoder layers and the
    /// last two decoder layers, geometric convolution in every encoder layer.
    pub fn full(num_classes: usize) -> Self {
        let enc_feat = [16, 32, 48, 64];
        let enc_out = [32, 48, 64, 96];
        let dec_feat = [64, 48, 32, 32];
        let dec_out = [64, 48, 32, 32];
        let encoder = (0..4)
            .map(|l| LayerConfig {
                role: LayerRole::Encoder,
                mode: if l < 2 {
                    AggregationMode::Masked
                } else {
                    AggregationMode::Global
                },
                use_gco: true,
                k: 16,
                stride: 4,
                feature_channels: enc_feat[l],
                out_channels: enc_out[l],
            })
            .collect();
        let decoder = (0..4)
            .map(|d| LayerConfig {
                role: LayerRole::Decoder,
                mode: if d >= 2 {
                    AggregationMode::Masked
                } else {
                    AggregationMode::Global
                },
                use_gco: false,
                k: 16,
                stride: 1,
                feature_channels: dec_feat[d],
                out_channels: dec_out[d],
            })
            .collect();
        Self {
            num_classes,
            bpm_k: 32,
            bpm_hidden: vec![32, 32],
            bpm_input_scale: default_bpm_input_scale(),
            gco_m: 3,
            gco_channels: 8,
            weight_hidden: 16,
            mid_channels: 8,
            head_hidden: 64,
            mask_min_points: 128,
            init_seed: 0,
            encoder,
            decoder,
        }
    }

    /// Two encoder and two decoder layers with narrow widths, small enough
    /// for finite-difference checks on a few dozen points.
    pub fn tiny(num_classes: usize) -> Self {
        let mut arch = Self::full(num_classes);
        arch.encoder.truncate(2);
        arch.decoder.drain(..2);
        for layer in arch.encoder.iter_mut().chain(arch.decoder.iter_mut()) {
            layer.k = 8;
            layer.feature_channels = 6;
            layer.out_channels = 10;
        }
        arch.bpm_k = 12;
        arch.bpm_hidden = vec![8];
        arch.gco_channels = 3;
        arch.weight_hidden = 6;
        arch.mid_channels = 4;
        arch.head_hidden = 8;
        arch.mask_min_points = 16;
        arch.init_seed = 5;
        arch
    }

    /// Same layout with no boundary masking and no geometric convolution.
    pub fn baseline(num_classes: usize) -> Self {
        let mut arch = Self::full(num_classes);
        arch.strip_boundary();
        arch.strip_gco();
        arch
    }

    pub fn strip_boundary(&mut self) {
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            layer.mode = AggregationMode::Global;
        }
    }

    pub fn strip_gco(&mut self) {
        for layer in &mut self.encoder {
            layer.use_gco = false;
        }
    }

    /// Set `mode` on the default boundary layers (first two encoder layers,
    /// last two decoder layers), global elsewhere.
    pub fn set_boundary_layers(&mut self, mode: AggregationMode) {
        let enc = self.encoder.len();
        let dec = self.decoder.len();
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            layer.mode = if l < enc.min(2) { mode } else { AggregationMode::Global };
        }
        for (d, layer) in self.decoder.iter_mut().enumerate() {
            layer.mode = if d + 2 >= dec { mode } else { AggregationMode::Global };
        }
    }

    pub fn uses_boundary(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .any(LayerConfig::boundary_masked)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.encoder.is_empty() {
            return bad("at least one encoder layer is required".into());
        }
        if self.encoder.len() != self.decoder.len() {
            return bad(format!(
                "{} encoder layers but {} decoder layers; the stacks must mirror",
                self.encoder.len(),
                self.decoder.len()
            ));
        }
        if self.bpm_k == 0 || self.gco_m == 0 || self.gco_channels == 0 {
            return bad("bpm_k, gco_m and gco_channels must be at least 1".into());
        }
        if !(self.bpm_input_scale > 0.0 && self.bpm_input_scale.is_finite()) {
            return bad(format!(
                "bpm_input_scale must be positive, got {}",
                self.bpm_input_scale
            ));
        }
        if self.bpm_hidden.contains(&0) || self.weight_hidden == 0 || self.mid_channels == 0 || self.head_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        for (l, layer) in self.encoder.iter().enumerate() {
            if layer.role != LayerRole::Encoder {
                return bad(format!("encoder layer {l} is declared as {:?}", layer.role));
            }
            if layer.stride == 0 {
                return bad(format!("encoder layer {l} has stride 0"));
            }
        }
        for (d, layer) in self.decoder.iter().enumerate() {
            if layer.role != LayerRole::Decoder {
                return bad(format!("decoder layer {d} is declared as {:?}", layer.role));
            }
            if layer.use_gco {
                return bad(format!(
                    "decoder layer {d} enables geometric convolution; only encoders may"
                ));
            }
            if layer.stride != 1 {
                return bad(format!(
                    "decoder layer {d} has stride {}; decoders do not resample",
                    layer.stride
                ));
            }
        }
        for (i, layer) in self.encoder.iter().chain(&self.decoder).enumerate() {
            if layer.k == 0 || layer.feature_channels == 0 || layer.out_channels == 0 {
                return bad(format!("layer {i} has a zero width or neighbor count"));
            }
        }
        Ok(())
    }
}
