//! Encoder-decoder segmentation network with a boundary prediction branch.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aggregation::{concat_columns, AggregationCache, AggregationMode, Aggregator};
use super::geometry::{idw_weights, select_rel_rows, DecoderGeometry, EncoderGeometry, Geometry};
use super::{ArchConfig, LayerConfig, INPUT_CHANNELS};
use crate::boundary::{BpmCache, BpmParams};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geoconv::{gco_backward, gco_forward, kernel_init, KernelBank, MappingChoice};
use crate::knn::{knn_index_points, knn_query, relative_positions_points, NeighborhoodIndex, RelativePositions};
use crate::nn::{join, Activation, Mlp, MlpCache, Param, Parameterized};
use crate::sampling::{canonical_start, fps_points};

/// How boundary-using layers treat the mask at run time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskOverride {
    #[default]
    AsConfigured,
    /// Every boundary-using layer aggregates globally (all scores 1).
    Off,
    /// Boundary-using layers use masked aggregation.
    On,
    /// Boundary-using layers use boundary-augmented aggregation.
    Augmented,
}

impl MaskOverride {
    fn apply(self, configured: AggregationMode) -> AggregationMode {
        if !configured.uses_boundary() {
            return AggregationMode::Global;
        }
        match self {
            MaskOverride::AsConfigured => configured,
            MaskOverride::Off => AggregationMode::Global,
            MaskOverride::On => AggregationMode::Masked,
            MaskOverride::Augmented => AggregationMode::Augmented,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub mask: MaskOverride,
    /// Level-0 scores to mask with instead of the boundary network output.
    pub mask_values: Option<Vec<f64>>,
    /// Replace every geometric-convolution output by zeros.
    pub zero_gco: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub config: LayerConfig,
    pub kernels: Option<KernelBank>,
    pub agg: Aggregator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub config: LayerConfig,
    pub agg: Aggregator,
}

/// All learnable state of the segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: ArchConfig,
    pub bpm: BpmParams,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head: Mlp,
}

#[derive(Clone, Debug)]
struct EncoderCache {
    input: Array2<f64>,
    prev_width: usize,
    gco: Option<MappingChoice>,
    agg: AggregationCache,
}

#[derive(Clone, Debug)]
struct DecoderCache {
    input: Array2<f64>,
    coarse_width: usize,
    agg: AggregationCache,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    bpm: BpmCache,
    encoder: Vec<EncoderCache>,
    decoder: Vec<DecoderCache>,
    head: MlpCache,
    zero_gco: bool,
}

pub struct NetworkOutput {
    /// `n x C` class scores.
    pub logits: Array2<f64>,
    /// Boundary network output (level 0).
    pub scores: Vec<f64>,
    pub cache: ForwardCache,
}

/// Positions, features and level-0-aligned scores at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub positions: Array2<f64>,
    pub features: Array2<f64>,
    pub scores: Vec<f64>,
}

impl Network {
    pub fn new(arch: ArchConfig, w1: f64, w2: f64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.init_seed);
        let mut bpm_widths = vec![3];
        bpm_widths.extend(&arch.bpm_hidden);
        bpm_widths.push(1);
        let mut bpm = BpmParams::new(&bpm_widths, w1, w2, &mut rng)?;
        bpm.input_scale = arch.bpm_input_scale;

        let mut widths = vec![INPUT_CHANNELS];
        let mut encoder = Vec::with_capacity(arch.encoder.len());
        for (l, cfg) in arch.encoder.iter().enumerate() {
            let prev = *widths.last().unwrap();
            let (kernels, input) = if cfg.use_gco {
                let seed = arch.init_seed.wrapping_mul(0x9e37_79b9).wrapping_add(l as u64 + 1);
                (
                    Some(kernel_init(arch.gco_m, arch.gco_channels, seed)?),
                    prev + arch.gco_channels,
                )
            } else {
                (None, prev)
            };
            let agg = Aggregator::new(
                input,
                cfg.feature_channels,
                arch.mid_channels,
                arch.weight_hidden,
                cfg.out_channels,
                &mut rng,
            );
            let agg = sum_scaled(agg, cfg.k);
            widths.push(cfg.out_channels);
            encoder.push(EncoderLayer {
                config: cfg.clone(),
                kernels,
                agg,
            });
        }
        let depth = arch.encoder.len();
        let mut current = widths[depth];
        let mut decoder = Vec::with_capacity(depth);
        for (d, cfg) in arch.decoder.iter().enumerate() {
            let skip = widths[depth - 1 - d];
            let agg = Aggregator::new(
                current + skip,
                cfg.feature_channels,
                arch.mid_channels,
                arch.weight_hidden,
                cfg.out_channels,
                &mut rng,
            );
            let agg = sum_scaled(agg, cfg.k);
            current = cfg.out_channels;
            decoder.push(DecoderLayer {
                config: cfg.clone(),
                agg,
            });
        }
        let head = Mlp::new(
            &[current, arch.head_hidden, arch.num_classes],
            Activation::Identity,
            &mut rng,
        );
        Ok(Self {
            arch,
            bpm,
            encoder,
            decoder,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn check_mask_size(&self, layer: &str, points: usize) -> Result<()> {
        if points < self.arch.mask_min_points {
            return Err(Error::Config(format!(
                "{layer} uses boundary masking on {points} points, below the minimum of {}",
                self.arch.mask_min_points
            )));
        }
        Ok(())
    }

    pub fn forward(&self, geom: &Geometry, opts: &ForwardOptions) -> Result<NetworkOutput> {
        if geom.encoder.len() != self.encoder.len() || geom.decoder.len() != self.decoder.len() {
            return Err(Error::Shape("geometry was built for a different architecture".into()));
        }
        let (scores, bpm_cache) = self.bpm.forward(&geom.bpm_input).map_err(|e| e.in_layer("bpm"))?;
        let mask_base = match &opts.mask_values {
            Some(v) if v.len() != geom.num_points() => {
                return Err(Error::Shape(format!(
                    "{} mask values for {} points",
                    v.len(),
                    geom.num_points()
                )))
            }
            Some(v) => v.clone(),
            None => scores.clone(),
        };

        let depth = self.encoder.len();
        let mut features = vec![geom.input.clone()];
        let mut enc_caches = Vec::with_capacity(depth);
        for (l, layer) in self.encoder.iter().enumerate() {
            let name = format!("encoder {l}");
            let mode = opts.mask.apply(layer.config.mode);
            if mode.uses_boundary() {
                self.check_mask_size(&name, geom.level_size(l))?;
            }
            let level_scores = geom.gather(l, &mask_base);
            let (out, cache) = encoder_step(
                layer,
                &features[l],
                &level_scores,
                mode,
                &geom.encoder[l],
                opts.zero_gco,
            )
            .map_err(|e| e.in_layer(name))?;
            features.push(out);
            enc_caches.push(cache);
        }

        let mut current = features[depth].clone();
        let mut dec_caches = Vec::with_capacity(depth);
        for (d, layer) in self.decoder.iter().enumerate() {
            let name = format!("decoder {d}");
            let fine_level = depth - 1 - d;
            let mode = opts.mask.apply(layer.config.mode);
            if mode.uses_boundary() {
                self.check_mask_size(&name, geom.level_size(fine_level))?;
            }
            let level_scores = geom.gather(fine_level, &mask_base);
            let (out, cache) = decoder_step(
                layer,
                &current,
                &features[fine_level],
                &level_scores,
                mode,
                &geom.decoder[d],
            )
            .map_err(|e| e.in_layer(name))?;
            current = out;
            dec_caches.push(cache);
        }
        let (logits, head) = self.head.forward(&current);
        Ok(NetworkOutput {
            logits,
            scores,
            cache: ForwardCache {
                bpm: bpm_cache,
                encoder: enc_caches,
                decoder: dec_caches,
                head,
                zero_gco: opts.zero_gco,
            },
        })
    }

    /// Accumulate parameter gradients given `d loss / d logits` and, when the
    /// boundary loss is active, `d loss / d scores`.
    pub fn backward(
        &mut self,
        geom: &Geometry,
        cache: &ForwardCache,
        dlogits: &Array2<f64>,
        dscores: Option<&[f64]>,
    ) -> Result<()> {
        let depth = self.encoder.len();
        let mut dcurrent = self.head.backward(&cache.head, dlogits);
        let mut dfeatures: Vec<Option<Array2<f64>>> = vec![None; depth + 1];
        for d in (0..depth).rev() {
            let fine_level = depth - 1 - d;
            let layer = &mut self.decoder[d];
            let c = &cache.decoder[d];
            let dinput = layer
                .agg
                .backward(&c.agg, &dcurrent)
                .map_err(|e| e.in_layer(format!("decoder {d}")))?;
            let dinterp = dinput.slice(s![.., ..c.coarse_width]).to_owned();
            let dskip = dinput.slice(s![.., c.coarse_width..]).to_owned();
            add_into(&mut dfeatures[fine_level], dskip);
            let coarse_rows = geom.level_size(fine_level + 1);
            dcurrent = interpolate_backward(&geom.decoder[d], &dinterp, coarse_rows);
        }
        add_into(&mut dfeatures[depth], dcurrent);

        for l in (0..depth).rev() {
            let Some(dout) = dfeatures[l + 1].take() else {
                continue;
            };
            let layer = &mut self.encoder[l];
            let c = &cache.encoder[l];
            let dinput = layer
                .agg
                .backward(&c.agg, &dout)
                .map_err(|e| e.in_layer(format!("encoder {l}")))?;
            if let (Some(bank), Some(choice)) = (layer.kernels.as_mut(), c.gco.as_ref()) {
                if !cache.zero_gco {
                    let dgeo = dinput.slice(s![.., c.prev_width..]).to_owned();
                    let rel = geom.encoder[l].gco_rel.as_ref().expect("gco geometry");
                    let grad = gco_backward(choice, rel, &dgeo)?;
                    bank.accumulate(&grad);
                }
            }
            if l > 0 {
                let dprev = dinput.slice(s![.., ..c.prev_width]).to_owned();
                add_into(&mut dfeatures[l], dprev);
            }
        }

        if let Some(ds) = dscores {
            self.bpm.backward(&cache.bpm, ds).map_err(|e| e.in_layer("bpm"))?;
        }
        Ok(())
    }

    /// Inputs and coefficients of every layer that ran with a boundary mask,
    /// for checking what the mask blocks.
    pub fn masked_layer_probes<'a>(&'a self, geom: &'a Geometry, cache: &ForwardCache) -> Vec<LayerProbe<'a>> {
        let mut probes = Vec::new();
        for (l, (layer, c)) in self.encoder.iter().zip(&cache.encoder).enumerate() {
            if let Some(coeff) = c.agg.coefficients() {
                probes.push(LayerProbe {
                    name: format!("encoder {l}"),
                    agg: &layer.agg,
                    idx: &geom.encoder[l].agg_idx,
                    rel: &geom.encoder[l].agg_rel,
                    input: c.input.clone(),
                    coefficients: coeff.to_vec(),
                });
            }
        }
        for (d, (layer, c)) in self.decoder.iter().zip(&cache.decoder).enumerate() {
            if let Some(coeff) = c.agg.coefficients() {
                probes.push(LayerProbe {
                    name: format!("decoder {d}"),
                    agg: &layer.agg,
                    idx: &geom.decoder[d].agg_idx,
                    rel: &geom.decoder[d].agg_rel,
                    input: c.input.clone(),
                    coefficients: coeff.to_vec(),
                });
            }
        }
        probes
    }

    /// Every piecewise choice made in a cached pass: ReLU states and kernel
    /// assignments. Two passes with equal patterns lie on the same smooth
    /// piece of the network.
    pub fn activation_pattern(&self, cache: &ForwardCache) -> Vec<u32> {
        let mut out = Vec::new();
        self.bpm.relu_pattern(&cache.bpm, &mut out);
        for (layer, c) in self.encoder.iter().zip(&cache.encoder) {
            if let Some(choice) = &c.gco {
                choice.pattern(&mut out);
            }
            layer.agg.relu_pattern(&c.agg, &mut out);
        }
        for (layer, c) in self.decoder.iter().zip(&cache.decoder) {
            layer.agg.relu_pattern(&c.agg, &mut out);
        }
        self.head.relu_pattern(&cache.head, &mut out);
        out
    }

    /// Smallest distance to a non-differentiable point in a cached pass:
    /// ReLU kinks in every block and assignment ties in geometric kernels.
    pub fn kink_margin(&self, cache: &ForwardCache) -> KinkMargins {
        let mut smooth = self.head.kink_margin(&cache.head);
        for (layer, c) in self.encoder.iter().zip(&cache.encoder) {
            smooth = smooth.min(layer.agg.kink_margin(&c.agg));
        }
        for (layer, c) in self.decoder.iter().zip(&cache.decoder) {
            smooth = smooth.min(layer.agg.kink_margin(&c.agg));
        }
        let gco = cache
            .encoder
            .iter()
            .filter_map(|c| c.gco.as_ref().map(MappingChoice::tie_distance))
            .fold(f64::INFINITY, f64::min);
        KinkMargins { smooth, gco }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinkMargins {
    pub smooth: f64,
    pub gco: f64,
}

/// A boundary-masked layer captured from a forward pass.
pub struct LayerProbe<'a> {
    pub name: String,
    pub agg: &'a Aggregator,
    pub idx: &'a NeighborhoodIndex,
    pub rel: &'a RelativePositions,
    pub input: Array2<f64>,
    pub coefficients: Vec<f64>,
}

impl LayerProbe<'_> {
    pub fn run(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.agg.forward(input, self.idx, self.rel, Some(&self.coefficients))?.0)
    }
}

/// The aggregation sums over `k` neighbors; shrinking the projection's
/// initial weights by `1/k` keeps activations from growing with depth.
fn sum_scaled(mut agg: Aggregator, k: usize) -> Aggregator {
    agg.proj.weight.value /= k as f64;
    agg
}

fn add_into(slot: &mut Option<Array2<f64>>, value: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &value,
        None => *slot = Some(value),
    }
}

fn encoder_step(
    layer: &EncoderLayer,
    features: &Array2<f64>,
    scores: &[f64],
    mode: AggregationMode,
    geom: &EncoderGeometry,
    zero_gco: bool,
) -> Result<(Array2<f64>, EncoderCache)> {
    let prev_width = features.ncols();
    let (input, gco) = match (&layer.kernels, &geom.gco_rel) {
        (Some(bank), Some(rel)) => {
            let (mut response, choice) = gco_forward(rel, bank, Activation::Relu)?;
            if zero_gco {
                response.fill(0.0);
            }
            (concat_columns(features, &response), Some(choice))
        }
        (None, _) => (features.clone(), None),
        (Some(_), None) => return Err(Error::State("geometry lacks convolution directions".into())),
    };
    let coeff = mode.coefficients(scores);
    let (out, agg) = layer
        .agg
        .forward(&input, &geom.agg_idx, &geom.agg_rel, coeff.as_deref())?;
    Ok((
        out,
        EncoderCache {
            input,
            prev_width,
            gco,
            agg,
        },
    ))
}

fn interpolate(geom: &DecoderGeometry, coarse: &Array2<f64>) -> Array2<f64> {
    let k = geom.interp_idx.k();
    let rows = geom.interp_idx.len();
    let mut out = Array2::zeros((rows, coarse.ncols()));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        for (t, &src) in geom.interp_idx.neighbors(r).iter().enumerate() {
            let w = geom.interp_weights[r * k + t];
            if w != 0.0 {
                row.scaled_add(w, &coarse.row(src));
            }
        }
    }
    out
}

fn interpolate_backward(geom: &DecoderGeometry, dfine: &Array2<f64>, coarse_rows: usize) -> Array2<f64> {
    let k = geom.interp_idx.k();
    let mut out = Array2::zeros((coarse_rows, dfine.ncols()));
    for r in 0..geom.interp_idx.len() {
        for (t, &src) in geom.interp_idx.neighbors(r).iter().enumerate() {
            let w = geom.interp_weights[r * k + t];
            if w != 0.0 {
                out.row_mut(src).scaled_add(w, &dfine.row(r));
            }
        }
    }
    out
}

fn decoder_step(
    layer: &DecoderLayer,
    coarse: &Array2<f64>,
    skip: &Array2<f64>,
    scores: &[f64],
    mode: AggregationMode,
    geom: &DecoderGeometry,
) -> Result<(Array2<f64>, DecoderCache)> {
    if geom.interp_idx.num_points() != coarse.nrows() || geom.interp_idx.len() != skip.nrows() {
        return Err(Error::Shape(format!(
            "decoder expects {} coarse and {} skip rows, got {} and {}",
            geom.interp_idx.num_points(),
            geom.interp_idx.len(),
            coarse.nrows(),
            skip.nrows()
        )));
    }
    let interp = interpolate(geom, coarse);
    let input = concat_columns(&interp, skip);
    let coeff = mode.coefficients(scores);
    let (out, agg) = layer
        .agg
        .forward(&input, &geom.agg_idx, &geom.agg_rel, coeff.as_deref())?;
    Ok((
        out,
        DecoderCache {
            input,
            coarse_width: coarse.ncols(),
            agg,
        },
    ))
}

/// One encoder layer on an explicit state: optional geometric convolution,
/// aggregation under the layer's mode, then farthest-point downsampling of
/// points, features and scores.
pub fn encoder_layer(layer: &EncoderLayer, state: &EncoderState, gco_m: usize) -> Result<EncoderState> {
    let n = state.positions.nrows();
    if state.features.nrows() != n || state.scores.len() != n {
        return Err(Error::Shape("state arrays disagree on the point count".into()));
    }
    let cfg = &layer.config;
    let keep = n.div_ceil(cfg.stride.max(1));
    let sample = fps_points(state.positions.view(), keep, canonical_start(state.positions.view()))?.indices;
    let need = if layer.kernels.is_some() {
        (cfg.k - 1).max(gco_m)
    } else {
        cfg.k - 1
    };
    let idx = knn_index_points(state.positions.view(), need.max(1))?;
    let rel = relative_positions_points(state.positions.view(), &idx)?;
    let agg_idx = idx.with_self(cfg.k)?.select_rows(&sample)?;
    let agg_rel = select_rel_rows(&rel.with_self(cfg.k)?, &sample);
    let geom = EncoderGeometry {
        sample: sample.clone(),
        agg_idx,
        agg_rel,
        gco_rel: if layer.kernels.is_some() {
            Some(rel.truncated(gco_m)?)
        } else {
            None
        },
    };
    let (features, _) = encoder_step(layer, &state.features, &state.scores, cfg.mode, &geom, false)?;
    Ok(EncoderState {
        positions: state.positions.select(ndarray::Axis(0), &sample),
        features,
        scores: sample.iter().map(|&i| state.scores[i]).collect(),
    })
}

/// One decoder layer: inverse-distance interpolation of the coarse features
/// onto the skip points (3 nearest coarse points), concatenation with the
/// skip features, then aggregation under the layer's mode.
pub fn decoder_layer(layer: &DecoderLayer, coarse: &EncoderState, skip: &EncoderState) -> Result<EncoderState> {
    if coarse.positions.nrows() > skip.positions.nrows() {
        return Err(Error::Shape(format!(
            "coarse state has {} points, more than the {} skip points",
            coarse.positions.nrows(),
            skip.positions.nrows()
        )));
    }
    let kk = 3.min(coarse.positions.nrows());
    let interp_idx = knn_query(coarse.positions.view(), skip.positions.view(), kk)?;
    let mut interp_weights = Vec::new();
    for r in 0..interp_idx.len() {
        interp_weights.extend(idw_weights(interp_idx.distances(r)));
    }
    let idx = knn_index_points(skip.positions.view(), (layer.config.k - 1).max(1))?;
    let rel = relative_positions_points(skip.positions.view(), &idx)?;
    let agg_idx = idx.with_self(layer.config.k)?;
    let agg_rel = rel.with_self(layer.config.k)?;
    let geom = DecoderGeometry {
        interp_idx,
        interp_weights,
        agg_idx,
        agg_rel,
    };
    let (features, _) = decoder_step(
        layer,
        &coarse.features,
        &skip.features,
        &skip.scores,
        layer.config.mode,
        &geom,
    )?;
    Ok(EncoderState {
        positions: skip.positions.clone(),
        features,
        scores: skip.scores.clone(),
    })
}

/// Class logits and boundary scores for one cloud.
pub fn network_forward(cloud: &PointCloud, net: &Network) -> Result<(Array2<f64>, Vec<f64>)> {
    let geom = Geometry::build(cloud, &net.arch)?;
    let out = net.forward(&geom, &ForwardOptions::default())?;
    Ok((out.logits, out.scores))
}

impl Parameterized for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(k) = &self.kernels {
            k.visit(&join(prefix, "gco"), f);
        }
        self.agg.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(k) = &mut self.kernels {
            k.visit_mut(&join(prefix, "gco"), f);
        }
        self.agg.visit_mut(prefix, f);
    }
}

impl Parameterized for Network {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.bpm.visit(&join(prefix, "bpm"), f);
        for (l, layer) in self.encoder.iter().enumerate() {
            layer.visit(&join(prefix, &format!("encoder.{l}")), f);
        }
        for (d, layer) in self.decoder.iter().enumerate() {
            layer.agg.visit(&join(prefix, &format!("decoder.{d}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.bpm.visit_mut(&join(prefix, "bpm"), f);
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("encoder.{l}")), f);
        }
        for (d, layer) in self.decoder.iter_mut().enumerate() {
            layer.agg.visit_mut(&join(prefix, &format!("decoder.{d}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
