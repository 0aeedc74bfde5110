//! Per-cloud precomputation of everything that depends only on point
//! positions and colors: sampling hierarchy, neighbor tables, relative
//! positions, interpolation weights and the boundary network's input.
//! Built once per cloud and reused across epochs.

use ndarray::{concatenate, Array2, Axis};

use super::ArchConfig;
use crate::boundary::neighbor_feature_variance;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::knn::{knn_index_points, knn_query, relative_positions_points, NeighborhoodIndex, RelativePositions};
use crate::sampling::{canonical_start, fps_points};

/// Interpolation weights below this distance snap to the coincident point.
const COINCIDENT: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct EncoderGeometry {
    /// Indices (into the finer level) of the points kept by this layer.
    pub sample: Vec<usize>,
    /// Aggregation neighborhoods, one row per kept point.
    pub agg_idx: NeighborhoodIndex,
    pub agg_rel: RelativePositions,
    /// Directions for the geometric convolution, one row per finer point.
    pub gco_rel: Option<RelativePositions>,
}

#[derive(Clone, Debug)]
pub struct DecoderGeometry {
    /// Per fine point: up to 3 coarse sources and their normalized weights.
    pub interp_idx: NeighborhoodIndex,
    pub interp_weights: Vec<f64>,
    pub agg_idx: NeighborhoodIndex,
    pub agg_rel: RelativePositions,
}

#[derive(Clone, Debug)]
pub struct Geometry {
    /// Positions per resolution level, level 0 being the input cloud.
    pub levels: Vec<Array2<f64>>,
    /// For each level, the level-0 index of every point.
    pub level_points: Vec<Vec<usize>>,
    pub encoder: Vec<EncoderGeometry>,
    pub decoder: Vec<DecoderGeometry>,
    /// Boundary network input: neighbor color variance at level 0.
    pub bpm_input: Array2<f64>,
    /// Level-0 neighborhood used for the boundary network.
    pub bpm_idx: NeighborhoodIndex,
    /// Network input features `[r g b x y z]`.
    pub input: Array2<f64>,
}

impl Geometry {
    pub fn build(cloud: &PointCloud, arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let depth = arch.encoder.len();
        let mut levels = vec![cloud.positions().clone()];
        let mut level_points: Vec<Vec<usize>> = vec![(0..cloud.len()).collect()];
        let mut samples = Vec::with_capacity(depth);
        for (l, layer) in arch.encoder.iter().enumerate() {
            let fine = &levels[l];
            let n = fine.nrows();
            let keep = n.div_ceil(layer.stride);
            let start = canonical_start(fine.view());
            let sample = fps_points(fine.view(), keep, start)
                .map_err(|e| e.in_layer(format!("encoder {l}")))?
                .indices;
            let coarse = fine.select(Axis(0), &sample);
            let mapped = sample.iter().map(|&i| level_points[l][i]).collect();
            levels.push(coarse);
            level_points.push(mapped);
            samples.push(sample);
        }

        // widest neighbor table needed on each level
        let mut need = vec![0usize; depth + 1];
        need[0] = arch.bpm_k;
        for (l, layer) in arch.encoder.iter().enumerate() {
            need[l] = need[l].max((layer.k - 1).max(1));
            if layer.use_gco {
                need[l] = need[l].max(arch.gco_m);
            }
        }
        for (d, layer) in arch.decoder.iter().enumerate() {
            let level = depth - 1 - d;
            need[level] = need[level].max((layer.k - 1).max(1));
        }
        let mut tables = Vec::with_capacity(depth + 1);
        for (l, positions) in levels.iter().enumerate() {
            if need[l] == 0 {
                tables.push(None);
                continue;
            }
            let n = positions.nrows();
            if need[l] >= n {
                return Err(Error::Config(format!(
                    "level {l} has {n} points but needs {} neighbors per point",
                    need[l]
                )));
            }
            let idx = knn_index_points(positions.view(), need[l])?;
            let rel = relative_positions_points(positions.view(), &idx)?;
            tables.push(Some((idx, rel)));
        }
        let table = |l: usize| tables[l].as_ref().expect("table built for every used level");

        let mut encoder = Vec::with_capacity(depth);
        for (l, layer) in arch.encoder.iter().enumerate() {
            let (idx, rel) = table(l);
            let agg_idx = idx.with_self(layer.k)?.select_rows(&samples[l])?;
            let agg_rel = select_rel_rows(&rel.with_self(layer.k)?, &samples[l]);
            let gco_rel = if layer.use_gco {
                Some(rel.truncated(arch.gco_m)?)
            } else {
                None
            };
            encoder.push(EncoderGeometry {
                sample: samples[l].clone(),
                agg_idx,
                agg_rel,
                gco_rel,
            });
        }

        let mut decoder = Vec::with_capacity(depth);
        for (d, layer) in arch.decoder.iter().enumerate() {
            let coarse_level = depth - d;
            let fine_level = coarse_level - 1;
            let coarse = &levels[coarse_level];
            let fine = &levels[fine_level];
            let kk = 3.min(coarse.nrows());
            let interp_idx = knn_query(coarse.view(), fine.view(), kk)?;
            let mut interp_weights = Vec::with_capacity(fine.nrows() * kk);
            for r in 0..fine.nrows() {
                interp_weights.extend(idw_weights(interp_idx.distances(r)));
            }
            let (idx, rel) = table(fine_level);
            decoder.push(DecoderGeometry {
                interp_idx,
                interp_weights,
                agg_idx: idx.with_self(layer.k)?,
                agg_rel: rel.with_self(layer.k)?,
            });
        }

        let (bpm_table, _) = table(0);
        let bpm_idx = bpm_table.truncated(arch.bpm_k)?;
        let bpm_input = neighbor_feature_variance(cloud.colors(), &bpm_idx)?;
        let input = concatenate(Axis(1), &[cloud.colors().view(), cloud.positions().view()]).expect("equal row counts");
        Ok(Self {
            levels,
            level_points,
            encoder,
            decoder,
            bpm_input,
            bpm_idx,
            input,
        })
    }

    pub fn num_points(&self) -> usize {
        self.levels[0].nrows()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.levels[level].nrows()
    }

    /// Gather level-0 values onto `level`.
    pub fn gather(&self, level: usize, values: &[f64]) -> Vec<f64> {
        self.level_points[level].iter().map(|&i| values[i]).collect()
    }
}

/// Inverse-distance weights normalized to one. A coincident source takes
/// all the weight.
pub fn idw_weights(distances: &[f64]) -> Vec<f64> {
    if let Some(hit) = distances.iter().position(|&d| d <= COINCIDENT) {
        return (0..distances.len()).map(|t| if t == hit { 1.0 } else { 0.0 }).collect();
    }
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|w| w / total).collect()
}

pub(crate) fn select_rel_rows(rel: &RelativePositions, rows: &[usize]) -> RelativePositions {
    let selected: Vec<Vec<[f64; 3]>> = rows.iter().map(|&r| rel.offsets(r).to_vec()).collect();
    RelativePositions::from_offsets(&selected).expect("rows share k")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idw_single_and_coincident() {
        assert_eq!(idw_weights(&[2.0]), vec![1.0]);
        assert_eq!(idw_weights(&[0.0, 1.0, 2.0]), vec![1.0, 0.0, 0.0]);
        let w = idw_weights(&[1.0, 2.0, 4.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w[0] > w[1] && w[1] > w[2]);
    }
}
