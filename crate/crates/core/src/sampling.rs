//! Greedy farthest-point sampling.

use ndarray::ArrayView2;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Selected indices in greedy order, plus the max-min distance at which each
/// was picked (`+inf` for the start point).
#[derive(Clone, Debug, PartialEq)]
pub struct FpsResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

pub fn farthest_point_sampling(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    Ok(fps_points(cloud.positions().view(), m, start)?.indices)
}

/// Greedy max-min selection over raw coordinates. Ties go to the lower index.
pub fn fps_points(positions: ArrayView2<'_, f64>, m: usize, start: usize) -> Result<FpsResult> {
    let n = positions.nrows();
    if m == 0 || m > n {
        return Err(Error::Argument(format!("sample size {m} must be in 1..={n}")));
    }
    if start >= n {
        return Err(Error::Range(format!("start index {start} out of range for {n} points")));
    }
    let pts: Vec<[f64; 3]> = positions.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
    let mut min_sq = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(m);
    let mut distances = Vec::with_capacity(m);
    let mut current = start;
    let mut current_d = f64::INFINITY;
    loop {
        indices.push(current);
        distances.push(current_d);
        min_sq[current] = f64::NEG_INFINITY;
        if indices.len() == m {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (j, p) in pts.iter().enumerate() {
            if min_sq[j] == f64::NEG_INFINITY {
                continue;
            }
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let dz = p[2] - c[2];
            let d = dx * dx + dy * dy + dz * dz;
            if d < min_sq[j] {
                min_sq[j] = d;
            }
            if min_sq[j] > best_d {
                best_d = min_sq[j];
                best = j;
            }
        }
        current = best;
        current_d = best_d.sqrt();
    }
    Ok(FpsResult { indices, distances })
}

/// Start index that does not depend on point order: the lexicographically
/// smallest coordinate triple (lowest index among exact duplicates).
pub fn canonical_start(positions: ArrayView2<'_, f64>) -> usize {
    let mut best = 0;
    for i in 1..positions.nrows() {
        let a = positions.row(i);
        let b = positions.row(best);
        let ord = a[0]
            .total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]));
        if ord.is_lt() {
            best = i;
        }
    }
    best
}
