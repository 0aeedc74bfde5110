//! Exact k-nearest-neighbor search and relative-position tables.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Per-query neighbor lists sorted by ascending distance, ties broken by
/// lower point index. Searches never list the query point itself;
/// [`NeighborhoodIndex::with_self`] builds self-inclusive groups.
///
/// Rows normally cover every point in order (`queries[r] == r`); a row subset
/// produced by [`NeighborhoodIndex::select_rows`] keeps track of the original
/// query index of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodIndex {
    k: usize,
    num_points: usize,
    queries: Vec<usize>,
    neighbors: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborhoodIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of rows (query points).
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Size of the point set the neighbor indices refer to.
    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.neighbors[row * self.k..(row + 1) * self.k]
    }

    pub fn distances(&self, row: usize) -> &[f64] {
        &self.distances[row * self.k..(row + 1) * self.k]
    }

    /// Keep only the first `k` neighbors of every row.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::Argument(format!(
                "cannot truncate a {}-neighbor index to {k}",
                self.k
            )));
        }
        let mut neighbors = Vec::with_capacity(self.len() * k);
        let mut distances = Vec::with_capacity(self.len() * k);
        for r in 0..self.len() {
            neighbors.extend_from_slice(&self.neighbors(r)[..k]);
            distances.extend_from_slice(&self.distances(r)[..k]);
        }
        Ok(Self {
            k,
            num_points: self.num_points,
            queries: self.queries.clone(),
            neighbors,
            distances,
        })
    }

    /// Groups of `k` made of the query point followed by its `k - 1`
    /// nearest neighbors.
    pub fn with_self(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k + 1 {
            return Err(Error::Argument(format!(
                "cannot build {k}-point groups from a {}-neighbor index",
                self.k
            )));
        }
        let mut neighbors = Vec::with_capacity(self.len() * k);
        let mut distances = Vec::with_capacity(self.len() * k);
        for r in 0..self.len() {
            neighbors.push(self.queries[r]);
            distances.push(0.0);
            neighbors.extend_from_slice(&self.neighbors(r)[..k - 1]);
            distances.extend_from_slice(&self.distances(r)[..k - 1]);
        }
        Ok(Self {
            k,
            num_points: self.num_points,
            queries: self.queries.clone(),
            neighbors,
            distances,
        })
    }

    /// Rows for the given positions in this index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::Range(format!("row {bad} out of range for {} rows", self.len())));
        }
        let mut neighbors = Vec::with_capacity(rows.len() * self.k);
        let mut distances = Vec::with_capacity(rows.len() * self.k);
        for &r in rows {
            neighbors.extend_from_slice(self.neighbors(r));
            distances.extend_from_slice(self.distances(r));
        }
        Ok(Self {
            k: self.k,
            num_points: self.num_points,
            queries: rows.iter().map(|&r| self.queries[r]).collect(),
            neighbors,
            distances,
        })
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn rows3(points: ArrayView2<'_, f64>) -> Vec<[f64; 3]> {
    points.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

/// k smallest (squared distance, index) pairs among `candidates`, with the
/// candidates scanned in ascending index order so equal distances keep the
/// lower index first.
fn select_k(query: &[f64; 3], points: &[[f64; 3]], k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, p) in points.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        let d = sq_dist(query, p);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, j));
        if best.len() > k {
            best.pop();
        }
    }
    best
}

/// Exact k nearest neighbors of every point, self excluded.
pub fn knn_index(cloud: &PointCloud, k: usize) -> Result<NeighborhoodIndex> {
    knn_index_points(cloud.positions().view(), k)
}

/// [`knn_index`] on a raw `n x 3` coordinate array.
pub fn knn_index_points(positions: ArrayView2<'_, f64>, k: usize) -> Result<NeighborhoodIndex> {
    let n = positions.nrows();
    if k == 0 || k >= n {
        return Err(Error::Argument(format!(
            "k must satisfy 1 <= k <= n-1 (k = {k}, n = {n})"
        )));
    }
    let pts = rows3(positions);
    let rows: Vec<Vec<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| select_k(&pts[i], &pts, k, Some(i)))
        .collect();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for row in rows {
        for (d, j) in row {
            neighbors.push(j);
            distances.push(d.sqrt());
        }
    }
    Ok(NeighborhoodIndex {
        k,
        num_points: n,
        queries: (0..n).collect(),
        neighbors,
        distances,
    })
}

/// k nearest `source` points for each row of `queries`. Nothing is excluded,
/// so a query coinciding with a source point finds it at distance zero.
pub fn knn_query(source: ArrayView2<'_, f64>, queries: ArrayView2<'_, f64>, k: usize) -> Result<NeighborhoodIndex> {
    let n = source.nrows();
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "k must satisfy 1 <= k <= {n} source points (k = {k})"
        )));
    }
    let src = rows3(source);
    let qs = rows3(queries);
    let rows: Vec<Vec<(f64, usize)>> = qs.par_iter().map(|q| select_k(q, &src, k, None)).collect();
    let mut neighbors = Vec::with_capacity(qs.len() * k);
    let mut distances = Vec::with_capacity(qs.len() * k);
    for row in rows {
        for (d, j) in row {
            neighbors.push(j);
            distances.push(d.sqrt());
        }
    }
    Ok(NeighborhoodIndex {
        k,
        num_points: n,
        queries: (0..qs.len()).collect(),
        neighbors,
        distances,
    })
}

/// Offsets `r_ij = p_j - p_i` for every (row, neighbor) pair together with
/// unit-normalized directions. Zero offsets (duplicate points) are flagged
/// degenerate and get the zero vector as direction.
#[derive(Clone, Debug)]
pub struct RelativePositions {
    k: usize,
    offsets: Vec<[f64; 3]>,
    directions: Vec<[f64; 3]>,
    norms: Vec<f64>,
    degenerate: Vec<bool>,
}

impl RelativePositions {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.norms.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn offsets(&self, row: usize) -> &[[f64; 3]] {
        &self.offsets[row * self.k..(row + 1) * self.k]
    }

    pub fn directions(&self, row: usize) -> &[[f64; 3]] {
        &self.directions[row * self.k..(row + 1) * self.k]
    }

    pub fn norms(&self, row: usize) -> &[f64] {
        &self.norms[row * self.k..(row + 1) * self.k]
    }

    pub fn degenerate(&self, row: usize) -> &[bool] {
        &self.degenerate[row * self.k..(row + 1) * self.k]
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    /// All offsets as a `(rows * k) x 3` matrix, row-major by (row, neighbor).
    pub fn offset_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.offsets.len(), 3));
        for (mut r, o) in out.rows_mut().into_iter().zip(&self.offsets) {
            r[0] = o[0];
            r[1] = o[1];
            r[2] = o[2];
        }
        out
    }

    /// Keep the first `k` neighbors of every row.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::Argument(format!(
                "cannot truncate {}-neighbor offsets to {k}",
                self.k
            )));
        }
        let rows = self.len();
        let pick = |v: &Vec<[f64; 3]>| -> Vec<[f64; 3]> {
            (0..rows)
                .flat_map(|r| v[r * self.k..r * self.k + k].iter().copied())
                .collect()
        };
        Ok(Self {
            k,
            offsets: pick(&self.offsets),
            directions: pick(&self.directions),
            norms: (0..rows)
                .flat_map(|r| self.norms[r * self.k..r * self.k + k].iter().copied())
                .collect(),
            degenerate: (0..rows)
                .flat_map(|r| self.degenerate[r * self.k..r * self.k + k].iter().copied())
                .collect(),
        })
    }

    /// Offsets matching [`NeighborhoodIndex::with_self`]: a zero offset
    /// for the query followed by its first `k - 1` neighbors.
    pub fn with_self(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k + 1 {
            return Err(Error::Argument(format!(
                "cannot build {k}-point groups from {}-neighbor offsets",
                self.k
            )));
        }
        let mut out = Self {
            k,
            offsets: Vec::with_capacity(self.len() * k),
            directions: Vec::with_capacity(self.len() * k),
            norms: Vec::with_capacity(self.len() * k),
            degenerate: Vec::with_capacity(self.len() * k),
        };
        for r in 0..self.len() {
            out.push([0.0; 3]);
            for &o in &self.offsets(r)[..k - 1] {
                out.push(o);
            }
        }
        Ok(out)
    }

    /// Build from explicit direction rows; used for standalone kernel work
    /// where no cloud exists. Each inner slice is one row of `k` offsets.
    pub fn from_offsets(rows: &[Vec<[f64; 3]>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("offset rows must be non-empty and equally long".into()));
        }
        let mut out = Self {
            k,
            offsets: Vec::new(),
            directions: Vec::new(),
            norms: Vec::new(),
            degenerate: Vec::new(),
        };
        for o in rows.iter().flatten() {
            out.push(*o);
        }
        Ok(out)
    }

    fn push(&mut self, o: [f64; 3]) {
        let norm = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
        let (dir, degenerate) = if norm > 0.0 {
            ([o[0] / norm, o[1] / norm, o[2] / norm], false)
        } else {
            ([0.0; 3], true)
        };
        self.offsets.push(o);
        self.directions.push(dir);
        self.norms.push(norm);
        self.degenerate.push(degenerate);
    }
}

/// Relative positions of each row's neighbors with respect to its query
/// point; `idx` must have been built on `cloud`.
pub fn relative_positions(cloud: &PointCloud, idx: &NeighborhoodIndex) -> Result<RelativePositions> {
    relative_positions_points(cloud.positions().view(), idx)
}

/// [`relative_positions`] on a raw coordinate array (query and source set
/// are the same points).
pub fn relative_positions_points(positions: ArrayView2<'_, f64>, idx: &NeighborhoodIndex) -> Result<RelativePositions> {
    relative_positions_between(positions, positions, idx)
}

/// Relative positions where queries and neighbors live in different arrays.
pub fn relative_positions_between(
    query_positions: ArrayView2<'_, f64>,
    source_positions: ArrayView2<'_, f64>,
    idx: &NeighborhoodIndex,
) -> Result<RelativePositions> {
    if idx.num_points() != source_positions.nrows() {
        return Err(Error::Shape(format!(
            "index built over {} points, got {}",
            idx.num_points(),
            source_positions.nrows()
        )));
    }
    if let Some(&q) = idx.queries().iter().find(|&&q| q >= query_positions.nrows()) {
        return Err(Error::Shape(format!("query {q} outside position array")));
    }
    let mut out = RelativePositions {
        k: idx.k(),
        offsets: Vec::with_capacity(idx.len() * idx.k()),
        directions: Vec::with_capacity(idx.len() * idx.k()),
        norms: Vec::with_capacity(idx.len() * idx.k()),
        degenerate: Vec::with_capacity(idx.len() * idx.k()),
    };
    for (row, &q) in idx.queries().iter().enumerate() {
        let pi = query_positions.row(q);
        for &j in idx.neighbors(row) {
            let pj = source_positions.row(j);
            out.push([pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]]);
        }
    }
    Ok(out)
}
