//! Point-cloud data model and the `.pts` text format.
//!
//! Layout: a header line `n C has_labels`, followed by `n` lines of
//! `x y z r g b [label]`. Reals are written with 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// One scene sample: coordinates, colors and optional semantic labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Array2<f64>,
    colors: Array2<f64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl PointCloud {
    pub fn new(
        positions: Array2<f64>,
        colors: Array2<f64>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = positions.nrows();
        if n == 0 {
            return Err(Error::Argument("point cloud must contain at least one point".into()));
        }
        if positions.ncols() != 3 || colors.ncols() != 3 {
            return Err(Error::Shape("positions and colors must have 3 columns".into()));
        }
        if colors.nrows() != n {
            return Err(Error::Shape(format!("{} color rows for {} points", colors.nrows(), n)));
        }
        if !positions.iter().all(|v| v.is_finite()) {
            return Err(Error::Range("non-finite coordinate".into()));
        }
        if !colors.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Range("color component outside [0, 1]".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!("{} labels for {} points", labels.len(), n)));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Range(format!(
                    "label {bad} is not below class count {num_classes}"
                )));
            }
        }
        Ok(Self {
            positions,
            colors,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub fn colors(&self) -> &Array2<f64> {
        &self.colors
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn position(&self, i: usize) -> ArrayView1<'_, f64> {
        self.positions.row(i)
    }

    /// Labels, or a state error for unlabeled clouds.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::State("point cloud has no labels".into()))
    }

    /// New cloud whose point `i` is this cloud's point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.len();
        if let Some(&bad) = order.iter().find(|&&i| i >= n) {
            return Err(Error::Range(format!("index {bad} out of range for {n} points")));
        }
        let positions = self.positions.select(ndarray::Axis(0), order);
        let colors = self.colors.select(ndarray::Axis(0), order);
        let labels = self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect());
        Self::new(positions, colors, labels, self.num_classes)
    }

    /// Same cloud with every coordinate mapped through `f`.
    pub fn map_positions(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        let mut positions = self.positions.clone();
        for mut row in positions.rows_mut() {
            let out = f([row[0], row[1], row[2]]);
            row[0] = out[0];
            row[1] = out[1];
            row[2] = out[2];
        }
        Self::new(positions, self.colors.clone(), self.labels.clone(), self.num_classes)
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }
}

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.8e}")
}

/// Render a cloud in the `.pts` text format.
pub fn to_pts_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 100);
    let has_labels = cloud.labels.is_some();
    let _ = writeln!(out, "{} {} {}", cloud.len(), cloud.num_classes, u8::from(has_labels));
    for i in 0..cloud.len() {
        let p = cloud.positions.row(i);
        let c = cloud.colors.row(i);
        let _ = write!(
            out,
            "{} {} {} {} {} {}",
            fmt_real(p[0]),
            fmt_real(p[1]),
            fmt_real(p[2]),
            fmt_real(c[0]),
            fmt_real(c[1]),
            fmt_real(c[2])
        );
        if let Some(labels) = &cloud.labels {
            let _ = write!(out, " {}", labels[i]);
        }
        out.push('\n');
    }
    out
}

/// Parse `.pts` text. `origin` is used in error messages only.
pub fn parse_pts(text: &str, origin: &Path) -> Result<PointCloud> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(parse_err(1, format!("header needs 3 fields, found {}", fields.len())));
    }
    let n: usize = fields[0]
        .parse()
        .map_err(|_| parse_err(1, format!("bad point count {:?}", fields[0])))?;
    let num_classes: usize = fields[1]
        .parse()
        .map_err(|_| parse_err(1, format!("bad class count {:?}", fields[1])))?;
    let has_labels = match fields[2] {
        "0" => false,
        "1" => true,
        other => return Err(parse_err(1, format!("has_labels must be 0 or 1, found {other:?}"))),
    };
    let width = if has_labels { 7 } else { 6 };

    let mut positions = Array2::zeros((n, 3));
    let mut colors = Array2::zeros((n, 3));
    let mut labels = Vec::with_capacity(if has_labels { n } else { 0 });
    let mut row = 0;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if row == n {
            return Err(parse_err(line_no, format!("more than {n} point lines")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != width {
            return Err(parse_err(
                line_no,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        for (c, field) in fields[..6].iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad real {field:?}")))?;
            if c < 3 {
                positions[[row, c]] = v;
            } else {
                colors[[row, c - 3]] = v;
            }
        }
        if has_labels {
            let label: usize = fields[6]
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad label {:?}", fields[6])))?;
            if label >= num_classes {
                return Err(Error::Range(format!(
                    "{}:{line_no}: label {label} is not below class count {num_classes}",
                    origin.display()
                )));
            }
            labels.push(label);
        }
        row += 1;
    }
    if row != n {
        return Err(parse_err(row + 2, format!("expected {n} point lines, found {row}")));
    }
    PointCloud::new(positions, colors, has_labels.then_some(labels), num_classes)
}

pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pts(&text, path)
}

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_pts_string(cloud)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> PointCloud {
        PointCloud::new(
            array![[0.0, 0.0, 0.0], [1.0, 0.5, -2.0], [3.25, 1e-3, 7.0]],
            array![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5], [0.25, 0.75, 0.125]],
            Some(vec![0, 1, 1]),
            2,
        )
        .unwrap()
    }

    #[test]
    fn minimal_file_parses() {
        let text = to_pts_string(&tiny());
        assert!(text.starts_with("3 2 1\n"));
        let c = parse_pts(&text, Path::new("t.pts")).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.num_classes(), 2);
        assert_eq!(c, tiny());
    }

    #[test]
    fn short_line_names_line_number() {
        let text = "3 2 1\n0 0 0 0 0\n0 0 0 0 0 0 1\n0 0 0 0 0 0 1\n";
        match parse_pts(text, Path::new("bad.pts")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("found 5"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_declared_range() {
        let text = "1 2 1\n0 0 0 0 0 0 2\n";
        assert!(matches!(parse_pts(text, Path::new("x")), Err(Error::Range(_))));
    }

    #[test]
    fn unlabeled_cloud_omits_column() {
        let c = tiny().without_labels();
        let text = to_pts_string(&c);
        assert!(text.starts_with("3 2 0\n"));
        assert_eq!(text.lines().nth(1).unwrap().split_whitespace().count(), 6);
        let back = parse_pts(&text, Path::new("x")).unwrap();
        assert!(back.labels().is_none());
    }

    #[test]
    fn invariants_rejected() {
        let bad_color = PointCloud::new(array![[0.0, 0.0, 0.0]], array![[1.5, 0.0, 0.0]], None, 1);
        assert!(bad_color.is_err());
        let empty = PointCloud::new(Array2::zeros((0, 3)), Array2::zeros((0, 3)), None, 1);
        assert!(empty.is_err());
        let bad_label = PointCloud::new(array![[0.0, 0.0, 0.0]], array![[0.0, 0.0, 0.0]], Some(vec![3]), 3);
        assert!(matches!(bad_label, Err(Error::Range(_))));
    }

    #[test]
    fn missing_rows_reported() {
        let text = "2 1 0\n0 0 0 0 0 0\n";
        assert!(matches!(parse_pts(text, Path::new("x")), Err(Error::Parse { .. })));
    }
}
