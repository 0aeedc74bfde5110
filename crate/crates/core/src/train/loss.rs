use ndarray::Array2;

use crate::error::{Error, Result};

/// Mean softmax cross-entropy over points and its gradient w.r.t. the logits.
pub fn seg_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Argument("no points to score".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Range(format!("label {bad} with {classes} classes")));
    }
    let mut grad = Array2::zeros((n, classes));
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for (r, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for c in 0..classes {
            let p = (row[c] - log_z).exp();
            grad[[r, c]] = (p - if c == label { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Joint objective: plain sum of the two terms.
pub fn total_loss(seg: f64, bpm: f64) -> Result<f64> {
    if !seg.is_finite() || !bpm.is_finite() {
        return Err(Error::Argument(format!(
            "non-finite loss term (seg {seg}, boundary {bpm})"
        )));
    }
    Ok(seg + bpm)
}

/// Arg-max class per row, lowest index on ties.
pub fn predict_classes(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Array2::from_elem((5, 4), 0.3);
        let (loss, _) = seg_loss(&logits, &[0, 1, 2, 3, 0]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_as_true_logit_grows() {
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let logits = Array2::from_shape_vec((1, 3), vec![step as f64 * 0.5, 1.0, -1.0]).unwrap();
            let (loss, _) = seg_loss(&logits, &[0]).unwrap();
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let logits = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.4 - 1.0);
        let labels = [2, 0, 1, 1];
        let (_, grad) = seg_loss(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut up = logits.clone();
                up[[i, j]] += h;
                let mut down = logits.clone();
                down[[i, j]] -= h;
                let fd = (seg_loss(&up, &labels).unwrap().0 - seg_loss(&down, &labels).unwrap().0) / (2.0 * h);
                let rel = (fd - grad[[i, j]]).abs() / fd.abs().max(grad[[i, j]].abs()).max(1e-8);
                assert!(rel < 1e-6, "({i},{j}) {fd} vs {}", grad[[i, j]]);
            }
        }
    }

    #[test]
    fn bad_labels_rejected() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(seg_loss(&logits, &[0, 3]), Err(Error::Range(_))));
        assert!(matches!(seg_loss(&logits, &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn total_is_a_sum() {
        assert!((total_loss(0.7, 0.3).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.0).unwrap(), 0.7);
        assert!(total_loss(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn argmax_prefers_lower_index() {
        let logits = Array2::from_shape_vec((2, 3), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(predict_classes(&logits), vec![0, 1]);
    }
}
