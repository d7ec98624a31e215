use crate::diffcore::matrix::Matrix;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over rows, with its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::validation("cross-entropy over an empty batch"));
    }
    let n_classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }

    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), n_classes);
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        loss += log_norm - row[y];
        for (c, (g, &z)) in grad.row_mut(r).iter_mut().zip(row).enumerate() {
            let p = (z - log_norm).exp();
            *g = (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean binary cross-entropy on raw logits (`n × 1`) against 0/1 targets.
pub fn sigmoid_bce(logit: &Matrix, target: &[f64]) -> Result<(f64, Matrix)> {
    if logit.cols() != 1 || logit.rows() != target.len() {
        return Err(Error::Dimension {
            op: "sigmoid_bce",
            left: logit.shape(),
            right: (target.len(), 1),
        });
    }
    if target.is_empty() {
        return Err(Error::validation("binary cross-entropy over an empty batch"));
    }
    if let Some(bad) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::validation(format!("non-binary target {bad}")));
    }

    let n = target.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(target.len());
    for (&z, &t) in logit.data().iter().zip(target) {
        // max(z, 0) - z t + ln(1 + e^{-|z|})
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - t) / n);
    }
    Ok((loss / n, Matrix::new(target.len(), 1, grad)?))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
