use crate::diffcore::{Matrix, Rng};
use crate::error::{Error, Result};

/// Training budget of the linear domain probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

/// Proxy-A-distance from a linear logistic probe. A linear probe can only
/// under-estimate separability relative to a kernel probe, so `d_a` is a
/// lower-bound style proxy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyAResult {
    /// Held-out error of the probe.
    pub epsilon: f64,
    /// `2 (1 - 2 ε)` clamped to `[0, 2]`.
    pub d_a: f64,
    pub d_a_unclamped: f64,
}

pub const PROBE_KIND: &str = "linear-logistic";

pub fn proxy_a_from_error(epsilon: f64) -> ProxyAResult {
    let raw = 2.0 * (1.0 - 2.0 * epsilon);
    ProxyAResult {
        epsilon,
        d_a: raw.clamp(0.0, 2.0),
        d_a_unclamped: raw,
    }
}

/// Splits each domain 50/50 (per-domain permutation drawn from a fresh
/// generator seeded with `cfg.seed`), trains a full-batch logistic probe on
/// standardized features to tell the domains apart, and converts its test
/// error into a distance.
///
/// The computation is mirror-symmetric: swapping the two feature sets gives
/// bit-identical `epsilon`.
pub fn proxy_a_distance(
    features_s: &Matrix,
    features_t: &Matrix,
    cfg: &ProbeConfig,
) -> Result<ProxyAResult> {
    if features_s.cols() != features_t.cols() {
        return Err(Error::validation(format!(
            "feature dimensions differ: {} vs {}",
            features_s.cols(),
            features_t.cols()
        )));
    }
    if features_s.rows() < 2 || features_t.rows() < 2 {
        return Err(Error::validation("each domain needs at least 2 rows"));
    }
    if cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::validation("probe needs epochs >= 1 and a positive learning rate"));
    }

    let split = |m: &Matrix| {
        let perm = Rng::new(cfg.seed).permutation(m.rows());
        let half = m.rows() / 2;
        (m.select_rows(&perm[..half]), m.select_rows(&perm[half..]))
    };
    let (train_s, test_s) = split(features_s);
    let (train_t, test_t) = split(features_t);

    let dim = features_s.cols();
    let n_train = (train_s.rows() + train_t.rows()) as f64;
    let (sum_s, sum_t) = (train_s.col_sums(), train_t.col_sums());
    let mean: Vec<f64> = (0..dim).map(|c| (sum_s[c] + sum_t[c]) / n_train).collect();
    let sq = |m: &Matrix| -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        for r in 0..m.rows() {
            for (c, v) in m.row(r).iter().enumerate() {
                acc[c] += (v - mean[c]).powi(2);
            }
        }
        acc
    };
    let (sq_s, sq_t) = (sq(&train_s), sq(&train_t));
    // one scale for all columns keeps the geometry the features carry;
    // per-column scaling would blow up near-constant units
    let total: f64 = (0..dim).map(|c| sq_s[c] + sq_t[c]).sum();
    let rms = (total / (n_train * dim as f64)).sqrt();
    let inv = if rms > 1e-12 { 1.0 / rms } else { 1.0 };
    let scale = vec![inv; dim];
    let standardize = |m: &Matrix| {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) * scale[c];
            }
        }
        out
    };
    let (train_s, train_t) = (standardize(&train_s), standardize(&train_t));
    let (test_s, test_t) = (standardize(&test_s), standardize(&test_t));

    // first set is labeled -1, second +1
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let (gw_s, gb_s) = logistic_grad_sum(&train_s, -1.0, &w, b);
        let (gw_t, gb_t) = logistic_grad_sum(&train_t, 1.0, &w, b);
        for c in 0..dim {
            w[c] -= cfg.learning_rate * (gw_s[c] + gw_t[c]) / n_train;
        }
        b -= cfg.learning_rate * (gb_s + gb_t) / n_train;
    }

    let errors = test_errors(&test_s, -1.0, &w, b) + test_errors(&test_t, 1.0, &w, b);
    let epsilon = errors / (test_s.rows() + test_t.rows()) as f64;
    Ok(proxy_a_from_error(epsilon))
}

fn score(x: &[f64], w: &[f64], b: f64) -> f64 {
    x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b
}

/// Sum over rows of the gradient of `ln(1 + e^{-y z})`.
fn logistic_grad_sum(m: &Matrix, y: f64, w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for r in 0..m.rows() {
        let x = m.row(r);
        let z = score(x, w, b);
        let coef = -y * crate::diffcore::sigmoid(-y * z);
        for (g, v) in gw.iter_mut().zip(x) {
            *g += coef * v;
        }
        gb += coef;
    }
    (gw, gb)
}

/// Misclassified rows; a score of exactly zero counts as half an error.
fn test_errors(m: &Matrix, y: f64, w: &[f64], b: f64) -> f64 {
    (0..m.rows())
        .map(|r| {
            let margin = y * score(m.row(r), w, b);
            if margin > 0.0 {
                0.0
            } else if margin < 0.0 {
                1.0
            } else {
                0.5
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, center: &[f64], rng: &mut Rng) -> Matrix {
        let d = center.len();
        Matrix::new(n, d, (0..n * d).map(|i| center[i % d] + rng.normal()).collect()).unwrap()
    }

    #[test]
    fn formula() {
        assert_eq!(proxy_a_from_error(0.25).d_a, 1.0);
        assert_eq!(proxy_a_from_error(0.0).d_a, 2.0);
        let worse = proxy_a_from_error(0.7);
        assert_eq!(worse.d_a, 0.0);
        assert!(worse.d_a_unclamped < 0.0);
    }

    #[test]
    fn indistinguishable_domains_are_close() {
        let mut rng = Rng::new(1);
        let s = cloud(400, &[0.0, 0.0, 0.0], &mut rng);
        let perm = rng.permutation(400);
        let t = s.select_rows(&perm);
        let r = proxy_a_distance(&s, &t, &ProbeConfig::default()).unwrap();
        assert!((r.epsilon - 0.5).abs() < 0.1, "{r:?}");
        assert!(r.d_a < 0.4, "{r:?}");
    }

    #[test]
    fn separated_clouds_are_far() {
        let mut rng = Rng::new(2);
        let s = cloud(300, &[-6.0, 0.0], &mut rng);
        let t = cloud(300, &[6.0, 0.0], &mut rng);
        let r = proxy_a_distance(&s, &t, &ProbeConfig::default()).unwrap();
        assert!(r.epsilon < 0.01 && r.d_a > 1.95, "{r:?}");
    }

    #[test]
    fn symmetric_under_swap() {
        let mut rng = Rng::new(3);
        let s = cloud(211, &[0.0, 1.0, -1.0], &mut rng);
        let t = cloud(150, &[0.5, 0.5, 0.0], &mut rng);
        let cfg = ProbeConfig { seed: 9, ..Default::default() };
        let a = proxy_a_distance(&s, &t, &cfg).unwrap();
        let b = proxy_a_distance(&t, &s, &cfg).unwrap();
        assert_eq!(a.epsilon.to_bits(), b.epsilon.to_bits());
    }

    #[test]
    fn dimension_mismatch() {
        assert!(proxy_a_distance(&Matrix::zeros(4, 2), &Matrix::zeros(4, 3), &ProbeConfig::default()).is_err());
    }
}
