//! Central finite-difference oracle and the randomized kernel suite built on it.

use crate::diffcore::layers::{
    apply_dropout, dropout_backward, grad_reverse, relu, relu_backward, sample_dropout_mask,
    DenseLayer, DropoutMask,
};
use crate::diffcore::loss::{sigmoid_bce, softmax_cross_entropy};
use crate::diffcore::matrix::Matrix;
use crate::diffcore::rng::Rng;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss` around
/// `params` and returns the worst relative error. An empty parameter vector
/// yields 0.
pub fn finite_difference_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(Error::validation(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Dimension {
            op: "finite_difference_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let up = loss(&probe);
        probe[i] = params[i] - epsilon;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Outcome of one randomized configuration.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < self.tolerance)
    }
}

#[derive(Debug, Clone, Copy)]
enum Head {
    Softmax,
    Sigmoid,
    Squared,
}

/// Randomized two-layer net: dense → relu → dropout(fixed mask) → dense →
/// head, optionally followed by reversal on the input gradient.
struct Case {
    x: Matrix,
    first: DenseLayer,
    second: DenseLayer,
    mask: DropoutMask,
    head: Head,
    labels: Vec<usize>,
    targets: Vec<f64>,
    reverse: Option<f64>,
}

impl Case {
    fn random(index: usize, rng: &mut Rng) -> Result<Case> {
        let head = match index % 3 {
            0 => Head::Softmax,
            1 => Head::Sigmoid,
            _ => Head::Squared,
        };
        let batch = 1 + (rng.uniform() * 5.0) as usize;
        let in_dim = 1 + (rng.uniform() * 5.0) as usize;
        let hidden = 1 + (rng.uniform() * 6.0) as usize;
        let out_dim = match head {
            Head::Softmax => 2 + (rng.uniform() * 4.0) as usize,
            Head::Sigmoid => 1,
            Head::Squared => 1 + (rng.uniform() * 3.0) as usize,
        };
        let x = random_matrix(batch, in_dim, rng);
        let mut first = DenseLayer::glorot(in_dim, hidden, rng);
        let mut second = DenseLayer::glorot(hidden, out_dim, rng);
        // non-zero biases so the bias gradient path is exercised
        for layer in [&mut first, &mut second] {
            for b in layer.param_slices_mut()[1].iter_mut() {
                *b = 0.5 * rng.normal();
            }
        }
        let rate = if index % 2 == 0 { 0.3 } else { 0.0 };
        let mask = sample_dropout_mask(hidden, rate, rng)?;
        let labels = (0..batch)
            .map(|_| ((rng.uniform() * out_dim as f64) as usize).min(out_dim - 1))
            .collect();
        let targets = (0..batch)
            .map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 })
            .collect();
        let reverse = (index % 4 == 3).then(|| 0.25 + rng.uniform());
        Ok(Case {
            x,
            first,
            second,
            mask,
            head,
            labels,
            targets,
            reverse,
        })
    }

    fn name(&self, index: usize) -> String {
        format!(
            "case{index:02}:{:?}:{}x{}->{}->{}{}",
            self.head,
            self.x.rows(),
            self.first.in_dim(),
            self.first.out_dim(),
            self.second.out_dim(),
            if self.reverse.is_some() { ":reversed" } else { "" }
        )
    }

    fn head_loss(&self, out: &Matrix) -> Result<(f64, Matrix)> {
        match self.head {
            Head::Softmax => softmax_cross_entropy(out, &self.labels),
            Head::Sigmoid => sigmoid_bce(out, &self.targets),
            Head::Squared => {
                let n = out.rows() as f64;
                let loss = 0.5 * out.data().iter().map(|v| v * v).sum::<f64>() / n;
                Ok((loss, out.scale(1.0 / n)))
            }
        }
    }

    fn loss_at(&self, params: &[f64]) -> Result<f64> {
        let (x, first, second) = self.unpack(params)?;
        let z1 = first.apply(&x)?;
        let h = apply_dropout(&relu(&z1), &self.mask)?;
        let out = second.apply(&h)?;
        Ok(self.head_loss(&out)?.0)
    }

    /// Flattened `(params, grads)` with the input matrix first, plus the
    /// input gradient after reversal when the case has one.
    fn analytic(&self) -> Result<(Vec<f64>, Vec<f64>, Option<Matrix>)> {
        let z1 = self.first.apply(&self.x)?;
        let h = apply_dropout(&relu(&z1), &self.mask)?;
        let out = self.second.apply(&h)?;
        let (_, g_out) = self.head_loss(&out)?;
        let g2 = self.second.backward_from(&h, &g_out)?;
        let g_h = relu_backward(&dropout_backward(&g2.grad_in, &self.mask)?, &z1)?;
        let g1 = self.first.backward_from(&self.x, &g_h)?;
        let reversed = self.reverse.map(|lambda| grad_reverse(&g1.grad_in, lambda));

        let mut params = self.x.data().to_vec();
        let mut grads = g1.grad_in.data().to_vec();
        for (layer, g) in [(&self.first, &g1), (&self.second, &g2)] {
            for (p, gp) in layer.param_slices().iter().zip(g.param_slices()) {
                params.extend_from_slice(p);
                grads.extend_from_slice(gp);
            }
        }
        Ok((params, grads, reversed))
    }

    fn unpack(&self, params: &[f64]) -> Result<(Matrix, DenseLayer, DenseLayer)> {
        let mut off = 0;
        let mut take = |n: usize| {
            let s = params[off..off + n].to_vec();
            off += n;
            s
        };
        let x = Matrix::new(self.x.rows(), self.x.cols(), take(self.x.data().len()))?;
        let mut layers = Vec::with_capacity(2);
        for layer in [&self.first, &self.second] {
            let w = Matrix::new(layer.out_dim(), layer.in_dim(), take(layer.out_dim() * layer.in_dim()))?;
            let b = take(layer.out_dim());
            layers.push(DenseLayer::new(w, b)?);
        }
        let second = layers.pop().expect("two layers");
        let first = layers.pop().expect("two layers");
        Ok((x, first, second))
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

/// Runs `n_cases` randomized network/loss configurations through the
/// finite-difference oracle.
pub fn run_suite(n_cases: usize, seed: u64, epsilon: f64, tolerance: f64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed);
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let case = Case::random(i, &mut rng)?;
        let (params, analytic, reversed) = case.analytic()?;
        let mut err = check_loss(&case, &params, &analytic, epsilon)?;
        if let (Some(lambda), Some(reversed)) = (case.reverse, reversed) {
            // reversed input gradient is the gradient of -λ·loss w.r.t. x
            let n_input = case.x.data().len();
            let mut full = params.clone();
            let probe = |x: &[f64]| {
                full[..n_input].copy_from_slice(x);
                case.loss_at(&full).map(|l| -lambda * l)
            };
            err = err.max(check_fallible(probe, &params[..n_input], reversed.data(), epsilon)?);
        }
        cases.push(CaseReport {
            name: case.name(i),
            max_rel_error: err,
        });
    }
    Ok(SuiteReport { cases, tolerance })
}

fn check_loss(case: &Case, params: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64> {
    check_fallible(|p| case.loss_at(p), params, analytic, epsilon)
}

/// [`finite_difference_check`] for closures that can fail.
fn check_fallible<F>(mut loss: F, params: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut failure = None;
    let err = finite_difference_check(
        |p| match loss(p) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        params,
        analytic,
        epsilon,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_unit_squared_loss_is_exact() {
        // L(w, b) = 0.5 (w x + b - y)^2 with x = 1.5, y = 0.25
        let (x, y) = (1.5, 0.25);
        let loss = |p: &[f64]| 0.5 * (p[0] * x + p[1] - y).powi(2);
        let p = [0.7, -0.2];
        let r = p[0] * x + p[1] - y;
        let err = finite_difference_check(loss, &p, &[r * x, r], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn empty_parameters_report_zero() {
        let err = finite_difference_check(|_| 1.0, &[], &[], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        assert!(finite_difference_check(|_| 0.0, &[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let err = finite_difference_check(|p| p[0] * p[0], &[2.0], &[3.0], 1e-5).unwrap();
        assert!(err > 0.2);
    }

    #[test]
    fn suite_passes() {
        let report = run_suite(24, 11, 1e-5, 1e-4).unwrap();
        assert_eq!(report.cases.len(), 24);
        assert!(report.passed(), "{:#?}", report.cases);
    }
}
