use crate::diffcore::matrix::Matrix;
use crate::diffcore::rng::Rng;
use crate::error::{Error, Result};

/// Fully connected layer computing `x · Wᵀ + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    cache: Option<Matrix>,
}

/// Gradients produced by [`DenseLayer::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub grad_in: Matrix,
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::Dimension {
                op: "dense_new",
                left: weights.shape(),
                right: (bias.len(), 1),
            });
        }
        Ok(DenseLayer {
            weights,
            bias,
            cache: None,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        DenseLayer {
            weights: Matrix::new(out_dim, in_dim, data).expect("sized by construction"),
            bias: vec![0.0; out_dim],
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn cached_input(&self) -> Option<&Matrix> {
        self.cache.as_ref()
    }

    /// Parameter buffers in a fixed order: weights, then bias.
    pub fn param_slices(&self) -> [&[f64]; 2] {
        [self.weights.data(), &self.bias]
    }

    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weights.data_mut(), &mut self.bias]
    }

    /// Forward pass that remembers `x` for a later [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let out = self.apply(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Matrix) -> Result<DenseGrads> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        self.backward_from(x, grad_out)
    }

    /// Stateless forward.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::Dimension {
                op: "dense_forward",
                left: x.shape(),
                right: self.weights.shape(),
            });
        }
        let mut out = x.matmul_t(&self.weights)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Backward against an explicitly supplied forward input.
    pub fn backward_from(&self, x: &Matrix, grad_out: &Matrix) -> Result<DenseGrads> {
        if grad_out.rows() != x.rows() || grad_out.cols() != self.out_dim() {
            return Err(Error::Dimension {
                op: "dense_backward",
                left: grad_out.shape(),
                right: (x.rows(), self.out_dim()),
            });
        }
        Ok(DenseGrads {
            grad_in: grad_out.matmul(&self.weights)?,
            grad_w: grad_out.t_matmul(x)?,
            grad_b: grad_out.col_sums(),
        })
    }
}

impl DenseGrads {
    pub fn param_slices(&self) -> [&[f64]; 2] {
        [self.grad_w.data(), &self.grad_b]
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Matrix, cached_x: &Matrix) -> Result<Matrix> {
    if grad_out.shape() != cached_x.shape() {
        return Err(Error::Dimension {
            op: "relu_backward",
            left: grad_out.shape(),
            right: cached_x.shape(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(cached_x.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::new(grad_out.rows(), grad_out.cols(), data)
}

/// Per-unit Bernoulli keep mask shared by every row of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    rate_bits: u64,
}

impl DropoutMask {
    /// Mask that keeps every unit.
    pub fn all_ones(n_units: usize) -> Self {
        DropoutMask {
            keep: vec![true; n_units],
            rate_bits: 0f64.to_bits(),
        }
    }

    pub fn from_keep(keep: Vec<bool>, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(DropoutMask {
            keep,
            rate_bits: rate.to_bits(),
        })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn rate(&self) -> f64 {
        f64::from_bits(self.rate_bits)
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

fn check_rate(d: f64) -> Result<()> {
    if !(0.0..1.0).contains(&d) {
        return Err(Error::validation(format!(
            "dropout rate must lie in [0, 1), got {d}"
        )));
    }
    Ok(())
}

/// Keeps each unit independently with probability `1 - d`. A zero rate
/// returns the all-ones mask without drawing from `rng`.
pub fn sample_dropout_mask(n_units: usize, d: f64, rng: &mut Rng) -> Result<DropoutMask> {
    check_rate(d)?;
    if d == 0.0 {
        return Ok(DropoutMask::all_ones(n_units));
    }
    let keep = (0..n_units).map(|_| rng.uniform() >= d).collect();
    Ok(DropoutMask {
        keep,
        rate_bits: d.to_bits(),
    })
}

/// Inverted dropout: kept units are scaled by `1 / (1 - d)`, dropped units
/// are zeroed. The backward pass is the same map applied to the gradient.
pub fn apply_dropout(x: &Matrix, mask: &DropoutMask) -> Result<Matrix> {
    if mask.len() != x.cols() {
        return Err(Error::Dimension {
            op: "apply_dropout",
            left: x.shape(),
            right: (1, mask.len()),
        });
    }
    let scale = 1.0 / (1.0 - mask.rate());
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &k) in out.row_mut(r).iter_mut().zip(&mask.keep) {
            *v = if k { *v * scale } else { 0.0 };
        }
    }
    Ok(out)
}

pub fn dropout_backward(grad_out: &Matrix, mask: &DropoutMask) -> Result<Matrix> {
    apply_dropout(grad_out, mask)
}

/// Backward of the gradient reversal layer: `-λ · grad`. Its forward is the
/// identity on activations, so only this half needs a kernel.
pub fn grad_reverse(grad: &Matrix, lambda: f64) -> Matrix {
    grad.map(|g| -(lambda * g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn dense_identity_layer() {
        let mut layer = DenseLayer::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert_eq!(layer.forward(&m(&[&[1.0, 2.0]])).unwrap(), m(&[&[1.0, 2.0]]));
    }

    #[test]
    fn dense_swap_with_bias() {
        let mut layer = DenseLayer::new(m(&[&[0.0, 1.0], &[1.0, 0.0]]), vec![1.0, 1.0]).unwrap();
        assert_eq!(layer.forward(&m(&[&[1.0, 0.0]])).unwrap(), m(&[&[1.0, 2.0]]));
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let mut layer = DenseLayer::new(Matrix::identity(2), vec![0.0; 2]).unwrap();
        let err = layer.forward(&Matrix::zeros(1, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn dense_backward_requires_forward() {
        let layer = DenseLayer::new(Matrix::identity(2), vec![0.0; 2]).unwrap();
        assert!(matches!(
            layer.backward(&Matrix::zeros(1, 2)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn dense_backward_zero_and_identity() {
        let mut layer = DenseLayer::new(Matrix::identity(2), vec![0.0; 2]).unwrap();
        let x = m(&[&[3.0, -1.0], &[0.5, 2.0]]);
        layer.forward(&x).unwrap();
        let g = layer.backward(&Matrix::zeros(2, 2)).unwrap();
        assert!(g.grad_in.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_w.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_b.iter().all(|&v| v == 0.0));

        let up = m(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(layer.backward(&up).unwrap().grad_in, up);
    }

    #[test]
    fn relu_forward_backward() {
        let x = m(&[&[-1.0, 2.0]]);
        assert_eq!(relu(&x), m(&[&[0.0, 2.0]]));
        assert_eq!(
            relu_backward(&m(&[&[5.0, 5.0]]), &x).unwrap(),
            m(&[&[0.0, 5.0]])
        );
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = Rng::new(1);
        let mask = sample_dropout_mask(3, 0.0, &mut rng).unwrap();
        assert!(mask.keep().iter().all(|&k| k));
        let x = m(&[&[0.1, -2.5, 3.0], &[1e-300, 7.0, -0.0]]);
        let y = apply_dropout(&x, &mask).unwrap();
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
        assert_eq!(dropout_backward(&x, &mask).unwrap(), x);
    }

    #[test]
    fn dropout_all_zero_mask() {
        let mask = DropoutMask::from_keep(vec![false; 2], 0.5).unwrap();
        let y = apply_dropout(&m(&[&[3.0, 4.0]]), &mask).unwrap();
        assert_eq!(y, Matrix::zeros(1, 2));
    }

    #[test]
    fn dropout_rate_validation() {
        let mut rng = Rng::new(0);
        assert!(sample_dropout_mask(4, 1.0, &mut rng).is_err());
        assert!(sample_dropout_mask(4, -0.1, &mut rng).is_err());
        assert!(sample_dropout_mask(4, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn dropout_length_mismatch() {
        let mask = DropoutMask::all_ones(3);
        assert!(matches!(
            apply_dropout(&Matrix::zeros(1, 2), &mask),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dropout_masks_are_seed_deterministic() {
        let a = sample_dropout_mask(257, 0.3, &mut Rng::new(9)).unwrap();
        let b = sample_dropout_mask(257, 0.3, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_keep_fraction_at_half() {
        // Binomial(10000, 0.5) has sd 50; [4800, 5200] is a 4-sigma band.
        let mask = sample_dropout_mask(10_000, 0.5, &mut Rng::new(2024)).unwrap();
        let frac = mask.kept_count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn dropout_is_unbiased_in_expectation() {
        let x = m(&[&[1.0, -2.0, 0.5, 4.0]]);
        let mut rng = Rng::new(77);
        let mut acc = Matrix::zeros(1, 4);
        let n = 10_000;
        for _ in 0..n {
            let mask = sample_dropout_mask(4, 0.5, &mut rng).unwrap();
            acc.add_assign(&apply_dropout(&x, &mask).unwrap()).unwrap();
        }
        for (mean, want) in acc.scale(1.0 / n as f64).data().iter().zip(x.data()) {
            assert!((mean - want).abs() <= 0.02 * want.abs().max(1.0), "{mean} vs {want}");
        }
    }

    #[test]
    fn grad_reverse_examples() {
        assert_eq!(grad_reverse(&m(&[&[1.0, -2.0]]), 1.0), m(&[&[-1.0, 2.0]]));
        assert!(grad_reverse(&m(&[&[1.0, -2.0]]), 0.0)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(grad_reverse(&m(&[&[4.0]]), 0.5), m(&[&[-2.0]]));
    }
}
