//! The three networks of the adaptation model: a shared feature extractor,
//! a label classifier fed only with source features, and one discriminator
//! whose hidden layers are dropped out independently on every stochastic
//! pass.
//!
//! Forward passes return a [`Trace`] instead of caching inside the layers, so
//! the `K` sampled discriminator passes can each be backpropagated with their
//! own masks.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::diffcore::{
    apply_dropout, dropout_backward, relu, relu_backward, sample_dropout_mask, DenseLayer,
    DropoutMask, Matrix, Rng,
};
use crate::error::{Error, Result};

/// Everything a stacked forward pass needs for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    masks: Vec<DropoutMask>,
}

impl Trace {
    /// Dropout masks, one per hidden layer (empty for networks without dropout).
    pub fn masks(&self) -> &[DropoutMask] {
        &self.masks
    }
}

/// Per-layer weight and bias gradients of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl StackGrads {
    pub fn zeros_like(layers: &[DenseLayer]) -> Self {
        StackGrads {
            weights: layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &StackGrads) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Buffers in the same order as [`Stack::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

/// Dense layers separated by ReLU, with optional dropout after each hidden
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    layers: Vec<DenseLayer>,
    relu_last: bool,
}

impl Stack {
    fn new(layers: Vec<DenseLayer>, relu_last: bool) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension {
                    op: "stack_chain",
                    left: pair[0].weights().shape(),
                    right: pair[1].weights().shape(),
                });
            }
        }
        Ok(Stack { layers, relu_last })
    }

    fn glorot(dims: &[usize], relu_last: bool, rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::glorot(w[0], w[1], rng))
            .collect();
        Stack { layers, relu_last }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.param_slices())
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.layers.iter().map(|l| l.out_dim() * (l.in_dim() + 1)).sum();
        if values.len() != total {
            return Err(Error::Dimension {
                op: "set_params_flat",
                left: (values.len(), 1),
                right: (total, 1),
            });
        }
        let mut off = 0;
        for slice in self.param_slices_mut() {
            let n = slice.len();
            slice.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if let Some(first) = self.layers.first() {
            if x.cols() != first.in_dim() {
                return Err(Error::Dimension {
                    op,
                    left: x.shape(),
                    right: first.weights().shape(),
                });
            }
        }
        Ok(())
    }

    /// Forward pass. `masks`, when given, holds one mask per hidden layer and
    /// is applied after that layer's ReLU.
    fn forward(&self, x: &Matrix, masks: Option<&[DropoutMask]>) -> Result<(Matrix, Trace)> {
        let hidden = self.layers.len().saturating_sub(1);
        if let Some(m) = masks {
            if m.len() != hidden {
                return Err(Error::Dimension {
                    op: "stack_masks",
                    left: (m.len(), 1),
                    right: (hidden, 1),
                });
            }
        }
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            masks: masks.map(<[_]>::to_vec).unwrap_or_default(),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h)?;
            trace.inputs.push(h);
            h = if self.activated(i) { relu(&z) } else { z.clone() };
            if let Some(m) = masks {
                if i < hidden {
                    h = apply_dropout(&h, &m[i])?;
                }
            }
            trace.pre_activations.push(z);
        }
        Ok((h, trace))
    }

    /// Backward pass through a recorded forward; returns the input gradient
    /// and the parameter gradients.
    fn backward(&self, trace: &Trace, grad_out: &Matrix) -> Result<(Matrix, StackGrads)> {
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::State(format!(
                "trace recorded {} layers, network has {}",
                trace.inputs.len(),
                self.layers.len()
            )));
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if let Some(mask) = trace.masks.get(i) {
                g = dropout_backward(&g, mask)?;
            }
            if self.activated(i) {
                g = relu_backward(&g, &trace.pre_activations[i])?;
            }
            let grads = self.layers[i].backward_from(&trace.inputs[i], &g)?;
            weights.push(grads.grad_w);
            biases.push(grads.grad_b);
            g = grads.grad_in;
        }
        weights.reverse();
        biases.reverse();
        Ok((g, StackGrads { weights, biases }))
    }
}

/// Shared feature extractor `f`: every layer is followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    stack: Stack,
    input_dim: usize,
}

impl Extractor {
    /// `dims` lists the layer widths including the input, e.g. `[2, 64, 64]`.
    /// A single entry gives a zero-depth (identity) extractor.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        check_dims(dims, "extractor")?;
        Ok(Extractor {
            stack: Stack::glorot(dims, true, rng),
            input_dim: dims[0],
        })
    }

    pub fn from_layers(input_dim: usize, layers: Vec<DenseLayer>) -> Result<Self> {
        let stack = Stack::new(layers, true)?;
        if let Some(first) = stack.layers.first() {
            if first.in_dim() != input_dim {
                return Err(Error::validation(format!(
                    "extractor input dim {input_dim} does not match first layer ({})",
                    first.in_dim()
                )));
            }
        }
        Ok(Extractor { stack, input_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.stack.layers.last().map_or(self.input_dim, |l| l.out_dim())
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut Stack {
        &mut self.stack
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Trace)> {
        if x.cols() != self.input_dim {
            return Err(Error::Dimension {
                op: "extract_features",
                left: x.shape(),
                right: (x.rows(), self.input_dim),
            });
        }
        self.stack.forward(x, None)
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&self, trace: &Trace, grad_features: &Matrix) -> Result<(Matrix, StackGrads)> {
        self.stack.backward(trace, grad_features)
    }
}

/// Label classifier `C`: ReLU between layers, raw logits at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    stack: Stack,
}

impl Classifier {
    /// `dims` from feature width to `n_classes`, e.g. `[64, 2]`.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        check_dims(dims, "classifier")?;
        if dims.len() < 2 {
            return Err(Error::validation("classifier needs at least one layer"));
        }
        Ok(Classifier {
            stack: Stack::glorot(dims, false, rng),
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation("classifier needs at least one layer"));
        }
        Ok(Classifier {
            stack: Stack::new(layers, false)?,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.stack.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn feature_dim(&self) -> usize {
        self.stack.layers[0].in_dim()
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut Stack {
        &mut self.stack
    }

    pub fn forward(&self, features: &Matrix) -> Result<(Matrix, Trace)> {
        self.stack.check_input(features, "classify")?;
        self.stack.forward(features, None)
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward(features)?.0)
    }

    pub fn backward(&self, trace: &Trace, grad_logits: &Matrix) -> Result<(Matrix, StackGrads)> {
        self.stack.backward(trace, grad_logits)
    }
}

/// Domain discriminator with dropout after every hidden layer. Each
/// stochastic pass with fresh masks is one sampled discriminator `D_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    stack: Stack,
    dropout: f64,
}

impl Discriminator {
    /// `dims` from feature width to 1, e.g. `[64, 64, 1]`.
    pub fn new(dims: &[usize], dropout: f64, rng: &mut Rng) -> Result<Self> {
        check_dims(dims, "discriminator")?;
        if dims.len() < 2 || dims[dims.len() - 1] != 1 {
            return Err(Error::validation(
                "discriminator must end in a single logit",
            ));
        }
        check_dropout(dropout)?;
        Ok(Discriminator {
            stack: Stack::glorot(dims, false, rng),
            dropout,
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, dropout: f64) -> Result<Self> {
        if layers.last().map(|l| l.out_dim()) != Some(1) {
            return Err(Error::validation(
                "discriminator must end in a single logit",
            ));
        }
        check_dropout(dropout)?;
        Ok(Discriminator {
            stack: Stack::new(layers, false)?,
            dropout,
        })
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Same weights with a different dropout rate.
    pub fn with_dropout(&self, dropout: f64) -> Result<Self> {
        check_dropout(dropout)?;
        Ok(Discriminator {
            stack: self.stack.clone(),
            dropout,
        })
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        let layers = &self.stack.layers;
        layers[..layers.len() - 1].iter().map(|l| l.out_dim()).collect()
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut Stack {
        &mut self.stack
    }

    /// Draws one mask per hidden layer at this discriminator's rate.
    pub fn sample_masks(&self, rng: &mut Rng) -> Result<Vec<DropoutMask>> {
        self.hidden_widths()
            .into_iter()
            .map(|w| sample_dropout_mask(w, self.dropout, rng))
            .collect()
    }

    /// Forward with explicitly supplied masks.
    pub fn forward_with_masks(
        &self,
        features: &Matrix,
        masks: &[DropoutMask],
    ) -> Result<(Matrix, Trace)> {
        self.stack.check_input(features, "discriminate")?;
        self.stack.forward(features, Some(masks))
    }

    /// Forward without dropout.
    pub fn forward_deterministic(&self, features: &Matrix) -> Result<Matrix> {
        self.stack.check_input(features, "discriminate")?;
        let masks: Vec<_> = self
            .hidden_widths()
            .into_iter()
            .map(DropoutMask::all_ones)
            .collect();
        Ok(self.stack.forward(features, Some(&masks))?.0)
    }

    pub fn backward(&self, trace: &Trace, grad_logits: &Matrix) -> Result<(Matrix, StackGrads)> {
        self.stack.backward(trace, grad_logits)
    }
}

/// One sampled discriminator pass.
#[derive(Debug, Clone, PartialEq)]
pub struct McSample {
    pub logits: Matrix,
    pub trace: Trace,
}

impl McSample {
    pub fn masks(&self) -> &[DropoutMask] {
        self.trace.masks()
    }
}

/// Output of [`discriminate_mc`]: `K` logit sets of shape `batch × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct McOutput {
    samples: Vec<McSample>,
}

impl McOutput {
    pub fn from_samples(samples: Vec<McSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("MC output needs at least one sample"));
        }
        Ok(McOutput { samples })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[McSample] {
        &self.samples
    }

    pub fn logits(&self, j: usize) -> &Matrix {
        &self.samples[j].logits
    }
}

/// Runs `k` stochastic passes of `disc`, each with freshly sampled masks.
pub fn discriminate_mc(
    features: &Matrix,
    disc: &Discriminator,
    k: usize,
    rng: &mut Rng,
) -> Result<McOutput> {
    if k == 0 {
        return Err(Error::validation("number of MC samples must be at least 1"));
    }
    let mut samples = Vec::with_capacity(k);
    for _ in 0..k {
        let masks = disc.sample_masks(rng)?;
        let (logits, trace) = disc.forward_with_masks(features, &masks)?;
        samples.push(McSample { logits, trace });
    }
    Ok(McOutput { samples })
}

/// Unbiased variance of the `K` logits for each input row.
pub fn mc_output_variance(out: &McOutput) -> Result<Vec<f64>> {
    let k = out.k();
    if k < 2 {
        return Err(Error::validation(format!(
            "variance needs at least 2 MC samples, got {k}"
        )));
    }
    let rows = out.logits(0).rows();
    let variances = (0..rows)
        .map(|r| {
            let vals: Vec<f64> = out.samples.iter().map(|s| s.logits.get(r, 0)).collect();
            sample_variance(&vals)
        })
        .collect();
    Ok(variances)
}

/// Unbiased sample variance; exactly 0 when all values coincide.
pub(crate) fn sample_variance(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.iter().all(|&v| v == vals[0]) {
        return 0.0;
    }
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn check_dims(dims: &[usize], what: &str) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::validation(format!(
            "{what} layer widths must be non-empty and positive, got {dims:?}"
        )));
    }
    Ok(())
}

fn check_dropout(d: f64) -> Result<()> {
    if !(0.0..1.0).contains(&d) {
        return Err(Error::validation(format!(
            "dropout rate must lie in [0, 1), got {d}"
        )));
    }
    Ok(())
}

/// Layer widths of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub input_dim: usize,
    /// Extractor widths after the input; the last entry is the feature width.
    pub extractor: Vec<usize>,
    /// Discriminator hidden widths (the single-logit output layer is implied).
    pub discriminator: Vec<usize>,
    pub n_classes: usize,
}

impl Topology {
    /// Extractor `input → 32`, classifier `32 → n_classes`,
    /// discriminator `32 → 32 → 1`.
    pub fn desk_scale(input_dim: usize, n_classes: usize) -> Self {
        Topology {
            input_dim,
            extractor: vec![32],
            discriminator: vec![32],
            n_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.last().copied().unwrap_or(self.input_dim)
    }
}

/// Parameters of all three networks. The discriminator is absent for
/// source-only training.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: Extractor,
    pub classifier: Classifier,
    pub discriminator: Option<Discriminator>,
}

impl Model {
    /// Initializes extractor, classifier and (optionally) discriminator in
    /// that order from `rng`, so models with and without a discriminator
    /// share their extractor and classifier weights for the same seed.
    pub fn new(
        topo: &Topology,
        dropout: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if topo.n_classes < 2 {
            return Err(Error::validation("need at least 2 classes"));
        }
        let mut ext_dims = vec![topo.input_dim];
        ext_dims.extend_from_slice(&topo.extractor);
        let extractor = Extractor::new(&ext_dims, rng)?;
        let classifier = Classifier::new(&[topo.feature_dim(), topo.n_classes], rng)?;
        let discriminator = match dropout {
            Some(d) => {
                let mut dims = vec![topo.feature_dim()];
                dims.extend_from_slice(&topo.discriminator);
                dims.push(1);
                Some(Discriminator::new(&dims, d, rng)?)
            }
            None => None,
        };
        Ok(Model {
            extractor,
            classifier,
            discriminator,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.n_classes()
    }

    /// Deterministic class logits `C(f(x))`.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.classifier.apply(&self.extractor.apply(x)?)
    }

    /// Arg-max class per row.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;

    fn random_input(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_depth_extractor_is_identity() {
        let ext = Extractor::new(&[3], &mut Rng::new(0)).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(ext.apply(&x).unwrap(), x);
        assert_eq!(ext.feature_dim(), 3);
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let layer = DenseLayer::new(Matrix::identity(2), vec![0.0; 2]).unwrap();
        let ext = Extractor::from_layers(2, vec![layer]).unwrap();
        let x = Matrix::from_rows(&[[0.5, 2.0], [0.0, 1.0]]).unwrap();
        assert_eq!(ext.apply(&x).unwrap(), x);
    }

    #[test]
    fn extractor_rejects_wrong_width() {
        let ext = Extractor::new(&[2, 4], &mut Rng::new(0)).unwrap();
        assert!(matches!(
            ext.apply(&Matrix::zeros(1, 3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn extractor_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let ext = Extractor::new(&[3, 5, 4], &mut rng).unwrap();
        let x = random_input(4, 3, &mut rng);
        // L = 0.5 * sum(f(x)^2)
        let (feat, trace) = ext.forward(&x).unwrap();
        let (_, grads) = ext.backward(&trace, &feat).unwrap();
        let params = ext.stack().params_flat();
        let err = finite_difference_check(
            |p| {
                let mut e = ext.clone();
                e.stack_mut().set_params_flat(p).unwrap();
                0.5 * e.apply(&x).unwrap().data().iter().map(|v| v * v).sum::<f64>()
            },
            &params,
            &grads.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn symmetric_classifier_gives_equal_logits() {
        let layer = DenseLayer::new(
            Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap();
        let clf = Classifier::from_layers(vec![layer]).unwrap();
        let logits = clf.apply(&Matrix::from_rows(&[[0.3, 0.3]]).unwrap()).unwrap();
        assert_eq!(logits.get(0, 0), logits.get(0, 1));
    }

    #[test]
    fn empty_batch_classifies_to_empty_logits() {
        let clf = Classifier::new(&[4, 3], &mut Rng::new(1)).unwrap();
        let logits = clf.apply(&Matrix::zeros(0, 4)).unwrap();
        assert_eq!(logits.shape(), (0, 3));
    }

    #[test]
    fn composed_classifier_gradient_matches_finite_differences() {
        use crate::diffcore::softmax_cross_entropy;
        let mut rng = Rng::new(8);
        let model = Model::new(
            &Topology {
                input_dim: 2,
                extractor: vec![6, 5],
                discriminator: vec![4],
                n_classes: 3,
            },
            None,
            &mut rng,
        )
        .unwrap();
        let x = random_input(5, 2, &mut rng);
        let labels = [0, 2, 1, 1, 0];
        let loss = |m: &Model| softmax_cross_entropy(&m.logits(&x).unwrap(), &labels).unwrap();

        let (feat, ft) = model.extractor.forward(&x).unwrap();
        let (logits, ct) = model.classifier.forward(&feat).unwrap();
        let (_, g_logits) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (g_feat, g_c) = model.classifier.backward(&ct, &g_logits).unwrap();
        let (_, g_f) = model.extractor.backward(&ft, &g_feat).unwrap();

        let mut analytic = g_f.flatten();
        analytic.extend(g_c.flatten());
        let mut params = model.extractor.stack().params_flat();
        let n_f = params.len();
        params.extend(model.classifier.stack().params_flat());
        let err = finite_difference_check(
            |p| {
                let mut m = model.clone();
                m.extractor.stack_mut().set_params_flat(&p[..n_f]).unwrap();
                m.classifier.stack_mut().set_params_flat(&p[n_f..]).unwrap();
                loss(&m).0
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn disc(d: f64, rng: &mut Rng) -> Discriminator {
        Discriminator::new(&[4, 8, 6, 1], d, rng).unwrap()
    }

    #[test]
    fn zero_dropout_gives_identical_samples() {
        let mut rng = Rng::new(3);
        let d = disc(0.0, &mut rng);
        let x = random_input(7, 4, &mut rng);
        let det = d.forward_deterministic(&x).unwrap();
        for k in [1, 2, 5] {
            let out = discriminate_mc(&x, &d, k, &mut rng).unwrap();
            for j in 0..k {
                assert_eq!(out.logits(j), &det);
            }
            if k >= 2 {
                assert!(mc_output_variance(&out).unwrap().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn half_dropout_gives_spread() {
        let mut rng = Rng::new(4);
        let d = disc(0.5, &mut rng);
        let x = random_input(6, 4, &mut rng);
        let out = discriminate_mc(&x, &d, 32, &mut rng).unwrap();
        let var = mc_output_variance(&out).unwrap();
        assert!(var.iter().all(|&v| v > 0.0), "{var:?}");
    }

    #[test]
    fn mc_is_seed_reproducible() {
        let mut rng = Rng::new(6);
        let d = disc(0.5, &mut rng);
        let x = random_input(3, 4, &mut rng);
        let a = discriminate_mc(&x, &d, 4, &mut Rng::new(99)).unwrap();
        let b = discriminate_mc(&x, &d, 4, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_rejects_zero_samples() {
        let mut rng = Rng::new(0);
        let d = disc(0.5, &mut rng);
        assert!(discriminate_mc(&Matrix::zeros(1, 4), &d, 0, &mut rng).is_err());
    }

    #[test]
    fn variance_by_hand() {
        let samples = [0.0, 1.0, 2.0]
            .iter()
            .map(|&v| McSample {
                logits: Matrix::from_rows(&[[v]]).unwrap(),
                trace: Trace {
                    inputs: vec![],
                    pre_activations: vec![],
                    masks: vec![],
                },
            })
            .collect();
        let out = McOutput::from_samples(samples).unwrap();
        assert_eq!(mc_output_variance(&out).unwrap(), vec![1.0]);

        let single = McOutput::from_samples(out.samples()[..1].to_vec()).unwrap();
        assert!(mc_output_variance(&single).is_err());
    }

    #[test]
    fn backward_reuses_the_forward_mask() {
        // Each sampled pass is backpropagated through its own mask: the
        // analytic gradient must match finite differences of the forward
        // replayed with exactly those masks.
        let mut rng = Rng::new(12);
        let d = disc(0.5, &mut rng);
        let x = random_input(3, 4, &mut rng);
        let out = discriminate_mc(&x, &d, 4, &mut rng).unwrap();
        for s in out.samples() {
            let g_out = Matrix::new(3, 1, vec![1.0; 3]).unwrap();
            let (g_x, _) = d.backward(&s.trace, &g_out).unwrap();
            let err = finite_difference_check(
                |p| {
                    let xp = Matrix::new(3, 4, p.to_vec()).unwrap();
                    d.forward_with_masks(&xp, s.masks()).unwrap().0.data().iter().sum()
                },
                x.data(),
                g_x.data(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
        // masks differ between passes, so the passes are distinct sub-networks
        assert!(out.samples().windows(2).any(|w| w[0].masks() != w[1].masks()));
    }

    #[test]
    fn dropped_hidden_units_get_no_weight_gradient() {
        let mut rng = Rng::new(21);
        let d = Discriminator::new(&[3, 10, 1], 0.5, &mut rng).unwrap();
        let x = random_input(5, 3, &mut rng);
        let out = discriminate_mc(&x, &d, 1, &mut rng).unwrap();
        let s = &out.samples()[0];
        let (_, grads) = d.backward(&s.trace, &Matrix::new(5, 1, vec![1.0; 5]).unwrap()).unwrap();
        for (unit, &keep) in s.masks()[0].keep().iter().enumerate() {
            if !keep {
                assert!(grads.weights[0].row(unit).iter().all(|&g| g == 0.0));
                assert_eq!(grads.biases[0][unit], 0.0);
                assert_eq!(grads.weights[1].get(0, unit), 0.0);
            }
        }
    }
}
