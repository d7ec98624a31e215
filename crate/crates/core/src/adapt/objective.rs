use crate::data::DomainBatch;
use crate::diffcore::{grad_reverse, sigmoid_bce, softmax_cross_entropy, DropoutMask, Matrix, Rng, SgdState};
use crate::error::{Error, Result};
use crate::network::{discriminate_mc, McOutput, McSample, Model, StackGrads, Trace};

/// Value of the joint objective on one batch plus everything its backward
/// pass needs.
///
/// `loss_cls` is the mean cross-entropy over the source rows. `loss_dom` is
/// the per-sample BCE over all source and target rows, averaged over the
/// `K` sampled discriminators; it is `None` when the model has no
/// discriminator.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub loss_cls: f64,
    pub loss_dom: Option<f64>,
    n_source: usize,
    extractor_trace: Trace,
    classifier_trace: Trace,
    grad_logits: Matrix,
    domain: Option<DomainTerm>,
}

#[derive(Debug, Clone)]
struct DomainTerm {
    mc: McOutput,
    /// Per-sample BCE gradients, already divided by `K`.
    grad_logits: Vec<Matrix>,
}

/// Gradients of the two loss terms before reversal.
#[derive(Debug, Clone)]
pub struct LossGradients {
    /// `∂L_c/∂features`, zero on target rows (`N × feature_dim`).
    pub features_cls: Matrix,
    /// `∂L_d/∂features`, summed over the sampled discriminators
    /// (`N × feature_dim`); `None` without a discriminator.
    pub features_dom: Option<Matrix>,
    pub classifier: StackGrads,
    pub discriminator: Option<StackGrads>,
}

/// Parameter gradients that one training step applies.
#[derive(Debug, Clone)]
pub struct StepGradients {
    /// `∂L_c/∂θ_f` plus the reversed `λ · ∂L_d/∂θ_f`.
    pub extractor: StackGrads,
    pub classifier: StackGrads,
    pub discriminator: Option<StackGrads>,
}

/// Samples `k` sets of discriminator masks and evaluates the joint loss.
pub fn joint_loss(batch: &DomainBatch, model: &Model, k: usize, rng: &mut Rng) -> Result<JointLoss> {
    let masks = match &model.discriminator {
        Some(d) => {
            if k == 0 {
                return Err(Error::validation("number of MC samples must be at least 1"));
            }
            (0..k).map(|_| d.sample_masks(rng)).collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    joint_loss_with_masks(batch, model, &masks)
}

/// Joint loss with explicitly supplied masks, one set per sampled
/// discriminator. Ignored (and must be empty) when the model has no
/// discriminator.
pub fn joint_loss_with_masks(
    batch: &DomainBatch,
    model: &Model,
    masks: &[Vec<DropoutMask>],
) -> Result<JointLoss> {
    let n_source = batch.source.rows();
    if n_source == 0 {
        return Err(Error::validation("classification term needs source rows"));
    }
    if batch.labels.len() != n_source {
        return Err(Error::Dimension {
            op: "joint_loss",
            left: batch.source.shape(),
            right: (batch.labels.len(), 1),
        });
    }

    let input = match &model.discriminator {
        Some(_) => batch.source.vstack(&batch.target)?,
        None => batch.source.clone(),
    };
    let (features, extractor_trace) = model.extractor.forward(&input)?;
    let source_features = features.slice_rows(0, n_source);
    let (logits, classifier_trace) = model.classifier.forward(&source_features)?;
    let (loss_cls, grad_logits) = softmax_cross_entropy(&logits, &batch.labels)?;

    let domain = match &model.discriminator {
        Some(disc) => {
            if masks.is_empty() {
                return Err(Error::validation("number of MC samples must be at least 1"));
            }
            let targets = batch.domain_labels();
            let k = masks.len() as f64;
            let mut samples = Vec::with_capacity(masks.len());
            let mut grads = Vec::with_capacity(masks.len());
            let mut total = 0.0;
            for m in masks {
                let (logits, trace) = disc.forward_with_masks(&features, m)?;
                let (loss, grad) = sigmoid_bce(&logits, &targets)?;
                total += loss;
                grads.push(grad.scale(1.0 / k));
                samples.push(McSample { logits, trace });
            }
            Some((
                total / k,
                DomainTerm {
                    mc: McOutput::from_samples(samples)?,
                    grad_logits: grads,
                },
            ))
        }
        None if masks.is_empty() => None,
        None => {
            return Err(Error::validation(
                "masks supplied for a model without a discriminator",
            ))
        }
    };

    let (loss_dom, domain) = match domain {
        Some((l, d)) => (Some(l), Some(d)),
        None => (None, None),
    };
    Ok(JointLoss {
        loss_cls,
        loss_dom,
        n_source,
        extractor_trace,
        classifier_trace,
        grad_logits,
        domain,
    })
}

impl JointLoss {
    /// The sampled discriminator passes, if any.
    pub fn mc_output(&self) -> Option<&McOutput> {
        self.domain.as_ref().map(|d| &d.mc)
    }

    /// Backpropagates both loss terms down to the features. Each sampled
    /// discriminator is backpropagated through its own masks.
    pub fn loss_gradients(&self, model: &Model) -> Result<LossGradients> {
        let (g_src, classifier) = model
            .classifier
            .backward(&self.classifier_trace, &self.grad_logits)?;
        let n_rows = match &self.domain {
            Some(d) => d.mc.logits(0).rows(),
            None => self.n_source,
        };
        let mut features_cls = Matrix::zeros(n_rows, g_src.cols());
        features_cls.data_mut()[..g_src.data().len()].copy_from_slice(g_src.data());

        let (features_dom, discriminator) = match (&self.domain, &model.discriminator) {
            (Some(term), Some(disc)) => {
                let mut g_feat = Matrix::zeros(n_rows, g_src.cols());
                let mut g_disc = StackGrads::zeros_like(disc.stack().layers());
                for (sample, g_logits) in term.mc.samples().iter().zip(&term.grad_logits) {
                    let (g, grads) = disc.backward(&sample.trace, g_logits)?;
                    g_feat.add_assign(&g)?;
                    g_disc.add_assign(&grads)?;
                }
                (Some(g_feat), Some(g_disc))
            }
            (None, _) => (None, None),
            (Some(_), None) => {
                return Err(Error::State(
                    "loss has a domain term but the model has no discriminator".into(),
                ))
            }
        };
        Ok(LossGradients {
            features_cls,
            features_dom,
            classifier,
            discriminator,
        })
    }

    /// Extractor parameter gradients for an arbitrary feature gradient.
    pub fn extractor_gradients(&self, model: &Model, grad_features: &Matrix) -> Result<StackGrads> {
        Ok(model
            .extractor
            .backward(&self.extractor_trace, grad_features)?
            .1)
    }

    /// Gradients applied by one training step: the domain gradient reaches
    /// the extractor through the reversal layer, scaled by `-λ`.
    pub fn backward(&self, model: &Model, lambda: f64) -> Result<StepGradients> {
        let parts = self.loss_gradients(model)?;
        let mut g_features = parts.features_cls;
        if let Some(g_dom) = &parts.features_dom {
            g_features.add_assign(&grad_reverse(g_dom, lambda))?;
        }
        Ok(StepGradients {
            extractor: self.extractor_gradients(model, &g_features)?,
            classifier: parts.classifier,
            discriminator: parts.discriminator,
        })
    }
}

/// One SGD state per parameter group.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub extractor: SgdState,
    pub classifier: SgdState,
    pub discriminator: SgdState,
}

impl Optimizers {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        let sgd = SgdState::new(learning_rate, momentum)?;
        Ok(Optimizers {
            extractor: sgd.clone(),
            classifier: sgd.clone(),
            discriminator: sgd,
        })
    }
}

/// Losses observed at one step, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_cls: f64,
    pub loss_dom: Option<f64>,
}

/// Applies the gradients of [`JointLoss::backward`] to all three networks
/// simultaneously.
pub fn apply_gradients(model: &mut Model, grads: &StepGradients, opt: &mut Optimizers) -> Result<()> {
    opt.extractor
        .step(&mut model.extractor.stack_mut().param_slices_mut(), &grads.extractor.slices())?;
    opt.classifier
        .step(&mut model.classifier.stack_mut().param_slices_mut(), &grads.classifier.slices())?;
    if let (Some(disc), Some(g)) = (model.discriminator.as_mut(), &grads.discriminator) {
        opt.discriminator
            .step(&mut disc.stack_mut().param_slices_mut(), &g.slices())?;
    }
    Ok(())
}

/// One simultaneous update of extractor, classifier and discriminator.
pub fn train_step(
    batch: &DomainBatch,
    model: &mut Model,
    k: usize,
    lambda: f64,
    opt: &mut Optimizers,
    rng: &mut Rng,
) -> Result<StepLosses> {
    let loss = joint_loss(batch, model, k, rng)?;
    let grads = loss.backward(model, lambda)?;
    apply_gradients(model, &grads, opt)?;
    Ok(StepLosses {
        loss_cls: loss.loss_cls,
        loss_dom: loss.loss_dom,
    })
}

/// Summary of the `K` reversed feature gradients on one batch.
#[derive(Debug, Clone)]
pub struct GradientStats {
    pub k: usize,
    /// Mean over `j` of the reversed feature gradients.
    pub mean_gradient: Matrix,
    /// Frobenius norm of `mean_gradient`.
    pub mean_norm: f64,
    /// Unbiased variance across `j`, averaged over all feature components.
    pub variance: f64,
    /// Frobenius norm of each sampled discriminator's reversed gradient.
    pub sample_norms: Vec<f64>,
}

/// Reversed feature gradients of each sampled discriminator's own BCE,
/// without touching any parameters.
pub fn gradient_distribution(
    batch: &DomainBatch,
    model: &Model,
    k: usize,
    lambda: f64,
    rng: &mut Rng,
) -> Result<GradientStats> {
    if k < 2 {
        return Err(Error::validation(format!(
            "gradient distribution needs K >= 2, got {k}"
        )));
    }
    let disc = model
        .discriminator
        .as_ref()
        .ok_or_else(|| Error::validation("model has no discriminator"))?;
    let input = batch.source.vstack(&batch.target)?;
    let features = model.extractor.apply(&input)?;
    let targets = batch.domain_labels();
    let mc = discriminate_mc(&features, disc, k, rng)?;

    let mut reversed = Vec::with_capacity(k);
    for s in mc.samples() {
        let (_, g_logits) = sigmoid_bce(&s.logits, &targets)?;
        let (g_feat, _) = disc.backward(&s.trace, &g_logits)?;
        reversed.push(grad_reverse(&g_feat, lambda));
    }

    let mut sum = Matrix::zeros(features.rows(), features.cols());
    for r in &reversed {
        sum.add_assign(r)?;
    }
    let mean_gradient = sum.scale(1.0 / k as f64);
    let n_comp = mean_gradient.data().len();
    let variance = (0..n_comp)
        .map(|i| {
            let vals: Vec<f64> = reversed.iter().map(|r| r.data()[i]).collect();
            crate::network::sample_variance(&vals)
        })
        .sum::<f64>()
        / n_comp.max(1) as f64;

    Ok(GradientStats {
        k,
        mean_norm: mean_gradient.frobenius_norm(),
        mean_gradient,
        variance,
        sample_norms: reversed.iter().map(Matrix::frobenius_norm).collect(),
    })
}
