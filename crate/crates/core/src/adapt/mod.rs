//! Training engine: joint objective, schedules and the adaptation loop.
//!
//! Four variants share one code path:
//!
//! | variant       | discriminator | samples per step        |
//! |---------------|---------------|-------------------------|
//! | `source_only` | none          | –                       |
//! | `grl`         | dropout 0     | 1                       |
//! | `d3a`         | dropout `d`   | fixed `K`               |
//! | `cd3a`        | dropout `d`   | `K(t)` from `k_min` to `k_max` |

mod objective;
mod schedule;

pub use objective::{
    apply_gradients, gradient_distribution, joint_loss, joint_loss_with_masks, train_step,
    GradientStats, JointLoss, LossGradients, Optimizers, StepGradients, StepLosses,
};
pub use schedule::{curriculum_k, lambda_at, CurriculumSchedule, LambdaSchedule};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::data::{batch_iter, steps_per_epoch, Dataset};
use crate::diffcore::Rng;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::network::{Model, Topology};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    SourceOnly,
    Grl,
    D3a,
    Cd3a,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SourceOnly, Variant::Grl, Variant::D3a, Variant::Cd3a];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Grl => "grl",
            Variant::D3a => "d3a",
            Variant::Cd3a => "cd3a",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown variant `{s}` (expected source_only, grl, d3a or cd3a)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Samples per step for `d3a`.
    pub k_fixed: usize,
    /// Curriculum start for `cd3a`.
    pub k_min: usize,
    /// Curriculum end for `cd3a`; defaults to the number of classes.
    pub k_max: Option<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda: LambdaSchedule,
    /// Accuracy is recorded every `eval_every` steps and at the last step.
    pub eval_every: usize,
    pub extractor_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Cd3a,
            k_fixed: 2,
            k_min: 1,
            k_max: None,
            dropout: 0.5,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            lambda: LambdaSchedule::default(),
            eval_every: 100,
            extractor_widths: vec![32],
            discriminator_widths: vec![32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::validation("eval_every must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.extractor_widths.contains(&0) || self.discriminator_widths.contains(&0) {
            return Err(Error::validation("layer widths must be positive"));
        }
        self.lambda.validate()?;
        crate::diffcore::SgdState::new(self.learning_rate, self.momentum)?;
        match self.variant {
            Variant::D3a if self.k_fixed == 0 => {
                Err(Error::validation("d3a needs k_fixed >= 1"))
            }
            Variant::Cd3a => {
                let k_max = self.k_max.unwrap_or(self.k_min);
                CurriculumSchedule::new(self.k_min, k_max.max(self.k_min), 0)?;
                if let Some(k) = self.k_max {
                    if k < self.k_min {
                        return Err(Error::validation(format!(
                            "k_max {k} is below k_min {}",
                            self.k_min
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Dropout rate the discriminator is built with, or `None` when there
    /// is no discriminator.
    pub fn discriminator_dropout(&self) -> Option<f64> {
        match self.variant {
            Variant::SourceOnly => None,
            Variant::Grl => Some(0.0),
            Variant::D3a | Variant::Cd3a => Some(self.dropout),
        }
    }

    pub fn topology(&self, input_dim: usize, n_classes: usize) -> Topology {
        Topology {
            input_dim,
            extractor: self.extractor_widths.clone(),
            discriminator: self.discriminator_widths.clone(),
            n_classes,
        }
    }

    /// Per-step sample count source for a run of `total_steps` steps.
    pub fn k_plan(&self, n_classes: usize, total_steps: u64) -> Result<KPlan> {
        Ok(match self.variant {
            Variant::SourceOnly => KPlan::None,
            Variant::Grl => KPlan::Fixed(1),
            Variant::D3a => KPlan::Fixed(self.k_fixed),
            Variant::Cd3a => {
                let k_max = self.k_max.unwrap_or(n_classes.max(self.k_min));
                // the last step index is total - 1, which must reach k_max
                KPlan::Curriculum(CurriculumSchedule::new(
                    self.k_min,
                    k_max,
                    total_steps.saturating_sub(1),
                )?)
            }
        })
    }
}

/// How many discriminator samples each step draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KPlan {
    None,
    Fixed(usize),
    Curriculum(CurriculumSchedule),
}

impl KPlan {
    pub fn k_at(&self, step: u64) -> Result<usize> {
        match self {
            KPlan::None => Ok(0),
            KPlan::Fixed(k) => Ok(*k),
            KPlan::Curriculum(s) => curriculum_k(step as i64, s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_dom: Option<f64>,
    pub k: usize,
    pub lambda: f64,
    pub acc_src: Option<f64>,
    pub acc_tgt: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<StepRecord>,
}

pub const HISTORY_HEADER: &str = "step,epoch,loss_cls,loss_dom,k,lambda,acc_src,acc_tgt";

impl RunHistory {
    fn push(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step <= last.step {
                return Err(Error::State(format!(
                    "step {} recorded after step {}",
                    rec.step, last.step
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// Last recorded target accuracy.
    pub fn final_acc_tgt(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.acc_tgt)
    }

    pub fn final_acc_src(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.acc_src)
    }

    /// CSV with [`HISTORY_HEADER`]; optional fields are left empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        writeln!(w, "{HISTORY_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.loss_cls,
                opt(r.loss_dom),
                r.k,
                r.lambda,
                opt(r.acc_src),
                opt(r.acc_tgt)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Trains without a labeled target copy; `acc_tgt` stays empty.
pub fn train(source: &Dataset, target: &Dataset, cfg: &TrainConfig) -> Result<(Model, RunHistory)> {
    train_with_eval(source, target, None, cfg)
}

/// Full training run. `target` must be unlabeled-style training data (labels,
/// if present, are never read); `target_eval` is a labeled copy used only for
/// the periodic `acc_tgt` column.
pub fn train_with_eval(
    source: &Dataset,
    target: &Dataset,
    target_eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model, RunHistory)> {
    cfg.validate()?;
    if source.labels().is_none() {
        return Err(Error::validation("source dataset must be labeled"));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::validation("source and target datasets must be non-empty"));
    }
    if source.dim() != target.dim() {
        return Err(Error::validation(format!(
            "source has {} features, target has {}",
            source.dim(),
            target.dim()
        )));
    }
    if cfg.batch_size > source.len().min(target.len()) {
        return Err(Error::validation(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            source.len().min(target.len())
        )));
    }
    if let Some(te) = target_eval {
        if te.labels().is_none() || te.dim() != source.dim() {
            return Err(Error::validation(
                "evaluation target must be labeled and match the source dimension",
            ));
        }
    }
    // unsupervised setting: target labels never enter training
    let target = target.without_labels();

    let n_classes = source.n_classes();
    let steps_per_epoch = steps_per_epoch(source.len(), target.len(), cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let plan = cfg.k_plan(n_classes, total_steps)?;

    let mut init_rng = Rng::with_stream(cfg.seed, STREAM_INIT);
    let mut shuffle_rng = Rng::with_stream(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = Rng::with_stream(cfg.seed, STREAM_DROPOUT);

    let topo = cfg.topology(source.dim(), n_classes);
    let mut model = Model::new(&topo, cfg.discriminator_dropout(), &mut init_rng)?;
    let mut opt = Optimizers::new(cfg.learning_rate, cfg.momentum)?;
    let mut history = RunHistory::default();

    let last = total_steps - 1;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for batch in batch_iter(source, &target, cfg.batch_size, &mut shuffle_rng, true)? {
            let k = plan.k_at(step)?;
            let lambda = match plan {
                KPlan::None => 0.0,
                _ => lambda_at(step as f64 / last.max(1) as f64, &cfg.lambda)?,
            };
            let losses = train_step(&batch, &mut model, k, lambda, &mut opt, &mut dropout_rng)?;
            if !losses.loss_cls.is_finite() || losses.loss_dom.is_some_and(|l| !l.is_finite()) {
                return Err(Error::State(format!("loss diverged at step {step}")));
            }

            let evaluate = (step + 1) % cfg.eval_every as u64 == 0 || step == last;
            let (acc_src, acc_tgt) = if evaluate {
                (
                    Some(accuracy(&model, source)?),
                    target_eval.map(|te| accuracy(&model, te)).transpose()?,
                )
            } else {
                (None, None)
            };
            history.push(StepRecord {
                step,
                epoch,
                loss_cls: losses.loss_cls,
                loss_dom: losses.loss_dom,
                k,
                lambda,
                acc_src,
                acc_tgt,
            })?;
            step += 1;
        }
    }
    Ok((model, history))
}
