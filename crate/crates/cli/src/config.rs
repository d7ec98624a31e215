use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use dropdisc::adapt::{LambdaSchedule, TrainConfig, Variant};
use dropdisc::data::{apply_shift, make_blobs, make_two_moons, Dataset, ShiftSpec};
use dropdisc::diffcore::Rng;
use dropdisc::eval::ProbeConfig;

/// Everything one experiment needs, read from a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    TwoMoons,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub generator: Generator,
    pub n: usize,
    /// Two-moons noise level.
    #[serde(default)]
    pub noise: f64,
    /// Blob centers, one per class.
    #[serde(default)]
    pub means: Vec<Vec<f64>>,
    /// Blob standard deviation.
    #[serde(default)]
    pub std: f64,
    #[serde(default)]
    pub seed: u64,
    pub shift: ShiftConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftConfig {
    Rotation { degrees: f64 },
    Translation { offset: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub variant: String,
    pub k_fixed: usize,
    pub k_min: usize,
    pub k_max: Option<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lambda_max: f64,
    pub eval_every: usize,
    pub extractor_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSpec {
            variant: c.variant.to_string(),
            k_fixed: c.k_fixed,
            k_min: c.k_min,
            k_max: c.k_max,
            dropout: c.dropout,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            batch_size: c.batch_size,
            epochs: c.epochs,
            gamma: c.lambda.gamma,
            lambda_max: c.lambda.lambda_max,
            eval_every: c.eval_every,
            extractor_widths: c.extractor_widths,
            discriminator_widths: c.discriminator_widths,
        }
    }
}

pub const METRICS: [&str; 3] = ["accuracy", "d_a", "d_a_raw"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub metrics: Vec<String>,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub probe_seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        let p = ProbeConfig::default();
        EvalSpec {
            metrics: vec!["accuracy".into(), "d_a".into()],
            probe_epochs: p.epochs,
            probe_learning_rate: p.learning_rate,
            probe_seed: p.seed,
        }
    }
}

impl EvalSpec {
    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            learning_rate: self.probe_learning_rate,
            seed: self.probe_seed,
        }
    }
}

pub fn check_metrics(metrics: &[String]) -> Result<()> {
    ensure!(!metrics.is_empty(), "metric list is empty");
    for m in metrics {
        if !METRICS.contains(&m.as_str()) {
            bail!("unknown metric `{m}`; valid metrics: {}", METRICS.join(", "));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub k_values: Vec<usize>,
    /// Methods ranked against `cd3a` in the critical-difference table.
    pub baselines: Vec<String>,
    pub alpha: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            k_values: vec![1, 2, 4, 8, 16],
            baselines: vec!["source_only".into(), "grl".into()],
            alpha: 0.05,
        }
    }
}

impl SweepSpec {
    pub fn baseline_variants(&self) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for b in &self.baselines {
            let v: Variant = b.parse()?;
            ensure!(
                matches!(v, Variant::SourceOnly | Variant::Grl),
                "sweep baseline must be source_only or grl, got `{b}`"
            );
            ensure!(!out.contains(&v), "duplicate sweep baseline `{b}`");
            out.push(v);
        }
        Ok(out)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Checks every section; nothing is written before this passes.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.experiment.is_empty()
                && self
                    .experiment
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
            "experiment name must be non-empty and use only letters, digits, `-`, `_` or `.`"
        );
        ensure!(!self.seeds.is_empty(), "seed list is empty");
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        ensure!(seen.len() == self.seeds.len(), "seed list has duplicates");
        self.data.validate()?;
        self.train_config(self.seeds[0])?.validate()?;
        check_metrics(&self.eval.metrics)?;
        let probe = self.eval.probe();
        ensure!(
            probe.epochs > 0 && probe.learning_rate > 0.0,
            "probe needs epochs >= 1 and a positive learning rate"
        );
        ensure!(!self.sweep.k_values.is_empty(), "sweep k_values is empty");
        ensure!(
            !self.sweep.k_values.contains(&0),
            "sweep k_values must be at least 1"
        );
        ensure!(
            [0.05, 0.10].contains(&self.sweep.alpha),
            "sweep alpha must be 0.05 or 0.10"
        );
        self.sweep.baseline_variants()?;
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(self.train.variant.parse()?)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            variant: self.variant()?,
            k_fixed: t.k_fixed,
            k_min: t.k_min,
            k_max: t.k_max,
            dropout: t.dropout,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed,
            lambda: LambdaSchedule {
                gamma: t.gamma,
                lambda_max: t.lambda_max,
            },
            eval_every: t.eval_every,
            extractor_widths: t.extractor_widths.clone(),
            discriminator_widths: t.discriminator_widths.clone(),
        })
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out.join(&self.experiment)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.experiment_dir().join("data")
    }

    pub fn run_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.experiment_dir().join(format!("{variant}-seed{seed}"))
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.experiment_dir().join("sweep")
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n >= 2, "data.n must be at least 2");
        match self.generator {
            Generator::TwoMoons => {
                ensure!(self.noise >= 0.0 && self.noise.is_finite(), "data.noise must be >= 0");
            }
            Generator::Blobs => {
                ensure!(self.means.len() >= 2, "blobs need at least 2 class means");
                ensure!(self.std >= 0.0 && self.std.is_finite(), "data.std must be >= 0");
                let dim = self.means[0].len();
                ensure!(
                    dim > 0 && self.means.iter().all(|m| m.len() == dim),
                    "all blob means must share one non-zero dimension"
                );
            }
        }
        let dim = self.dim();
        match &self.shift {
            ShiftConfig::Rotation { degrees } => {
                ensure!(dim == 2, "rotation needs 2-D features, data has {dim}");
                ensure!(degrees.is_finite(), "rotation angle must be finite");
            }
            ShiftConfig::Translation { offset } => {
                ensure!(
                    offset.len() == dim,
                    "translation offset has {} entries, data has {dim} features",
                    offset.len()
                );
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.generator {
            Generator::TwoMoons => 2,
            Generator::Blobs => self.means.first().map_or(0, Vec::len),
        }
    }

    pub fn shift_spec(&self) -> Result<ShiftSpec> {
        Ok(match &self.shift {
            ShiftConfig::Rotation { degrees } => ShiftSpec::rotation(*degrees)?,
            ShiftConfig::Translation { offset } => ShiftSpec::Translation {
                offset: offset.clone(),
            },
        })
    }

    /// Labeled source sample and its shifted, still labeled, target copy.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let mut rng = Rng::with_stream(self.seed, 0);
        let source = match self.generator {
            Generator::TwoMoons => make_two_moons(self.n, self.noise, &mut rng)?,
            Generator::Blobs => make_blobs(self.n, self.means.len(), &self.means, self.std, &mut rng)?,
        };
        let target = apply_shift(&source, &self.shift_spec()?)?;
        Ok((source, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment = "moons"
[data]
generator = "two_moons"
n = 100
noise = 0.1
shift = { kind = "rotation", degrees = 30.0 }
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.train_config(3).unwrap(), TrainConfig { seed: 3, ..TrainConfig::default() });
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let typo = MINIMAL.replace("noise", "noize");
        assert!(toml::from_str::<ExperimentConfig>(&typo).is_err());

        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());

        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.train.variant = "mada".into();
        assert!(cfg.validate().is_err());

        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.eval.metrics = vec!["f1".into()];
        let msg = format!("{:#}", cfg.validate().unwrap_err());
        assert!(msg.contains("accuracy, d_a, d_a_raw"), "{msg}");

        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.data.shift = ShiftConfig::Translation { offset: vec![1.0] };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_rotation_target_equals_source() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.data.shift = ShiftConfig::Rotation { degrees: 0.0 };
        let (s, t) = cfg.data.generate().unwrap();
        assert_eq!(s.features(), t.features());
    }
}
