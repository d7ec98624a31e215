//! Config-driven experiments on top of `dropdisc`: data generation,
//! training, evaluation, sample-count sweeps and the gradient check.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_eval, cmd_gen_data, cmd_grad_check, cmd_sweep, cmd_train};
pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "dropdisc", version, about = "Dropout-discriminator domain adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source.csv, target_train.csv and target_eval.csv.
    GenData(Common),
    /// Train one run per seed.
    Train(Common),
    /// Evaluate a checkpoint on the experiment's data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated metric names; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Write the metrics CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep the number of sampled discriminators.
    Sweep(Common),
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        cases: usize,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
}

impl Common {
    /// Loads the config and applies flag overrides, then re-validates.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(v) = &self.variant {
            cfg.train.variant = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Executes one parsed command, printing a short report to `out`.
pub fn run<W: Write>(cli: Cli, mut out: W) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let files = cmd_gen_data(&c.resolve()?)?;
            for p in [&files.source, &files.target_train, &files.target_eval] {
                writeln!(out, "wrote {}", p.display())?;
            }
        }
        Command::Train(c) => {
            for dir in cmd_train(&c.resolve()?)? {
                writeln!(out, "wrote {}", dir.display())?;
            }
        }
        Command::Eval { common, checkpoint, metrics, output } => {
            let cfg = common.resolve()?;
            let metrics = metrics.unwrap_or_else(|| cfg.eval.metrics.clone());
            let rows = cmd_eval(&cfg, &checkpoint, &metrics)?;
            match output {
                Some(path) => {
                    let mut buf = Vec::new();
                    commands::write_metrics(&rows, &mut buf)?;
                    std::fs::write(&path, buf)
                        .map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
                    writeln!(out, "wrote {}", path.display())?;
                }
                None => commands::write_metrics(&rows, &mut out)?,
            }
            if metrics.iter().any(|m| m.starts_with("d_a")) {
                eprintln!("{}", commands::probe_note());
            }
        }
        Command::Sweep(c) => {
            let o = cmd_sweep(&c.resolve()?)?;
            writeln!(
                out,
                "{} cells done ({} reused) in {}",
                o.table.cells.len() + o.baselines.len(),
                o.skipped,
                o.dir.display()
            )?;
            if !o.table.failures.is_empty() {
                for (cell, msg) in &o.table.failures {
                    eprintln!("failed {}: {msg}", cell.key());
                }
                bail!("{} sweep cells failed", o.table.failures.len());
            }
            for r in o.table.summary() {
                writeln!(
                    out,
                    "{:>11} k={:<3} acc_tgt {:.4} ± {:.4}  d_A {:.4}",
                    r.variant.to_string(),
                    r.k,
                    r.mean_acc_tgt,
                    r.std_acc_tgt,
                    r.mean_d_a
                )?;
            }
            if let Some((rt, cd)) = &o.ranks {
                for (m, r) in rt.methods.iter().zip(&rt.average) {
                    writeln!(out, "{m:>11} avg rank {r:.3}")?;
                }
                writeln!(out, "critical difference {cd:.4}")?;
            }
        }
        Command::GradCheck { seed, cases } => {
            let report = cmd_grad_check(cases, seed)?;
            writeln!(
                out,
                "{} cases, max relative error {:.3e} (tolerance {:.0e})",
                report.cases.len(),
                report.max_rel_error(),
                report.tolerance
            )?;
            if !report.passed() {
                for c in report.cases.iter().filter(|c| c.max_rel_error >= report.tolerance) {
                    writeln!(out, "  {} {:.3e}", c.name, c.max_rel_error)?;
                }
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
