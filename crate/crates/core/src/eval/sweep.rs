use std::io::Write;

use super::{accuracy, feature_distance, ProbeConfig, RankTable};
use crate::adapt::{train_with_eval, RunHistory, TrainConfig, Variant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Model;

pub const SWEEP_HEADER: &str = "variant,k,seed,acc_tgt,acc_src,d_A";

/// Source, unlabeled target training copy and labeled target evaluation copy.
#[derive(Debug, Clone)]
pub struct SweepData {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
}

/// One training run in a sweep. `k` is the fixed sample count for `d3a`,
/// the curriculum end for `cd3a`, 1 for `grl` and 0 for `source_only`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SweepCell {
    pub variant: Variant,
    pub k: usize,
    pub seed: u64,
}

impl SweepCell {
    pub fn baseline(variant: Variant, seed: u64) -> Self {
        let k = match variant {
            Variant::SourceOnly => 0,
            _ => 1,
        };
        SweepCell { variant, k, seed }
    }

    /// Stable identifier, usable as a file stem.
    pub fn key(&self) -> String {
        format!("{}-k{}-seed{}", self.variant, self.k, self.seed)
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.variant = self.variant;
        cfg.seed = self.seed;
        match self.variant {
            Variant::D3a => cfg.k_fixed = self.k,
            Variant::Cd3a => {
                cfg.k_max = Some(self.k);
                cfg.k_min = cfg.k_min.min(self.k);
            }
            _ => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellResult {
    pub cell: SweepCell,
    pub acc_tgt: f64,
    pub acc_src: f64,
    pub d_a: f64,
}

impl CellResult {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.cell.variant, self.cell.k, self.cell.seed, self.acc_tgt, self.acc_src, self.d_a
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || Error::Parse {
            line: 1,
            message: format!("malformed sweep row `{line}`"),
        };
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(CellResult {
            cell: SweepCell {
                variant: f[0].parse()?,
                k: f[1].parse().map_err(|_| bad())?,
                seed: f[2].parse().map_err(|_| bad())?,
            },
            acc_tgt: f[3].parse().map_err(|_| bad())?,
            acc_src: f[4].parse().map_err(|_| bad())?,
            d_a: f[5].parse().map_err(|_| bad())?,
        })
    }
}

/// `d3a` for every `(k, seed)` followed by one `cd3a` run per seed whose
/// curriculum ends at the largest `k`.
pub fn sweep_cells(k_values: &[usize], seeds: &[u64]) -> Result<Vec<SweepCell>> {
    if k_values.is_empty() || seeds.is_empty() {
        return Err(Error::validation("sweep needs non-empty k and seed lists"));
    }
    if k_values.contains(&0) {
        return Err(Error::validation("sample counts must be at least 1"));
    }
    let k_max = *k_values.iter().max().expect("non-empty");
    let mut cells = Vec::with_capacity(k_values.len() * seeds.len() + seeds.len());
    for &k in k_values {
        for &seed in seeds {
            cells.push(SweepCell {
                variant: Variant::D3a,
                k,
                seed,
            });
        }
    }
    for &seed in seeds {
        cells.push(SweepCell {
            variant: Variant::Cd3a,
            k: k_max,
            seed,
        });
    }
    Ok(cells)
}

/// Trains one cell and measures final accuracies and the feature-space
/// proxy-A-distance between source and target.
pub fn run_cell(
    base: &TrainConfig,
    cell: SweepCell,
    data: &SweepData,
    probe: &ProbeConfig,
) -> Result<(CellResult, Model, RunHistory)> {
    let cfg = cell.config(base);
    let (model, history) =
        train_with_eval(&data.source, &data.target_train, Some(&data.target_eval), &cfg)?;
    let result = CellResult {
        cell,
        acc_tgt: accuracy(&model, &data.target_eval)?,
        acc_src: accuracy(&model, &data.source)?,
        d_a: feature_distance(&model, &data.source, &data.target_eval, probe)?.d_a,
    };
    Ok((result, model, history))
}

/// Mean and sample standard deviation of one `(variant, k)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub k: usize,
    pub runs: usize,
    pub mean_acc_tgt: f64,
    pub std_acc_tgt: f64,
    pub mean_d_a: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub cells: Vec<CellResult>,
    pub failures: Vec<(SweepCell, String)>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{SWEEP_HEADER}")?;
        for c in &self.cells {
            writeln!(w, "{}", c.csv_line())?;
        }
        Ok(())
    }

    /// One row per `(variant, k)` in first-seen order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<((Variant, usize), Vec<&CellResult>)> = Vec::new();
        for c in &self.cells {
            let key = (c.cell.variant, c.cell.k);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(c),
                None => groups.push((key, vec![c])),
            }
        }
        groups
            .into_iter()
            .map(|((variant, k), cells)| {
                let n = cells.len() as f64;
                let mean = cells.iter().map(|c| c.acc_tgt).sum::<f64>() / n;
                let var = if cells.len() > 1 {
                    cells.iter().map(|c| (c.acc_tgt - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                SummaryRow {
                    variant,
                    k,
                    runs: cells.len(),
                    mean_acc_tgt: mean,
                    std_acc_tgt: var.sqrt(),
                    mean_d_a: cells.iter().map(|c| c.d_a).sum::<f64>() / n,
                }
            })
            .collect()
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "variant,k,runs,mean_acc_tgt,std_acc_tgt,mean_d_A")?;
        for r in self.summary() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.variant, r.k, r.runs, r.mean_acc_tgt, r.std_acc_tgt, r.mean_d_a
            )?;
        }
        Ok(())
    }
}

/// Runs every cell of [`sweep_cells`] in order. Failed cells are collected
/// in [`SweepTable::failures`] and the remaining cells still run.
pub fn sweep_k(
    base: &TrainConfig,
    k_values: &[usize],
    seeds: &[u64],
    data: &SweepData,
    probe: &ProbeConfig,
) -> Result<SweepTable> {
    base.validate()?;
    let mut table = SweepTable::default();
    for cell in sweep_cells(k_values, seeds)? {
        match run_cell(base, cell, data, probe) {
            Ok((r, _, _)) => table.cells.push(r),
            Err(e) => table.failures.push((cell, e.to_string())),
        }
    }
    Ok(table)
}

/// `method,avg_rank` rows followed by a `cd,<value>` line.
pub fn write_cd_csv<W: Write>(ranks: &RankTable, cd: f64, mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,avg_rank")?;
    for (m, r) in ranks.methods.iter().zip(&ranks.average) {
        writeln!(w, "{m},{r}")?;
    }
    writeln!(w, "cd,{cd}")
}
