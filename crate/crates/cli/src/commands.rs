use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use dropdisc::adapt::{train_with_eval, Variant};
use dropdisc::data::{load_csv, save_csv, Dataset};
use dropdisc::diffcore::{run_suite, SuiteReport};
use dropdisc::eval::{
    accuracy, average_ranks, feature_distance, nemenyi_cd, proxy_a_distance, run_cell,
    sweep_cells, write_cd_csv, CellResult, RankTable, SweepCell, SweepData, SweepTable,
    PROBE_KIND, SWEEP_HEADER,
};
use dropdisc::network::{load_checkpoint, save_checkpoint, Model};

use crate::config::{check_metrics, ExperimentConfig};

pub const SOURCE_FILE: &str = "source.csv";
pub const TARGET_TRAIN_FILE: &str = "target_train.csv";
pub const TARGET_EVAL_FILE: &str = "target_eval.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Written once, after every other artifact of a run.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config: &'a ExperimentConfig,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub duration_secs: f64,
    pub finished_unix: u64,
    pub version: &'static str,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn write_file<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    body(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct DataFiles {
    pub source: PathBuf,
    pub target_train: PathBuf,
    pub target_eval: PathBuf,
}

impl DataFiles {
    pub fn in_dir(dir: &Path) -> Self {
        DataFiles {
            source: dir.join(SOURCE_FILE),
            target_train: dir.join(TARGET_TRAIN_FILE),
            target_eval: dir.join(TARGET_EVAL_FILE),
        }
    }

    pub fn load(&self) -> Result<SweepData> {
        let read = |p: &Path| -> Result<Dataset> {
            ensure!(p.is_file(), "data file {} does not exist", p.display());
            Ok(load_csv(p)?)
        };
        Ok(SweepData {
            source: read(&self.source)?,
            target_train: read(&self.target_train)?,
            target_eval: read(&self.target_eval)?,
        })
    }
}

/// Writes `source.csv`, `target_train.csv` (labels stripped) and
/// `target_eval.csv` into the experiment's data directory.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<DataFiles> {
    cfg.validate()?;
    let (source, target) = cfg.data.generate()?;
    let dir = cfg.data_dir();
    create_dir(&dir)?;
    let files = DataFiles::in_dir(&dir);
    save_csv(&source, &files.source)?;
    save_csv(&target.without_labels(), &files.target_train)?;
    save_csv(&target, &files.target_eval)?;
    Ok(files)
}

/// Trains one run per seed. Each run directory holds the checkpoint, the
/// history and a manifest.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = DataFiles::in_dir(&cfg.data_dir()).load()?;
    let variant = cfg.variant()?;
    let mut dirs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let start = Instant::now();
        let tc = cfg.train_config(seed)?;
        let (model, history) =
            train_with_eval(&data.source, &data.target_train, Some(&data.target_eval), &tc)
                .with_context(|| format!("training {variant} with seed {seed}"))?;
        let dir = cfg.run_dir(variant, seed);
        create_dir(&dir)?;
        save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
        write_file(&dir.join(HISTORY_FILE), |w| history.write_csv(w))?;
        write_manifest(
            &dir,
            &RunManifest {
                command: "train",
                config: cfg,
                seed: Some(seed),
                artifacts: vec![CHECKPOINT_FILE.into(), HISTORY_FILE.into()],
                duration_secs: start.elapsed().as_secs_f64(),
                finished_unix: unix_now(),
                version: env!("CARGO_PKG_VERSION"),
            },
        )?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "dataset,metric,value";

pub fn write_metrics<W: Write>(rows: &[MetricRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.dataset, r.metric, r.value)?;
    }
    Ok(())
}

/// Evaluates a checkpoint. `accuracy` is reported for the source and the
/// labeled target copy; `d_a` compares extracted features of the two and
/// `d_a_raw` compares the raw inputs, both with the linear probe.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    metrics: &[String],
) -> Result<Vec<MetricRow>> {
    check_metrics(metrics)?;
    let data = DataFiles::in_dir(&cfg.data_dir()).load()?;
    let model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    check_topology(&model, &data.source, checkpoint)?;
    let probe = cfg.eval.probe();
    let pair = "source_vs_target_eval";
    let mut rows = Vec::new();
    for m in metrics {
        match m.as_str() {
            "accuracy" => {
                for (name, ds) in [("source", &data.source), ("target_eval", &data.target_eval)] {
                    rows.push(MetricRow {
                        dataset: name.into(),
                        metric: m.clone(),
                        value: accuracy(&model, ds)?,
                    });
                }
            }
            "d_a" => rows.push(MetricRow {
                dataset: pair.into(),
                metric: m.clone(),
                value: feature_distance(&model, &data.source, &data.target_eval, &probe)?.d_a,
            }),
            "d_a_raw" => rows.push(MetricRow {
                dataset: pair.into(),
                metric: m.clone(),
                value: proxy_a_distance(
                    data.source.features(),
                    data.target_eval.features(),
                    &probe,
                )?
                .d_a,
            }),
            other => unreachable!("metric `{other}` passed validation"),
        }
    }
    Ok(rows)
}

fn check_topology(model: &Model, data: &Dataset, path: &Path) -> Result<()> {
    if model.extractor.input_dim() != data.dim() {
        bail!(
            "checkpoint {} expects {} input features but the data has {}",
            path.display(),
            model.extractor.input_dim(),
            data.dim()
        );
    }
    if model.n_classes() != data.n_classes() {
        bail!(
            "checkpoint {} predicts {} classes but the data has {}",
            path.display(),
            model.n_classes(),
            data.n_classes()
        );
    }
    Ok(())
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub table: SweepTable,
    pub baselines: Vec<CellResult>,
    pub ranks: Option<(RankTable, f64)>,
    /// Cells already present on disk and not retrained.
    pub skipped: usize,
    pub dir: PathBuf,
}

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const BASELINE_FILE: &str = "baselines.csv";
pub const CD_FILE: &str = "cd.csv";

/// Runs every sweep cell plus the configured baselines, one file per cell
/// under `cells/`. Cells whose file already exists are read back instead of
/// retrained. Aggregates are written only when every cell succeeded.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let data = DataFiles::in_dir(&cfg.data_dir()).load()?;
    let base = cfg.train_config(cfg.seeds[0])?;
    let probe = cfg.eval.probe();
    let baselines = cfg.sweep.baseline_variants()?;

    let mut cells = sweep_cells(&cfg.sweep.k_values, &cfg.seeds)?;
    let n_sweep = cells.len();
    for v in &baselines {
        cells.extend(cfg.seeds.iter().map(|&s| SweepCell::baseline(*v, s)));
    }

    let dir = cfg.sweep_dir();
    let cell_dir = dir.join("cells");
    create_dir(&cell_dir)?;
    let start = Instant::now();
    let mut results = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    let mut skipped = 0;
    for cell in &cells {
        let path = cell_dir.join(format!("{}.csv", cell.key()));
        if path.is_file() {
            results.push(read_cell(&path, *cell)?);
            skipped += 1;
            continue;
        }
        match run_cell(&base, *cell, &data, &probe) {
            Ok((r, _, _)) => {
                write_file(&path, |w| {
                    writeln!(w, "{SWEEP_HEADER}")?;
                    writeln!(w, "{}", r.csv_line())
                })?;
                results.push(r);
            }
            Err(e) => failures.push((*cell, e.to_string())),
        }
    }

    let (sweep_part, baseline_part): (Vec<_>, Vec<_>) = results
        .into_iter()
        .partition(|r| cells[..n_sweep].contains(&r.cell));
    let table = SweepTable {
        cells: sweep_part,
        failures,
    };
    if !table.failures.is_empty() {
        return Ok(SweepOutcome {
            table,
            baselines: baseline_part,
            ranks: None,
            skipped,
            dir,
        });
    }

    write_file(&dir.join(SWEEP_FILE), |w| table.write_csv(w))?;
    write_file(&dir.join(SUMMARY_FILE), |w| table.write_summary_csv(w))?;
    write_file(&dir.join(BASELINE_FILE), |w| {
        writeln!(w, "{SWEEP_HEADER}")?;
        for r in &baseline_part {
            writeln!(w, "{}", r.csv_line())?;
        }
        Ok(())
    })?;
    let mut artifacts = vec![
        SWEEP_FILE.to_string(),
        SUMMARY_FILE.to_string(),
        BASELINE_FILE.to_string(),
    ];

    let ranks = if baselines.is_empty() {
        None
    } else {
        let (rt, cd) = rank_methods(cfg, &baselines, &table, &baseline_part)?;
        write_file(&dir.join(CD_FILE), |w| write_cd_csv(&rt, cd, w))?;
        artifacts.push(CD_FILE.into());
        Some((rt, cd))
    };

    write_manifest(
        &dir,
        &RunManifest {
            command: "sweep",
            config: cfg,
            seed: None,
            artifacts,
            duration_secs: start.elapsed().as_secs_f64(),
            finished_unix: unix_now(),
            version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    Ok(SweepOutcome {
        table,
        baselines: baseline_part,
        ranks,
        skipped,
        dir,
    })
}

fn read_cell(path: &Path, expected: SweepCell) -> Result<CellResult> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let line = text
        .lines()
        .nth(1)
        .with_context(|| format!("{} has no result row", path.display()))?;
    let r = CellResult::parse_csv_line(line).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(
        r.cell == expected,
        "{} holds {:?}, expected {:?}",
        path.display(),
        r.cell,
        expected
    );
    Ok(r)
}

/// Ranks baselines and `cd3a` by target accuracy, one dataset per seed.
fn rank_methods(
    cfg: &ExperimentConfig,
    baselines: &[Variant],
    table: &SweepTable,
    baseline_cells: &[CellResult],
) -> Result<(RankTable, f64)> {
    let mut methods: Vec<Variant> = baselines.to_vec();
    methods.push(Variant::Cd3a);
    let lookup = |v: Variant, seed: u64| -> Result<f64> {
        table
            .cells
            .iter()
            .chain(baseline_cells)
            .find(|r| r.cell.variant == v && r.cell.seed == seed)
            .map(|r| r.acc_tgt)
            .with_context(|| format!("no {v} result for seed {seed}"))
    };
    let scores = cfg
        .seeds
        .iter()
        .map(|&s| methods.iter().map(|&v| lookup(v, s)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = methods.iter().map(|v| v.to_string()).collect();
    let rt = average_ranks(&names, &scores, true)?;
    let cd = nemenyi_cd(names.len(), cfg.seeds.len(), cfg.sweep.alpha)?;
    Ok((rt, cd))
}

pub fn cmd_grad_check(n_cases: usize, seed: u64) -> Result<SuiteReport> {
    Ok(run_suite(n_cases, seed, 1e-5, 1e-4)?)
}

/// Printed next to `d_a` values so the probe family is never ambiguous.
pub fn probe_note() -> String {
    format!("d_a uses a {PROBE_KIND} probe")
}
