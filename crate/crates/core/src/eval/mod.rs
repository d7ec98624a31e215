//! Accuracy, proxy-A-distance, Nemenyi critical difference and the
//! sample-count sweep.

mod proxy;
mod stats;
mod sweep;

pub use proxy::{proxy_a_distance, proxy_a_from_error, ProbeConfig, ProxyAResult, PROBE_KIND};
pub use stats::{average_ranks, nemenyi_cd, nemenyi_q, RankTable};
pub use sweep::{
    run_cell, sweep_cells, sweep_k, write_cd_csv, CellResult, SummaryRow, SweepCell, SweepData,
    SweepTable, SWEEP_HEADER,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Model;

/// Fraction of rows whose arg-max prediction matches the label, using the
/// deterministic (dropout-free) forward path.
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::validation("accuracy needs a labeled dataset"))?;
    if ds.is_empty() {
        return Err(Error::validation("accuracy of an empty dataset is undefined"));
    }
    let pred = model.predict(ds.features())?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Proxy-A-distance between the extracted features of two datasets.
pub fn feature_distance(
    model: &Model,
    a: &Dataset,
    b: &Dataset,
    probe: &ProbeConfig,
) -> Result<ProxyAResult> {
    let fa = model.extractor.apply(a.features())?;
    let fb = model.extractor.apply(b.features())?;
    proxy_a_distance(&fa, &fb, probe)
}
