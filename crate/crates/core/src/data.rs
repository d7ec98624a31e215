//! Synthetic domain-shift datasets, CSV I/O and paired source/target batching.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffcore::{Matrix, Rng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Discriminator target: 0 for source rows, 1 for target rows.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::validation(format!("unknown domain `{other}`"))),
        }
    }
}

/// Feature rows with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    domain: Domain,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        domain: Domain,
        n_classes: usize,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Dimension {
                    op: "dataset_labels",
                    left: features.shape(),
                    right: (l.len(), 1),
                });
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= n_classes) {
                return Err(Error::validation(format!(
                    "label {bad} out of range for {n_classes} classes"
                )));
            }
        }
        if !features.is_finite() {
            return Err(Error::validation("dataset features must be finite"));
        }
        Ok(Dataset {
            features,
            labels,
            domain,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Copy without labels, as used for unsupervised target training.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_domain(&self, domain: Domain) -> Dataset {
        Dataset {
            domain,
            ..self.clone()
        }
    }

    /// Rows reordered by `idx`.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
            n_classes: self.n_classes,
        }
    }

    /// Row count per class (empty when unlabeled).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        if let Some(l) = &self.labels {
            for &y in l {
                counts[y] += 1;
            }
        }
        counts
    }
}

/// Interleaved half-circles: class 0 on the unit upper half-circle around
/// the origin, class 1 on the lower half-circle around `(1, 0.5)`. Rows are
/// shuffled; Gaussian noise with standard deviation `noise` is added.
pub fn make_two_moons(n: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::validation(format!("two moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::validation(format!("noise must be >= 0, got {noise}")));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let angle = |i: usize, m: usize| if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 };

    let mut rows = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        rows.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        rows.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    if noise > 0.0 {
        for (p, _) in rows.iter_mut() {
            p[0] += noise * rng.normal();
            p[1] += noise * rng.normal();
        }
    }
    rng.shuffle(&mut rows);

    let features = Matrix::new(n, 2, rows.iter().flat_map(|(p, _)| *p).collect())?;
    let labels = rows.iter().map(|&(_, y)| y).collect();
    Dataset::new(features, Some(labels), Domain::Source, 2)
}

/// Isotropic Gaussian blobs, one per class mean, `n / n_classes` rows each
/// (the remainder goes to the first classes). Rows are shuffled.
pub fn make_blobs(
    n: usize,
    n_classes: usize,
    means: &[Vec<f64>],
    std: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if means.len() != n_classes {
        return Err(Error::validation(format!(
            "{} means given for {n_classes} classes",
            means.len()
        )));
    }
    if n_classes < 2 || n < n_classes {
        return Err(Error::validation(format!(
            "need n >= n_classes >= 2, got n = {n}, n_classes = {n_classes}"
        )));
    }
    let dim = means[0].len();
    if dim == 0 || means.iter().any(|m| m.len() != dim) {
        return Err(Error::validation("class means must share a non-zero dimension"));
    }
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::validation(format!("std must be >= 0, got {std}")));
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let point: Vec<f64> = means[class].iter().map(|&m| m + std * rng.normal()).collect();
        rows.push((point, class));
    }
    rng.shuffle(&mut rows);

    let features = Matrix::new(n, dim, rows.iter().flat_map(|(p, _)| p.clone()).collect())?;
    let labels = rows.iter().map(|&(_, y)| y).collect();
    Dataset::new(features, Some(labels), Domain::Source, n_classes)
}

/// Parametric domain shift.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftSpec {
    /// Counter-clockwise rotation about the origin, in degrees.
    Rotation { degrees: f64 },
    Translation { offset: Vec<f64> },
}

impl ShiftSpec {
    /// Rotation with the angle wrapped into `(-180, 180]`.
    pub fn rotation(degrees: f64) -> Result<Self> {
        if !degrees.is_finite() {
            return Err(Error::validation("rotation angle must be finite"));
        }
        let mut a = degrees % 360.0;
        if a > 180.0 {
            a -= 360.0;
        } else if a <= -180.0 {
            a += 360.0;
        }
        Ok(ShiftSpec::Rotation { degrees: a })
    }
}

/// Applies `spec` to every row and tags the result as target-domain data.
/// Labels are carried over; strip them with [`Dataset::without_labels`] for
/// the training copy.
pub fn apply_shift(ds: &Dataset, spec: &ShiftSpec) -> Result<Dataset> {
    let mut features = ds.features.clone();
    match spec {
        ShiftSpec::Rotation { degrees } => {
            if ds.dim() != 2 {
                return Err(Error::validation(format!(
                    "rotation needs 2-D features, got {}",
                    ds.dim()
                )));
            }
            let ShiftSpec::Rotation { degrees } = ShiftSpec::rotation(*degrees)? else {
                unreachable!()
            };
            let (sin, cos) = degrees.to_radians().sin_cos();
            for r in 0..features.rows() {
                let row = features.row_mut(r);
                let (x, y) = (row[0], row[1]);
                row[0] = cos * x - sin * y;
                row[1] = sin * x + cos * y;
            }
        }
        ShiftSpec::Translation { offset } => {
            if offset.len() != ds.dim() {
                return Err(Error::Dimension {
                    op: "translation",
                    left: ds.features.shape(),
                    right: (1, offset.len()),
                });
            }
            for r in 0..features.rows() {
                for (v, o) in features.row_mut(r).iter_mut().zip(offset) {
                    *v += o;
                }
            }
        }
    }
    Dataset::new(features, ds.labels.clone(), Domain::Target, ds.n_classes)
}

/// Writes `f0,…,f{d-1},label,domain`; unlabeled rows leave `label` empty.
pub fn write_csv<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("domain".into());
    writeln!(w, "{}", header.join(","))?;
    for r in 0..ds.len() {
        let mut line = String::new();
        for v in ds.features.row(r) {
            line.push_str(&v.to_string());
            line.push(',');
        }
        if let Some(l) = &ds.labels {
            line.push_str(&l[r].to_string());
        }
        line.push(',');
        line.push_str(&ds.domain.to_string());
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(ds, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

/// Parses the format written by [`write_csv`]. `n_classes` is inferred as
/// one more than the largest label.
pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(csv_err(e)),
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };

    let cols: Vec<&str> = header.iter().collect();
    let dim = cols.iter().take_while(|c| c.starts_with('f')).count();
    for (i, c) in cols[..dim].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column f{i}, found `{c}`"),
            });
        }
    }
    let has_label = match &cols[dim..] {
        ["label", "domain"] => true,
        ["domain"] => false,
        rest => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected trailing columns label,domain; found {rest:?}"),
            })
        }
    };
    if dim == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    let mut domain = None;
    for rec in records {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse { line, message };
        if rec.len() != cols.len() {
            return Err(bad(format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        for v in rec.iter().take(dim) {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| bad(format!("invalid number `{v}`")))?;
            if !x.is_finite() {
                return Err(bad(format!("non-finite value `{v}`")));
            }
            data.push(x);
        }
        if has_label {
            let l = rec[dim].trim();
            labels.push(if l.is_empty() {
                None
            } else {
                Some(l.parse().map_err(|_| bad(format!("invalid label `{l}`")))?)
            });
        }
        let d: Domain = rec[cols.len() - 1]
            .trim()
            .parse()
            .map_err(|e: Error| bad(e.to_string()))?;
        match domain {
            None => domain = Some(d),
            Some(prev) if prev != d => {
                return Err(bad(format!("mixed domains: {prev} and {d}")))
            }
            _ => {}
        }
    }

    let n = data.len() / dim;
    let domain = domain.ok_or(Error::Parse {
        line: 2,
        message: "no data rows".into(),
    })?;
    let labels = if !has_label || labels.iter().all(Option::is_none) {
        None
    } else if labels.iter().all(Option::is_some) {
        Some(labels.into_iter().flatten().collect::<Vec<_>>())
    } else {
        return Err(Error::validation("label column is only partially filled"));
    };
    if domain == Domain::Source && labels.is_none() {
        return Err(Error::validation("source dataset has no label column"));
    }
    let n_classes = labels
        .as_ref()
        .and_then(|l| l.iter().max())
        .map_or(0, |m| m + 1);
    Dataset::new(Matrix::new(n, dim, data)?, labels, domain, n_classes)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Paired source and target rows for one step. Domain labels are 0 for the
/// source rows and 1 for the target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub source: Matrix,
    pub labels: Vec<usize>,
    pub target: Matrix,
}

impl DomainBatch {
    pub fn new(source: Matrix, labels: Vec<usize>, target: Matrix) -> Result<Self> {
        if source.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "domain_batch",
                left: source.shape(),
                right: (labels.len(), 1),
            });
        }
        if source.cols() != target.cols() {
            return Err(Error::Dimension {
                op: "domain_batch",
                left: source.shape(),
                right: target.shape(),
            });
        }
        Ok(DomainBatch {
            source,
            labels,
            target,
        })
    }

    /// Source rows followed by target rows.
    pub fn domain_labels(&self) -> Vec<f64> {
        std::iter::repeat_n(Domain::Source.label(), self.source.rows())
            .chain(std::iter::repeat_n(Domain::Target.label(), self.target.rows()))
            .collect()
    }
}

/// One epoch of paired batches.
pub struct BatchIter<'a> {
    source: &'a Dataset,
    target: &'a Dataset,
    source_order: Vec<usize>,
    target_order: Vec<usize>,
    batch_size: usize,
    step: usize,
    steps: usize,
}

impl BatchIter<'_> {
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Number of steps per epoch: the longer dataset is covered once, the
/// shorter one is cycled, and a trailing partial batch is dropped.
pub fn steps_per_epoch(n_source: usize, n_target: usize, batch_size: usize) -> usize {
    n_source.max(n_target) / batch_size.max(1)
}

/// Yields `batch_size` source rows and `batch_size` target rows per step.
/// With `shuffle`, a permutation of each dataset is drawn from `rng`
/// (source first); otherwise rows come in stored order.
pub fn batch_iter<'a>(
    source: &'a Dataset,
    target: &'a Dataset,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<BatchIter<'a>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::validation("source and target datasets must be non-empty"));
    }
    if source.labels().is_none() {
        return Err(Error::validation("source dataset must be labeled"));
    }
    if batch_size == 0 || batch_size > source.len() || batch_size > target.len() {
        return Err(Error::validation(format!(
            "batch size {batch_size} must be in 1..={}",
            source.len().min(target.len())
        )));
    }
    if source.dim() != target.dim() {
        return Err(Error::Dimension {
            op: "batch_iter",
            left: source.features().shape(),
            right: target.features().shape(),
        });
    }
    let (source_order, target_order) = if shuffle {
        let s = rng.permutation(source.len());
        let t = rng.permutation(target.len());
        (s, t)
    } else {
        ((0..source.len()).collect(), (0..target.len()).collect())
    };
    Ok(BatchIter {
        source,
        target,
        source_order,
        target_order,
        batch_size,
        step: 0,
        steps: steps_per_epoch(source.len(), target.len(), batch_size),
    })
}

impl Iterator for BatchIter<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        if self.step >= self.steps {
            return None;
        }
        let start = self.step * self.batch_size;
        let pick = |order: &[usize]| -> Vec<usize> {
            (start..start + self.batch_size)
                .map(|i| order[i % order.len()])
                .collect()
        };
        let s_idx = pick(&self.source_order);
        let t_idx = pick(&self.target_order);
        self.step += 1;
        let labels = self.source.labels().expect("checked in batch_iter");
        Some(DomainBatch {
            source: self.source.features().select_rows(&s_idx),
            labels: s_idx.iter().map(|&i| labels[i]).collect(),
            target: self.target.features().select_rows(&t_idx),
        })
    }
}
