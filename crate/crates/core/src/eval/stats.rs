use crate::error::{Error, Result};

/// Per-row ranks (1 = best, ties averaged) and their column means.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub ranks: Vec<Vec<f64>>,
    pub average: Vec<f64>,
}

impl RankTable {
    pub fn n_datasets(&self) -> usize {
        self.ranks.len()
    }
}

/// Ranks the `k` methods within each of the `N` rows of `scores`.
pub fn average_ranks(
    methods: &[String],
    scores: &[Vec<f64>],
    higher_is_better: bool,
) -> Result<RankTable> {
    let k = methods.len();
    if k < 2 {
        return Err(Error::validation("ranking needs at least 2 methods"));
    }
    if scores.is_empty() {
        return Err(Error::validation("ranking needs at least one row of scores"));
    }
    let mut ranks = Vec::with_capacity(scores.len());
    for (i, row) in scores.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Dimension {
                op: "average_ranks",
                left: (scores.len(), k),
                right: (i, row.len()),
            });
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::validation(format!("NaN score in row {i}")));
        }
        ranks.push(rank_row(row, higher_is_better));
    }
    let average = (0..k)
        .map(|c| ranks.iter().map(|r| r[c]).sum::<f64>() / ranks.len() as f64)
        .collect();
    Ok(RankTable {
        methods: methods.to_vec(),
        ranks,
        average,
    })
}

fn rank_row(row: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = row[a].partial_cmp(&row[b]).expect("NaN rejected above");
        if higher_is_better {
            ord.reverse()
        } else {
            ord
        }
    });
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Two-tailed Nemenyi critical values `q_α` for k = 2..=10 (studentized range
/// statistic divided by √2), from the standard tables for average-rank
/// comparisons of classifiers.
const Q_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
const Q_10: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_10
    } else {
        return Err(Error::validation(format!(
            "unsupported alpha {alpha} (expected 0.05 or 0.10)"
        )));
    };
    if !(2..=10).contains(&k) {
        return Err(Error::validation(format!(
            "Nemenyi table covers 2..=10 methods, got {k}"
        )));
    }
    Ok(table[k - 2])
}

/// Critical difference `q_α(k) · sqrt(k (k + 1) / (6 N))`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::validation("Nemenyi test needs N >= 1"));
    }
    let q = nemenyi_q(k, alpha)?;
    Ok(q * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt())
}
