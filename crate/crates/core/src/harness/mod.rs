//! Removal/retrain validation of influence scores, rank correlation,
//! beneficial/detrimental count statistics and run-directory bookkeeping.

mod run_dir;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::influence::InfluenceMatrix;
use crate::trainer::{self, ModelConfig};

pub use run_dir::{file_sha256, RunDir, CHECKSUMS, MANIFEST};

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain(format!(
            "spearman needs two vectors of equal length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("spearman input contains non-finite values".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        let which = if sxx == 0.0 { "first" } else { "second" };
        return Err(Error::UndefinedCorrelation(format!("{which} vector is constant")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Beneficial,
    Detrimental,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Beneficial => 1.0,
            Polarity::Detrimental => -1.0,
        }
    }
}

/// Number of samples selected out of `n` for `fraction`, rounded up.
pub fn selection_size(fraction: f64, n: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Domain(format!("fraction must lie in [0, 1), got {fraction}")));
    }
    Ok(((fraction * n as f64).ceil() as usize).min(n))
}

/// Row positions of the `count` highest (beneficial) or lowest (detrimental)
/// scores of column `k`, ranked over the whole training set. Ties go to the
/// earlier row.
pub fn select(m: &InfluenceMatrix, k: usize, count: usize, polarity: Polarity) -> Vec<usize> {
    let col = m.column(k);
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| match polarity {
        Polarity::Beneficial => col[b].total_cmp(&col[a]),
        Polarity::Detrimental => col[a].total_cmp(&col[b]),
    }
    .then(a.cmp(&b)));
    order.truncate(count);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalExperimentReport {
    pub polarity: Polarity,
    pub fraction: f64,
    pub selection_size: usize,
    pub selected_ids: Vec<Vec<usize>>,
    /// Row = selection class, column = evaluated class.
    pub cumulative_influence: Vec<Vec<f64>>,
    /// Accuracy after retraining minus baseline accuracy. `None` for rows
    /// whose removal would empty a class.
    pub accuracy_change: Vec<Option<Vec<f64>>>,
    pub baseline_accuracy: Vec<f64>,
    /// Rank correlation of the cumulative influence of each cell with the
    /// accuracy lost by the removal, over all completed rows.
    pub spearman: Option<f64>,
}

impl RemovalExperimentReport {
    /// Diagonal cells whose accuracy moved opposite to the polarity:
    /// removing beneficial samples lowers accuracy, removing detrimental
    /// ones raises it.
    pub fn diagonal_hits(&self) -> usize {
        let s = self.polarity.sign();
        self.accuracy_change
            .iter()
            .enumerate()
            .filter(|(k, row)| row.as_ref().is_some_and(|r| -s * r[*k] > 0.0))
            .count()
    }

    /// (cumulative influence, accuracy lost) for every cell of the completed rows.
    pub fn cells(&self) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (ci, row) in self.cumulative_influence.iter().zip(&self.accuracy_change) {
            if let Some(r) = row {
                x.extend_from_slice(ci);
                y.extend(r.iter().map(|v| -v));
            }
        }
        (x, y)
    }
}

/// Removes the top (or bottom) `fraction` of training samples of each class
/// column, retrains from the same initialization with the full schedule of
/// `config` and records the per-class accuracy change on `validation`.
pub fn removal_experiment(
    train: &Dataset,
    validation: &Dataset,
    config: &ModelConfig,
    m: &InfluenceMatrix,
    fraction: f64,
    polarity: Polarity,
) -> Result<RemovalExperimentReport> {
    let k = train.num_classes();
    if m.len() != train.len() || m.num_classes != k {
        return Err(Error::Config("influence matrix does not match the training set".into()));
    }
    let count = selection_size(fraction, train.len())?;
    let baseline = trainer::fit(config, train)?;
    let baseline_accuracy = trainer::evaluate_per_class(&baseline, validation)?.per_class_accuracy;

    let selections: Vec<Vec<usize>> = (0..k).map(|c| select(m, c, count, polarity)).collect();
    let rows: Vec<(Vec<usize>, Vec<f64>, Option<Vec<f64>>)> = selections
        .par_iter()
        .map(|sel| -> Result<_> {
            let mut cumulative = vec![0.0; k];
            for &i in sel {
                for (c, v) in cumulative.iter_mut().zip(&m.rows[i].p) {
                    *c += v;
                }
            }
            let ids: Vec<usize> = sel.iter().map(|&i| m.rows[i].sample_id).collect();
            let reduced = train.without_ids(&ids);
            if reduced.class_counts().contains(&0) {
                return Ok((ids, cumulative, None));
            }
            if sel.is_empty() {
                return Ok((ids, cumulative, Some(vec![0.0; k])));
            }
            let params = trainer::fit(config, &reduced)?;
            let acc = trainer::evaluate_per_class(&params, validation)?.per_class_accuracy;
            let change = acc.iter().zip(&baseline_accuracy).map(|(a, b)| a - b).collect();
            Ok((ids, cumulative, Some(change)))
        })
        .collect::<Result<_>>()?;

    let mut report = RemovalExperimentReport {
        polarity,
        fraction,
        selection_size: count,
        selected_ids: Vec::with_capacity(k),
        cumulative_influence: Vec::with_capacity(k),
        accuracy_change: Vec::with_capacity(k),
        baseline_accuracy,
        spearman: None,
    };
    for (ids, cumulative, change) in rows {
        report.selected_ids.push(ids);
        report.cumulative_influence.push(cumulative);
        report.accuracy_change.push(change);
    }
    let (x, y) = report.cells();
    report.spearman = match spearman(&x, &y) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) | Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(report)
}

/// Rank correlation over the cells of several reports together.
pub fn pooled_spearman(reports: &[RemovalExperimentReport]) -> Result<f64> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for r in reports {
        let (a, b) = r.cells();
        x.extend(a);
        y.extend(b);
    }
    spearman(&x, &y)
}

/// For each selection class k (row) and each source label j (column), how
/// many of the selected samples carry label j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceClassCounts {
    pub fraction: f64,
    pub selection_size: usize,
    pub beneficial: Vec<Vec<usize>>,
    pub detrimental: Vec<Vec<usize>>,
}

pub fn influence_class_counts(m: &InfluenceMatrix, train: &Dataset, fraction: f64) -> Result<InfluenceClassCounts> {
    let k = train.num_classes();
    if m.len() != train.len() || m.num_classes != k {
        return Err(Error::Config("influence matrix does not match the training set".into()));
    }
    let count = selection_size(fraction, train.len())?;
    let labels: std::collections::HashMap<usize, usize> =
        train.samples().iter().map(|s| (s.id, s.label)).collect();
    let tabulate = |polarity| -> Vec<Vec<usize>> {
        (0..k)
            .map(|c| {
                let mut row = vec![0; k];
                for i in select(m, c, count, polarity) {
                    row[labels[&m.rows[i].sample_id]] += 1;
                }
                row
            })
            .collect()
    };
    Ok(InfluenceClassCounts {
        fraction,
        selection_size: count,
        beneficial: tabulate(Polarity::Beneficial),
        detrimental: tabulate(Polarity::Detrimental),
    })
}
