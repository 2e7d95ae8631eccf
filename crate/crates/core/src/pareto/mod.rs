//! Per-sample reweighting toward Pareto improvements: the weight LP, the
//! threshold fitness, the genetic search over thresholds and the
//! direct-improvement / course-correction workflows.

mod ga;
pub mod lp;
pub mod oracle;
mod session;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::influence::InfluenceMatrix;
use crate::trainer::DeltaVector;
use lp::{LpScalar, Problem, Solution};

pub use ga::{ga_search, CandidateRecord, GAConfig, GaOutcome, LpStatus, Mode, ParetoResult, Progress};
pub use session::{
    commit_result, run_course_correction, run_direct_improvement, search, search_course_correction,
    search_direct_improvement, ImprovementOutcome, ParetoConfig, TrainingSession,
};

/// Finite stand-in for an infinitely bad fitness term.
pub const SENTINEL: f64 = -1e9;

/// Per-sample training weights. The baseline is all ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub sample_ids: Vec<usize>,
    pub w: Vec<f64>,
    pub bounds: (f64, f64),
}

impl WeightSet {
    pub fn baseline(sample_ids: Vec<usize>, bounds: (f64, f64)) -> Self {
        WeightSet {
            w: vec![1.0; sample_ids.len()],
            sample_ids,
            bounds,
        }
    }

    /// Writes `sample_id,weight`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,weight\n");
        for (id, w) in self.sample_ids.iter().zip(&self.w) {
            out.push_str(&format!("{id},{w}\n"));
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn load_csv(path: &Path, bounds: (f64, f64)) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let (mut sample_ids, mut w) = (Vec::new(), Vec::new());
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            };
            if record.len() != 2 {
                return Err(bad("expected sample_id,weight".into()));
            }
            sample_ids.push(record[0].parse().map_err(|e| bad(format!("bad id: {e}")))?);
            let v: f64 = record[1].parse().map_err(|e| bad(format!("bad weight: {e}")))?;
            if !(v >= bounds.0 && v <= bounds.1) {
                return Err(bad(format!("weight {v} outside [{}, {}]", bounds.0, bounds.1)));
            }
            w.push(v);
        }
        Ok(WeightSet { sample_ids, w, bounds })
    }
}

/// Per-class thresholds of the LP constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaThresholds {
    pub alpha: Vec<f64>,
    pub range: (f64, f64),
}

/// Classes the operator wants to improve. Non-empty and a proper subset of
/// the classes, so the fitness always has non-target terms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    classes: Vec<usize>,
    num_classes: usize,
}

impl TargetSet {
    pub fn new(mut classes: Vec<usize>, num_classes: usize) -> Result<Self> {
        classes.sort_unstable();
        classes.dedup();
        if classes.is_empty() {
            return Err(Error::Config("target set is empty".into()));
        }
        if let Some(&k) = classes.iter().find(|&&k| k >= num_classes) {
            return Err(Error::Config(format!(
                "target class {k} out of range for {num_classes} classes"
            )));
        }
        if classes.len() == num_classes {
            return Err(Error::Config(
                "target set covers every class; at least one non-target is required".into(),
            ));
        }
        Ok(TargetSet {
            classes,
            num_classes,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn contains(&self, k: usize) -> bool {
        self.classes.binary_search(&k).is_ok()
    }

    pub fn non_targets(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&k| !self.contains(k)).collect()
    }
}

/// Fitness of a per-class relative change. Every target that fails to
/// improve costs `SENTINEL / |targets|`; non-targets contribute their mean
/// degradation.
pub fn fitness(delta: &DeltaVector, targets: &TargetSet) -> f64 {
    let t = targets.classes().len() as f64;
    let rest = targets.non_targets();
    let target_term: f64 = targets
        .classes()
        .iter()
        .filter(|&&k| delta.delta[k] <= 0.0)
        .map(|_| SENTINEL)
        .sum::<f64>()
        / t;
    let other_term: f64 = rest
        .iter()
        .map(|&k| delta.delta[k])
        .filter(|&d| d < 0.0)
        .sum::<f64>()
        / rest.len() as f64;
    target_term + other_term
}

/// Fitness assigned to a threshold vector whose LP is infeasible.
pub fn infeasible_fitness(num_classes: usize) -> f64 {
    SENTINEL * num_classes as f64
}

/// Solution of the weight LP in the original variables.
#[derive(Clone, Debug, PartialEq)]
pub enum ReweightSolution<S> {
    Optimal { w: Vec<S>, objective: S },
    Infeasible,
}

/// Builds and solves
///
/// ```text
/// maximize    sum_{k in T} sum_i w_i P_ik
/// subject to  sum_i w_i P_ik >= alpha_k sum_i P_ik   for every class k
///             w_min <= w_i <= w_max
/// ```
///
/// `rows[i]` is the influence vector of sample `i`. Samples whose objective
/// coefficient is exactly zero keep weight one.
pub fn reweight_lp<S: LpScalar>(
    rows: &[Vec<S>],
    targets: &TargetSet,
    alpha: &[S],
    bounds: (S, S),
) -> Result<ReweightSolution<S>> {
    let k = targets.num_classes();
    let (lo, hi) = bounds;
    if !(lo < hi) {
        return Err(Error::Config("weight bounds need w_min < w_max".into()));
    }
    if alpha.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Config(format!("influence rows and alpha must have {k} entries")));
    }
    let one = S::one();
    let coef: Vec<S> = rows
        .iter()
        .map(|r| targets.classes().iter().fold(S::zero(), |acc, &t| acc + r[t].clone()))
        .collect();
    let free: Vec<usize> = (0..rows.len()).filter(|&i| !coef[i].is_zero()).collect();
    if free.len() < rows.len() && (one < lo || one > hi) {
        return Err(Error::Config(
            "weight bounds must contain the baseline weight 1".into(),
        ));
    }
    let eps = S::tolerance();
    let mut a = Vec::with_capacity(k);
    let mut b = Vec::with_capacity(k);
    for c in 0..k {
        let total = rows.iter().fold(S::zero(), |acc, r| acc + r[c].clone());
        // substitute w_i = lo + x_i for free samples, w_i = 1 otherwise
        let mut rhs = alpha[c].clone() * total;
        for (i, r) in rows.iter().enumerate() {
            let w0 = if coef[i].is_zero() { one.clone() } else { lo.clone() };
            rhs = rhs - r[c].clone() * w0;
        }
        let row: Vec<S> = free.iter().map(|&i| rows[i][c].clone()).collect();
        let scale = row.iter().fold(S::zero(), |m, v| if v.abs() > m { v.abs() } else { m });
        if scale.is_zero() {
            if rhs > eps {
                return Ok(ReweightSolution::Infeasible);
            }
            continue;
        }
        a.push(row.into_iter().map(|v| v / scale.clone()).collect());
        b.push(rhs / scale);
    }
    let cscale = free
        .iter()
        .fold(S::zero(), |m, &i| if coef[i].abs() > m { coef[i].abs() } else { m });
    let c: Vec<S> = free.iter().map(|&i| coef[i].clone() / cscale.clone()).collect();
    let problem = Problem {
        a,
        b,
        c,
        upper: vec![hi.clone() - lo.clone(); free.len()],
    };
    match lp::solve(&problem)? {
        Solution::Infeasible => Ok(ReweightSolution::Infeasible),
        Solution::Optimal { x, .. } => {
            let mut w = vec![one; rows.len()];
            for (&i, xi) in free.iter().zip(x) {
                w[i] = lo.clone() + xi;
            }
            let objective = w
                .iter()
                .zip(&coef)
                .fold(S::zero(), |acc, (wi, ci)| acc + wi.clone() * ci.clone());
            Ok(ReweightSolution::Optimal { w, objective })
        }
    }
}

/// Weight LP on an influence matrix. `None` means infeasible.
pub fn solve_reweight_lp(
    m: &InfluenceMatrix,
    targets: &TargetSet,
    alpha: &AlphaThresholds,
    bounds: (f64, f64),
) -> Result<Option<WeightSet>> {
    if m.num_classes != targets.num_classes() {
        return Err(Error::Config("target set and influence matrix disagree on K".into()));
    }
    if !(bounds.0.is_finite() && bounds.1.is_finite()) {
        return Err(Error::Config("weight bounds must be finite".into()));
    }
    let rows: Vec<Vec<f64>> = m.rows.iter().map(|r| r.p.clone()).collect();
    match reweight_lp(&rows, targets, &alpha.alpha, bounds)? {
        ReweightSolution::Infeasible => Ok(None),
        ReweightSolution::Optimal { w, .. } => Ok(Some(WeightSet {
            sample_ids: m.ids(),
            w,
            bounds,
        })),
    }
}
