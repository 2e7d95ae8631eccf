//! Performance-ceiling diagnostics: region census of influence vectors, the
//! hyperplane fit of the influence cloud, and iterative trimming of
//! jointly harmful samples.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{io_err, Error, Result};
use crate::influence::{compute_influence, InfluenceConfig, InfluenceMatrix};
use crate::trainer::{self, EpochMetrics, ModelConfig, ModelParams};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGroup {
    pub count: usize,
    pub ids: Vec<usize>,
}

impl RegionGroup {
    fn push(&mut self, id: usize) {
        self.count += 1;
        self.ids.push(id);
    }
}

/// Partition of the training ids by the sign pattern of their influence
/// vectors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCensus {
    pub joint_positive: RegionGroup,
    pub joint_negative: RegionGroup,
    pub mixed: RegionGroup,
}

impl RegionCensus {
    pub fn total(&self) -> usize {
        self.joint_positive.count + self.joint_negative.count + self.mixed.count
    }

    /// Fraction of rows in either joint region.
    pub fn joint_fraction(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        (self.joint_positive.count + self.joint_negative.count) as f64 / n as f64
    }

    /// Writes `sample_id,region`, rows grouped by region.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,region\n");
        for (name, group) in [
            ("joint_positive", &self.joint_positive),
            ("joint_negative", &self.joint_negative),
            ("mixed", &self.mixed),
        ] {
            for id in &group.ids {
                out.push_str(&format!("{id},{name}\n"));
            }
        }
        fs::write(path, out).map_err(io_err(path))
    }
}

/// A row is jointly positive when every entry exceeds `zero_tol`, jointly
/// negative when every entry is below `-zero_tol`, and mixed otherwise
/// (entries exactly at the tolerance count as mixed).
pub fn classify_regions(m: &InfluenceMatrix, zero_tol: f64) -> RegionCensus {
    let mut census = RegionCensus::default();
    for row in &m.rows {
        if row.p.iter().all(|&v| v > zero_tol) {
            census.joint_positive.push(row.sample_id);
        } else if row.p.iter().all(|&v| v < -zero_tol) {
            census.joint_negative.push(row.sample_id);
        } else {
            census.mixed.push(row.sample_id);
        }
    }
    census
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Covariance about the mean row (ordinary PCA).
    #[default]
    Mean,
    /// Second moment about the origin.
    Origin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryStats {
    /// Smallest eigenvalue over the total variance: spread orthogonal to the
    /// best-fit hyperplane.
    pub residual_ratio: f64,
    /// Largest eigenvalue over the total variance.
    pub first_pc_ratio: f64,
    /// Squared cosine between the hyperplane normal and the all-ones
    /// direction.
    pub principal_axis_alignment: f64,
}

pub fn hyperplane_residual(m: &InfluenceMatrix) -> Result<GeometryStats> {
    hyperplane_residual_with(m, Centering::Mean)
}

pub fn hyperplane_residual_with(m: &InfluenceMatrix, centering: Centering) -> Result<GeometryStats> {
    let k = m.num_classes;
    let n = m.len();
    if n < k || k == 0 {
        return Err(Error::Domain(format!(
            "hyperplane fit needs at least as many rows ({n}) as classes ({k})"
        )));
    }
    let mut mean = vec![0.0; k];
    if centering == Centering::Mean {
        for r in &m.rows {
            for (a, v) in mean.iter_mut().zip(&r.p) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    let mut scale = 0.0f64;
    for r in &m.rows {
        let c: Vec<f64> = r.p.iter().zip(&mean).map(|(v, mu)| v - mu).collect();
        for i in 0..k {
            scale = scale.max(r.p[i].abs());
            for j in 0..k {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= n as f64;
    let total = cov.trace();
    if !total.is_finite() || total <= (f64::EPSILON * scale).powi(2) * k as f64 {
        return Err(Error::DegenerateGeometry(format!(
            "influence rows have total variance {total:e}"
        )));
    }
    let eig = SymmetricEigen::new(cov);
    let (mut lo, mut hi) = (0, 0);
    for i in 1..k {
        if eig.eigenvalues[i] < eig.eigenvalues[lo] {
            lo = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[hi] {
            hi = i;
        }
    }
    let normal = eig.eigenvectors.column(lo);
    let cos = normal.iter().sum::<f64>() / (k as f64).sqrt() / normal.norm();
    Ok(GeometryStats {
        residual_ratio: (eig.eigenvalues[lo] / total).clamp(0.0, 1.0),
        first_pc_ratio: (eig.eigenvalues[hi] / total).clamp(0.0, 1.0),
        principal_axis_alignment: (cos * cos).clamp(0.0, 1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    CeilingReached,
    Improvable,
}

pub fn ceiling_verdict(
    census: &RegionCensus,
    geometry: &GeometryStats,
    tau_region: f64,
    tau_residual: f64,
) -> Verdict {
    if census.joint_fraction() > tau_region || geometry.residual_ratio > tau_residual {
        Verdict::Improvable
    } else {
        Verdict::CeilingReached
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeilingConfig {
    pub zero_tol: f64,
    pub tau_region: f64,
    pub tau_residual: f64,
    pub centering: Centering,
}

impl Default for CeilingConfig {
    fn default() -> Self {
        CeilingConfig {
            zero_tol: 0.0,
            tau_region: 0.01,
            tau_residual: 0.05,
            centering: Centering::Mean,
        }
    }
}

impl CeilingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zero_tol >= 0.0) {
            return Err(Error::Config("zero_tol must be non-negative".into()));
        }
        for (name, v) in [("tau_region", self.tau_region), ("tau_residual", self.tau_residual)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeilingReport {
    pub census: RegionCensus,
    pub centering: Centering,
    pub residual_ratio: f64,
    pub first_pc_ratio: f64,
    pub principal_axis_alignment: f64,
    /// The same statistics under the other centering.
    pub alternate: GeometryStats,
    pub verdict: Verdict,
}

impl CeilingReport {
    pub fn geometry(&self) -> GeometryStats {
        GeometryStats {
            residual_ratio: self.residual_ratio,
            first_pc_ratio: self.first_pc_ratio,
            principal_axis_alignment: self.principal_axis_alignment,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }
}

pub fn ceiling_report(m: &InfluenceMatrix, config: &CeilingConfig) -> Result<CeilingReport> {
    config.validate()?;
    let census = classify_regions(m, config.zero_tol);
    let geometry = hyperplane_residual_with(m, config.centering)?;
    let other = match config.centering {
        Centering::Mean => Centering::Origin,
        Centering::Origin => Centering::Mean,
    };
    let alternate = hyperplane_residual_with(m, other)?;
    let verdict = ceiling_verdict(&census, &geometry, config.tau_region, config.tau_residual);
    Ok(CeilingReport {
        census,
        centering: config.centering,
        residual_ratio: geometry.residual_ratio,
        first_pc_ratio: geometry.first_pc_ratio,
        principal_axis_alignment: geometry.principal_axis_alignment,
        alternate,
        verdict,
    })
}

/// Outcome of one trimming pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimReport {
    pub removed_ids: Vec<usize>,
    pub before: EpochMetrics,
    pub after: EpochMetrics,
    pub train_size_before: usize,
    pub train_size_after: usize,
}

#[derive(Clone, Debug)]
pub struct TrimOutcome {
    pub trimmed_train: Dataset,
    pub params: ModelParams,
    pub report: TrimReport,
}

/// Fits on `train`, removes every jointly negative sample and refits on the
/// remainder. Accuracies are measured on `val`.
pub fn trim_iteration(
    train: &Dataset,
    val: &Dataset,
    model: &ModelConfig,
    influence: &InfluenceConfig,
) -> Result<TrimOutcome> {
    let params = trainer::fit(model, train)?;
    let before = trainer::evaluate_per_class(&params, val)?;
    let m = compute_influence(&params, train, val, model, influence)?;
    let census = classify_regions(&m, 0.0);
    let removed = census.joint_negative.ids;
    if removed.is_empty() {
        return Ok(TrimOutcome {
            trimmed_train: train.clone(),
            report: TrimReport {
                removed_ids: removed,
                after: before.clone(),
                before,
                train_size_before: train.len(),
                train_size_after: train.len(),
            },
            params,
        });
    }
    let trimmed = train.without_ids(&removed);
    if let Some(class) = trimmed.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::EmptiedClass { class });
    }
    let new_params = trainer::fit(model, &trimmed)?;
    let after = trainer::evaluate_per_class(&new_params, val)?;
    Ok(TrimOutcome {
        report: TrimReport {
            removed_ids: removed,
            before,
            after,
            train_size_before: train.len(),
            train_size_after: trimmed.len(),
        },
        trimmed_train: trimmed,
        params: new_params,
    })
}

/// Repeats [`trim_iteration`] until nothing is removed or `max_iterations`
/// passes have run. Returns the final set and one report per pass.
pub fn trim_to_fixed_point(
    train: &Dataset,
    val: &Dataset,
    model: &ModelConfig,
    influence: &InfluenceConfig,
    max_iterations: usize,
) -> Result<(Dataset, Vec<TrimReport>)> {
    let mut current = train.clone();
    let mut reports = Vec::new();
    for _ in 0..max_iterations {
        let out = trim_iteration(&current, val, model, influence)?;
        let done = out.report.removed_ids.is_empty();
        reports.push(out.report);
        current = out.trimmed_train;
        if done {
            break;
        }
    }
    Ok((current, reports))
}
