//! Influence scores, category-wise influence vectors and the leave-one-out
//! retraining oracle.
//!
//! The score of training sample `z_j` against an evaluation set `V` is
//! `(sum_{z in V} grad loss(z))^T H^{-1} grad loss(z_j)` with
//! `H = sum_i hess loss(z_i) + damping * I`. Positive means removing `z_j`
//! raises the evaluation loss, i.e. the sample is beneficial.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{Dataset, Sample};
use crate::error::{io_err, Error, Result};
use crate::trainer::{self, dot_product, ModelConfig, ModelParams};

/// Largest parameter count for which the Hessian is materialized.
pub const EXPLICIT_CAP: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    Explicit,
    MatrixFree,
}

/// Stopping rule for the conjugate-gradient solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            tolerance: 1e-10,
            max_iterations: 5000,
        }
    }
}

/// `H = sum_i hess loss(z_i; theta) + damping * I` over a training set.
pub struct HessianOperator {
    mode: HessianMode,
    damping: f64,
    params: ModelParams,
    train: Vec<Sample>,
    cg: CgConfig,
    matrix: Option<DMatrix<f64>>,
    cholesky: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl std::fmt::Debug for HessianOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HessianOperator")
            .field("mode", &self.mode)
            .field("damping", &self.damping)
            .field("dim", &self.dim())
            .finish()
    }
}

/// Builds the damped Hessian at `params` over `train`.
pub fn build_hessian_operator(
    params: &ModelParams,
    train: &Dataset,
    damping: f64,
    mode: HessianMode,
) -> Result<HessianOperator> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::Config(format!("damping must be >= 0, got {damping}")));
    }
    if !params.architecture.is_convex() && damping <= 0.0 {
        return Err(Error::Config(
            "non-convex architectures need a positive damping".into(),
        ));
    }
    params.check_shape()?;
    let dim = params.len();
    if mode == HessianMode::Explicit && dim > EXPLICIT_CAP {
        return Err(Error::Capacity {
            params: dim,
            cap: EXPLICIT_CAP,
        });
    }
    let mut op = HessianOperator {
        mode,
        damping,
        params: params.clone(),
        train: train.samples().to_vec(),
        cg: CgConfig::default(),
        matrix: None,
        cholesky: None,
    };
    if mode == HessianMode::Explicit {
        let mut m = op.data_hessian();
        for i in 0..dim {
            m[(i, i)] += damping;
        }
        op.cholesky = m.clone().cholesky();
        op.matrix = Some(m);
    }
    Ok(op)
}

impl HessianOperator {
    pub fn mode(&self) -> HessianMode {
        self.mode
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn cg_config(&self) -> CgConfig {
        self.cg
    }

    pub fn with_cg(mut self, cg: CgConfig) -> Self {
        self.cg = cg;
        self
    }

    /// Undamped `sum_i hess loss(z_i)` as a dense symmetric matrix.
    fn data_hessian(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let columns: Vec<Vec<f64>> = (0..dim)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; dim];
                e[j] = 1.0;
                self.data_hvp(&e)
            })
            .collect();
        let mut m = DMatrix::from_fn(dim, dim, |i, j| columns[j][i]);
        // symmetrize away rounding
        let t = m.transpose();
        m += t;
        m *= 0.5;
        m
    }

    fn data_hvp(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for s in &self.train {
            self.params.accumulate_hvp(&s.features, s.label, v, 1.0, &mut out);
        }
        out
    }

    /// `H v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim(), "vector length must match theta");
        match &self.matrix {
            Some(m) => (m * DVector::from_column_slice(v)).as_slice().to_vec(),
            None => {
                let mut out = self.data_hvp(v);
                for (o, vi) in out.iter_mut().zip(v) {
                    *o += self.damping * vi;
                }
                out
            }
        }
    }

    /// Dense copy of the damped Hessian (explicit mode only).
    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        self.matrix.as_ref()
    }

    /// `trace(sum_i hess loss(z_i))`.
    pub fn data_trace(&self) -> f64 {
        match &self.matrix {
            Some(m) => m.trace() - self.damping * self.dim() as f64,
            None => {
                let dim = self.dim();
                (0..dim)
                    .into_par_iter()
                    .map(|j| {
                        let mut e = vec![0.0; dim];
                        e[j] = 1.0;
                        self.data_hvp(&e)[j]
                    })
                    .sum()
            }
        }
    }
}

/// Solves `H x = v`: Cholesky in explicit mode, conjugate gradient otherwise.
pub fn ihvp(op: &HessianOperator, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != op.dim() {
        return Err(Error::Config(format!(
            "vector has length {}, operator has dimension {}",
            v.len(),
            op.dim()
        )));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; v.len()]);
    }
    match op.mode {
        HessianMode::Explicit => {
            let chol = op.cholesky.as_ref().ok_or(Error::NotPositiveDefinite {
                damping: op.damping,
            })?;
            Ok(chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec())
        }
        HessianMode::MatrixFree => conjugate_gradient(op, v),
    }
}

fn conjugate_gradient(op: &HessianOperator, b: &[f64]) -> Result<Vec<f64>> {
    let CgConfig {
        tolerance,
        max_iterations,
    } = op.cg;
    let b_norm = dot_product(b, b).sqrt();
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot_product(&r, &r);
    for _ in 0..max_iterations {
        if rr.sqrt() <= tolerance * b_norm {
            return Ok(x);
        }
        let hp = op.apply(&p);
        let curvature = dot_product(&p, &hp);
        if curvature <= 0.0 {
            return Err(Error::NotPositiveDefinite { damping: op.damping });
        }
        let alpha = rr / curvature;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let rr_next = dot_product(&r, &r);
        let beta = rr_next / rr;
        rr = rr_next;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
    }
    // the recursive residual drifts; check the true one before giving up
    let hx = op.apply(&x);
    let residual = hx
        .iter()
        .zip(b)
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>()
        .sqrt()
        / b_norm;
    if residual <= tolerance {
        Ok(x)
    } else {
        Err(Error::SolverDiverged {
            iterations: max_iterations,
            residual,
        })
    }
}

/// Influence of one training sample on an evaluation subset.
pub fn influence_score(
    params: &ModelParams,
    op: &HessianOperator,
    train_sample: &Sample,
    eval_subset: &Dataset,
) -> Result<f64> {
    if eval_subset.is_empty() {
        return Err(Error::Domain("evaluation subset is empty".into()));
    }
    let g = params.loss_gradient(train_sample)?;
    let x = ihvp(op, &g)?;
    let eval_grad = trainer::total_gradient(params, eval_subset);
    Ok(dot_product(&eval_grad, &x))
}

/// Influence vector `P(z)` of one training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceVector {
    pub sample_id: usize,
    pub p: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMetadata {
    pub epoch_index: usize,
    pub damping: f64,
    pub tolerance: f64,
}

/// `n x K` matrix of category-wise influence scores, rows in training order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub rows: Vec<InfluenceVector>,
    pub num_classes: usize,
    pub metadata: InfluenceMetadata,
}

impl InfluenceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, ids: Vec<usize>, num_classes: usize) -> Self {
        assert_eq!(rows.len(), ids.len());
        InfluenceMatrix {
            rows: ids
                .into_iter()
                .zip(rows)
                .map(|(sample_id, p)| {
                    assert_eq!(p.len(), num_classes);
                    InfluenceVector { sample_id, p }
                })
                .collect(),
            num_classes,
            metadata: InfluenceMetadata {
                epoch_index: 0,
                damping: 0.0,
                tolerance: 0.0,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.sample_id).collect()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.p[k]).collect()
    }

    /// Row sums: influence against the whole validation set.
    pub fn total(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.p.iter().sum()).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.p.iter_mut().for_each(|v| *v *= c);
        }
        out
    }

    /// Writes `sample_id,p0,...,p{K-1}` and a JSON sidecar carrying the
    /// metadata and the SHA-256 of the checkpoint the scores came from.
    pub fn save(&self, csv_path: &Path, sidecar_path: &Path, checkpoint_sha256: &str) -> Result<()> {
        let mut out = String::from("sample_id");
        for k in 0..self.num_classes {
            out.push_str(&format!(",p{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.sample_id.to_string());
            for v in &r.p {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(csv_path, out).map_err(io_err(csv_path))?;
        let sidecar = InfluenceSidecar {
            epoch: self.metadata.epoch_index,
            damping: self.metadata.damping,
            tolerance: self.metadata.tolerance,
            num_classes: self.num_classes,
            checkpoint_sha256: checkpoint_sha256.to_string(),
        };
        fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)? + "\n")
            .map_err(io_err(sidecar_path))
    }

    pub fn load(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path).map_err(io_err(sidecar_path))?;
        let sidecar: InfluenceSidecar = serde_json::from_str(&text)?;
        let mut reader = csv::Reader::from_path(csv_path)?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let bad = |message: String| Error::Parse {
                path: csv_path.to_path_buf(),
                line,
                message,
            };
            if record.len() != sidecar.num_classes + 1 {
                return Err(bad(format!("expected {} fields", sidecar.num_classes + 1)));
            }
            let sample_id = record[0].parse().map_err(|e| bad(format!("bad id: {e}")))?;
            let p = (1..record.len())
                .map(|j| record[j].parse::<f64>().map_err(|e| bad(format!("bad score: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(InfluenceVector { sample_id, p });
        }
        Ok(InfluenceMatrix {
            rows,
            num_classes: sidecar.num_classes,
            metadata: InfluenceMetadata {
                epoch_index: sidecar.epoch,
                damping: sidecar.damping,
                tolerance: sidecar.tolerance,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSidecar {
    pub epoch: usize,
    pub damping: f64,
    pub tolerance: f64,
    pub num_classes: usize,
    pub checkpoint_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Category-wise influence matrix. The K class-wise evaluation gradients are
/// solved once; each row is then one training gradient and K dot products.
pub fn influence_matrix(
    params: &ModelParams,
    op: &HessianOperator,
    train: &Dataset,
    val: &Dataset,
) -> Result<InfluenceMatrix> {
    let k = val.num_classes();
    let solved = class_solves(params, op, val)?;
    let rows = train
        .samples()
        .par_iter()
        .map(|s| {
            let g = params.loss_gradient(s)?;
            Ok(solved.iter().map(|x| dot_product(x, &g)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut m = InfluenceMatrix::from_rows(rows, train.ids(), k);
    m.metadata = InfluenceMetadata {
        epoch_index: params.epoch_index,
        damping: op.damping,
        tolerance: match op.mode {
            HessianMode::Explicit => 0.0,
            HessianMode::MatrixFree => op.cg.tolerance,
        },
    };
    Ok(m)
}

/// `H^{-1} sum_{z in V^k} grad loss(z)` for every class k.
pub fn class_solves(params: &ModelParams, op: &HessianOperator, val: &Dataset) -> Result<Vec<Vec<f64>>> {
    let k = val.num_classes();
    for class in 0..k {
        if val.class_subset(class).is_empty() {
            return Err(Error::Domain(format!(
                "validation split has no sample of class {class}"
            )));
        }
    }
    (0..k)
        .into_par_iter()
        .map(|class| {
            let g = trainer::total_gradient(params, &val.class_subset(class));
            ihvp(op, &g).map_err(|e| Error::InfluenceSolve {
                row: usize::MAX,
                class,
                source: Box::new(e),
            })
        })
        .collect()
}

/// How to set the damping of the influence Hessian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    /// Absolute damping. `None` uses `relative_damping * trace(H)/|theta|`.
    pub damping: Option<f64>,
    pub relative_damping: f64,
    /// Adds the curvature of the weight-decay term, `2 n weight_decay`, to
    /// the damping so the Hessian matches the trained objective.
    pub include_weight_decay: bool,
    pub mode: HessianMode,
    pub cg: CgConfig,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            damping: None,
            relative_damping: 1e-3,
            include_weight_decay: true,
            mode: HessianMode::Explicit,
            cg: CgConfig::default(),
        }
    }
}

impl InfluenceConfig {
    /// Effective damping at `params` for a model trained with `model`.
    pub fn resolve_damping(&self, params: &ModelParams, train: &Dataset, model: &ModelConfig) -> Result<f64> {
        let base = match self.damping {
            Some(d) => d,
            None => {
                let probe = build_hessian_operator(params, train, 1.0, HessianMode::MatrixFree)?;
                self.relative_damping * probe.data_trace() / params.len() as f64
            }
        };
        let decay = if self.include_weight_decay {
            2.0 * train.len() as f64 * model.weight_decay
        } else {
            0.0
        };
        Ok(base + decay)
    }

    pub fn build(&self, params: &ModelParams, train: &Dataset, model: &ModelConfig) -> Result<HessianOperator> {
        let damping = self.resolve_damping(params, train, model)?;
        let mode = if self.mode == HessianMode::Explicit && params.len() > EXPLICIT_CAP {
            HessianMode::MatrixFree
        } else {
            self.mode
        };
        Ok(build_hessian_operator(params, train, damping, mode)?.with_cg(self.cg))
    }
}

/// Builds the operator from `config` and returns the influence matrix.
pub fn compute_influence(
    params: &ModelParams,
    train: &Dataset,
    val: &Dataset,
    model: &ModelConfig,
    config: &InfluenceConfig,
) -> Result<InfluenceMatrix> {
    let op = config.build(params, train, model)?;
    influence_matrix(params, &op, train, val)
}

/// Retrains without `drop_id` from the same initialization and returns
/// `loss_V(without) - loss_V(with)`, the quantity the influence score
/// estimates.
pub fn loo_oracle(train: &Dataset, drop_id: usize, val_subset: &Dataset, config: &ModelConfig) -> Result<f64> {
    if train.len() <= 1 {
        return Err(Error::Domain("leave-one-out needs at least two training samples".into()));
    }
    let with = trainer::fit(config, train)?;
    loo_delta_from(&with, train, drop_id, val_subset, config)
}

/// LOO deltas for several ids, sharing the full-data fit.
pub fn loo_deltas(train: &Dataset, ids: &[usize], val_subset: &Dataset, config: &ModelConfig) -> Result<Vec<f64>> {
    if train.len() <= 1 {
        return Err(Error::Domain("leave-one-out needs at least two training samples".into()));
    }
    let with = trainer::fit(config, train)?;
    ids.par_iter()
        .map(|&id| loo_delta_from(&with, train, id, val_subset, config))
        .collect()
}

fn loo_delta_from(
    with: &ModelParams,
    train: &Dataset,
    drop_id: usize,
    val_subset: &Dataset,
    config: &ModelConfig,
) -> Result<f64> {
    if !train.samples().iter().any(|s| s.id == drop_id) {
        return Err(Error::Domain(format!("id {drop_id} is not in the training set")));
    }
    let reduced = train.without_ids(&[drop_id]);
    let without = trainer::fit(config, &reduced)?;
    Ok(trainer::total_loss(&without, val_subset)? - trainer::total_loss(with, val_subset)?)
}
