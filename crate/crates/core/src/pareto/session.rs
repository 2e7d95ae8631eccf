use serde::{Deserialize, Serialize};

use super::ga::{ga_search, GAConfig, GaOutcome, Mode, ParetoResult, Progress};
use super::TargetSet;
use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::influence::{compute_influence, InfluenceConfig};
use crate::trainer::{self, EpochMetrics, ModelConfig, ModelParams};

/// A training run kept epoch by epoch: one checkpoint and one set of
/// validation metrics per epoch, epoch 0 being the initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSession {
    pub train: Dataset,
    pub validation: Dataset,
    pub config: ModelConfig,
    checkpoints: Vec<ModelParams>,
    metrics: Vec<EpochMetrics>,
    /// Weights used to produce each epoch; `None` for unweighted epochs.
    epoch_weights: Vec<Option<Vec<f64>>>,
}

impl TrainingSession {
    pub fn new(train: Dataset, validation: Dataset, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if train.num_classes() != validation.num_classes() || train.dim() != validation.dim() {
            return Err(Error::Config("train and validation splits have different shapes".into()));
        }
        let init = trainer::init_params(&config, train.dim(), train.num_classes());
        let m = trainer::evaluate_per_class(&init, &validation)?;
        Ok(TrainingSession {
            train,
            validation,
            config,
            checkpoints: vec![init],
            metrics: vec![m],
            epoch_weights: vec![None],
        })
    }

    pub fn current_epoch(&self) -> usize {
        self.checkpoints.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }

    pub fn checkpoint(&self, epoch: usize) -> Result<&ModelParams> {
        self.checkpoints
            .get(epoch)
            .ok_or_else(|| Error::Domain(format!("no checkpoint for epoch {epoch}")))
    }

    pub fn metrics(&self, epoch: usize) -> Result<&EpochMetrics> {
        self.metrics
            .get(epoch)
            .ok_or_else(|| Error::Domain(format!("no metrics for epoch {epoch}")))
    }

    /// Metrics of every epoch, starting at epoch 0.
    pub fn metrics_history(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn epoch_weights(&self, epoch: usize) -> Option<&[f64]> {
        self.epoch_weights.get(epoch).and_then(|w| w.as_deref())
    }

    /// One epoch from the checkpoint of `epoch` with per-sample weights.
    /// Does not modify the session.
    pub fn weighted_epoch(&self, epoch: usize, weights: &[f64]) -> Result<ModelParams> {
        trainer::train_weighted(self.checkpoint(epoch)?, &self.train, weights, &self.config, 1)
    }

    /// Trains one more epoch, optionally weighted, and returns its metrics.
    pub fn train_epoch(&mut self, weights: Option<&[f64]>) -> Result<&EpochMetrics> {
        let last = self.checkpoint(self.current_epoch())?;
        let params = match weights {
            Some(w) => trainer::train_weighted(last, &self.train, w, &self.config, 1)?,
            None => trainer::train(last, &self.train, &self.config, 1)?,
        };
        self.push(params, weights.map(<[f64]>::to_vec))
    }

    fn push(&mut self, params: ModelParams, weights: Option<Vec<f64>>) -> Result<&EpochMetrics> {
        let m = trainer::evaluate_per_class(&params, &self.validation)?;
        self.checkpoints.push(params);
        self.metrics.push(m);
        self.epoch_weights.push(weights);
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Drops every epoch after `epoch`.
    pub fn rollback(&mut self, epoch: usize) -> Result<()> {
        self.checkpoint(epoch)?;
        self.checkpoints.truncate(epoch + 1);
        self.metrics.truncate(epoch + 1);
        self.epoch_weights.truncate(epoch + 1);
        Ok(())
    }

    /// Makes `params` the new epoch `params.epoch_index`, discarding that
    /// epoch and everything after it.
    pub fn replace_epoch(&mut self, params: ModelParams, weights: Option<Vec<f64>>) -> Result<&EpochMetrics> {
        let e = params.epoch_index;
        if e == 0 {
            return Err(Error::Domain("epoch 0 is the initialization".into()));
        }
        self.rollback(e - 1)?;
        self.push(params, weights)
    }
}

/// Settings shared by both reweighting workflows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoConfig {
    pub ga: GAConfig,
    pub weight_bounds: (f64, f64),
    pub influence: InfluenceConfig,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        ParetoConfig {
            ga: GAConfig::default(),
            weight_bounds: (0.0, 2.0),
            influence: InfluenceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementOutcome {
    pub result: ParetoResult,
    pub before: EpochMetrics,
    pub after: EpochMetrics,
}

fn search_from(
    session: &TrainingSession,
    base_epoch: usize,
    targets: &TargetSet,
    config: &ParetoConfig,
    mode: Mode,
    progress: Option<Progress<'_>>,
) -> Result<GaOutcome> {
    if targets.num_classes() != session.num_classes() {
        return Err(Error::Config("target set does not match the session's classes".into()));
    }
    let params = session.checkpoint(base_epoch)?;
    let m = compute_influence(params, &session.train, &session.validation, &session.config, &config.influence)?;
    ga_search(session, base_epoch, &m, targets, &config.ga, config.weight_bounds, mode, progress)
}

/// Searches for weights that improve the targets in the epoch after `epoch`.
pub fn search_direct_improvement(
    session: &TrainingSession,
    epoch: usize,
    targets: &TargetSet,
    config: &ParetoConfig,
) -> Result<GaOutcome> {
    search_from(session, epoch, targets, config, Mode::DirectImprovement, None)
}

/// Searches for weights that redo `detrimental_epoch`. Targets must be
/// classes whose accuracy dropped in that epoch unless `allow_non_dropped`.
pub fn search_course_correction(
    session: &TrainingSession,
    detrimental_epoch: usize,
    targets: &TargetSet,
    config: &ParetoConfig,
    allow_non_dropped: bool,
) -> Result<GaOutcome> {
    search(session, Mode::CourseCorrection, detrimental_epoch, targets, config, allow_non_dropped, None)
}

/// Either search, reporting progress. `epoch` is the base epoch for direct
/// improvement and the epoch to redo for course correction.
pub fn search(
    session: &TrainingSession,
    mode: Mode,
    epoch: usize,
    targets: &TargetSet,
    config: &ParetoConfig,
    allow_non_dropped: bool,
    progress: Option<Progress<'_>>,
) -> Result<GaOutcome> {
    if mode == Mode::DirectImprovement {
        return search_from(session, epoch, targets, config, mode, progress);
    }
    let detrimental_epoch = epoch;
    if detrimental_epoch == 0 {
        return Err(Error::Domain("epoch 0 has no predecessor to redo from".into()));
    }
    let before = session.metrics(detrimental_epoch - 1)?;
    let after = session.metrics(detrimental_epoch)?;
    let steady: Vec<usize> = targets
        .classes()
        .iter()
        .copied()
        .filter(|&k| after.per_class_accuracy[k] >= before.per_class_accuracy[k])
        .collect();
    if !steady.is_empty() {
        if !allow_non_dropped {
            return Err(Error::Config(format!(
                "accuracy of target classes {steady:?} did not drop at epoch {detrimental_epoch}"
            )));
        }
        log::warn!("course-correcting classes {steady:?} whose accuracy did not drop");
    }
    search_from(session, detrimental_epoch - 1, targets, config, mode, progress)
}

/// Adopts the best weighted epoch of a search. Refused when some target did
/// not strictly improve.
pub fn commit_result(session: &mut TrainingSession, outcome: &GaOutcome) -> Result<EpochMetrics> {
    if outcome.result.has_sentinel() {
        return Err(Error::CommitRefused(format!(
            "best candidate does not improve every target (deltas {:?})",
            outcome.result.best_delta
        )));
    }
    let expected = outcome.result.base_epoch + 1;
    if outcome.best_params.epoch_index != expected {
        return Err(Error::Domain(format!(
            "weighted parameters are for epoch {}, expected {expected}",
            outcome.best_params.epoch_index
        )));
    }
    session
        .replace_epoch(outcome.best_params.clone(), Some(outcome.result.best_weights.w.clone()))
        .cloned()
}

/// Search and commit in one step; the new epoch becomes `epoch + 1`.
pub fn run_direct_improvement(
    session: &mut TrainingSession,
    epoch: usize,
    targets: &TargetSet,
    config: &ParetoConfig,
) -> Result<ImprovementOutcome> {
    let outcome = search_direct_improvement(session, epoch, targets, config)?;
    let after = commit_result(session, &outcome)?;
    Ok(ImprovementOutcome {
        before: outcome.result.baseline.clone(),
        result: outcome.result,
        after,
    })
}

/// Search and commit in one step; the corrected epoch replaces
/// `detrimental_epoch`.
pub fn run_course_correction(
    session: &mut TrainingSession,
    detrimental_epoch: usize,
    targets: &TargetSet,
    config: &ParetoConfig,
    allow_non_dropped: bool,
) -> Result<ImprovementOutcome> {
    let outcome = search_course_correction(session, detrimental_epoch, targets, config, allow_non_dropped)?;
    let after = commit_result(session, &outcome)?;
    Ok(ImprovementOutcome {
        before: outcome.result.baseline.clone(),
        result: outcome.result,
        after,
    })
}
