use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use infvec_core::ceiling::{ceiling_report, CeilingConfig, CeilingReport};
use infvec_core::datamodel::RunManifest;
use infvec_core::influence::{compute_influence, InfluenceConfig, InfluenceMatrix};
use infvec_core::pareto::{self, commit_result, GAConfig, Mode, ParetoConfig, TargetSet, TrainingSession, WeightSet};
use infvec_core::trainer::{EpochMetrics, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, JobKind, JobRecord, JobState, JobStatus, SessionEntry, SlotGuard};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/epochs", post(train_epochs))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/sessions/{id}/influence", post(start_influence))
        .route("/sessions/{id}/influence/{epoch}", get(get_influence))
        .route("/sessions/{id}/ceiling", get(get_ceiling))
        .route("/sessions/{id}/pareto", post(start_pareto))
        .route("/sessions/{id}/commit", post(commit))
        .route("/sessions/{id}/rollback", post(rollback))
        .route("/jobs/{job_id}", get(get_job))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker panicked: {e}")))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub num_classes: usize,
    pub current_epoch: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub model_config: ModelConfig,
    pub version: u64,
    pub influence_epochs: Vec<usize>,
    pub busy_with: Option<String>,
    pub jobs: Vec<JobStatus>,
}

fn summary(state: &AppState, entry: &SessionEntry) -> SessionSummary {
    let data = entry.data.read().expect("session lock");
    SessionSummary {
        session_id: entry.id.clone(),
        num_classes: data.session.num_classes(),
        current_epoch: data.session.current_epoch(),
        train_size: data.session.train.len(),
        validation_size: data.session.validation.len(),
        model_config: data.session.config.clone(),
        version: data.version,
        influence_epochs: data.influence.keys().copied().collect(),
        busy_with: entry.busy_with(),
        jobs: state.session_jobs(&entry.id),
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub manifest: Option<RunManifest>,
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    /// Directory relative dataset paths are resolved against; defaults to
    /// the manifest's directory or the service root.
    #[serde(default)]
    pub base_dir: Option<PathBuf>,
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionSummary>)> {
    let root = state.root().to_path_buf();
    let (manifest, base) = match (req.manifest, req.manifest_path) {
        (Some(m), None) => (m, req.base_dir.unwrap_or(root)),
        (None, Some(p)) => {
            let p = if p.is_absolute() { p } else { root.join(p) };
            let m = RunManifest::load(&p).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
            let dir = p.parent().map(PathBuf::from).unwrap_or(root);
            (m, req.base_dir.unwrap_or(dir))
        }
        _ => {
            return Err(ApiError::Unprocessable(
                "give exactly one of 'manifest' and 'manifest_path'".into(),
            ))
        }
    };
    let session = blocking(move || {
        let split = manifest.load_splits(&base).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
        Ok(TrainingSession::new(split.train, split.validation, manifest.model_config)?)
    })
    .await?;
    let entry = state.insert_session(session)?;
    Ok((StatusCode::CREATED, Json(summary(&state, &entry))))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionSummary>> {
    let entry = state.session(&id)?;
    Ok(Json(summary(&state, &entry)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub weighted: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub session_id: String,
    pub num_classes: usize,
    /// Accuracy of the initialization.
    pub initial: Vec<f64>,
    /// One entry per trained epoch, starting at epoch 1.
    pub epochs: Vec<EpochEntry>,
}

async fn get_metrics(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<MetricsHistory>> {
    let entry = state.session(&id)?;
    let data = entry.data.read().expect("session lock");
    let s = &data.session;
    let history = s.metrics_history();
    Ok(Json(MetricsHistory {
        session_id: id,
        num_classes: s.num_classes(),
        initial: history[0].per_class_accuracy.clone(),
        epochs: history
            .iter()
            .enumerate()
            .skip(1)
            .map(|(e, m)| EpochEntry {
                epoch: e,
                per_class_accuracy: m.per_class_accuracy.clone(),
                overall_accuracy: m.overall_accuracy,
                weighted: s.epoch_weights(e).is_some(),
            })
            .collect(),
    }))
}

#[derive(Debug, Default, Deserialize)]
pub struct TrainRequest {
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Weight CSV (`sample_id,weight`) in training-set order.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainResponse {
    pub job_id: String,
    pub current_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

async fn train_epochs(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<TrainRequest>>,
) -> ApiResult<Json<TrainResponse>> {
    let entry = state.session(&id)?;
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let count = req.count.unwrap_or(1);
    if count == 0 {
        return Err(ApiError::Unprocessable("count must be at least 1".into()));
    }
    let weights = match (req.weights, req.weights_path) {
        (Some(w), None) => Some(w),
        (None, Some(p)) => {
            let p = if p.is_absolute() { p } else { state.root().join(p) };
            let ws = WeightSet::load_csv(&p, (0.0, f64::MAX)).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
            let data = entry.data.read().expect("session lock");
            if ws.sample_ids != data.session.train.ids() {
                return Err(ApiError::Unprocessable(
                    "weight file ids do not match the training set order".into(),
                ));
            }
            Some(ws.w)
        }
        (None, None) => None,
        (Some(_), Some(_)) => {
            return Err(ApiError::Unprocessable("give at most one of 'weights' and 'weights_path'".into()))
        }
    };
    let guard = entry.acquire("train_epoch")?;
    let job = state.new_job(&id, JobKind::TrainEpoch, entry.data.read().expect("session lock").version)?;
    let (e2, j2) = (Arc::clone(&entry), Arc::clone(&job));
    let result = blocking(move || {
        let _guard = guard;
        let mut data = e2.data.write().expect("session lock");
        let mut metrics = Vec::with_capacity(count);
        for _ in 0..count {
            metrics.push(data.session.train_epoch(weights.as_deref())?.clone());
        }
        data.version += 1;
        e2.persist(&data)?;
        Ok((data.session.current_epoch(), metrics))
    })
    .await;
    let mut record = j2.lock().expect("job lock");
    match result {
        Ok((current_epoch, metrics)) => {
            record.status.state = JobState::Done;
            record.status.progress = 1.0;
            record.status.result = Some(json!({ "current_epoch": current_epoch }));
            state.persist_job(&record)?;
            Ok(Json(TrainResponse {
                job_id: record.status.job_id.clone(),
                current_epoch,
                metrics,
            }))
        }
        Err(e) => {
            record.status.state = JobState::Failed;
            record.status.error = Some(e.to_string());
            state.persist_job(&record)?;
            Err(e)
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct EpochQuery {
    #[serde(default)]
    pub epoch: Option<usize>,
}

fn resolve_epoch(entry: &SessionEntry, epoch: Option<usize>) -> ApiResult<usize> {
    let current = entry.data.read().expect("session lock").session.current_epoch();
    let e = epoch.unwrap_or(current);
    if e > current {
        return Err(ApiError::Unprocessable(format!("epoch {e} does not exist (current is {current})")));
    }
    Ok(e)
}

/// Runs `work` on a blocking thread as job `job`, holding `guard` until it ends.
fn spawn_job(
    state: AppState,
    job: Arc<Mutex<JobRecord>>,
    guard: SlotGuard,
    work: impl FnOnce(&(dyn Fn(f64) + Sync)) -> ApiResult<(Value, Option<pareto::GaOutcome>)> + Send + 'static,
) {
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        {
            let mut r = job.lock().expect("job lock");
            r.status.state = JobState::Running;
            let _ = state.persist_job(&r);
        }
        let report = |p: f64| {
            job.lock().expect("job lock").status.progress = p.clamp(0.0, 1.0);
        };
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| work(&report)))
            .unwrap_or_else(|_| Err(ApiError::Internal("job panicked".into())));
        let mut r = job.lock().expect("job lock");
        match outcome {
            Ok((result, ga)) => {
                r.status.state = JobState::Done;
                r.status.progress = 1.0;
                r.status.result = Some(result);
                r.outcome = ga;
            }
            Err(e) => {
                r.status.state = JobState::Failed;
                r.status.error = Some(e.to_string());
            }
        }
        if let Err(e) = state.persist_job(&r) {
            log::error!("could not persist job {}: {e}", r.status.job_id);
        }
    });
}

async fn start_influence(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EpochQuery>,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let entry = state.session(&id)?;
    let epoch = resolve_epoch(&entry, q.epoch)?;
    let guard = entry.acquire("influence")?;
    let version = entry.data.read().expect("session lock").version;
    let job = state.new_job(&id, JobKind::Influence, version)?;
    let status = job.lock().expect("job lock").status.clone();
    let e2 = Arc::clone(&entry);
    spawn_job(state, job, guard, move |_| {
        let (params, train, val, config) = {
            let d = e2.data.read().expect("session lock");
            let s = &d.session;
            (s.checkpoint(epoch)?.clone(), s.train.clone(), s.validation.clone(), s.config.clone())
        };
        let m = compute_influence(&params, &train, &val, &config, &InfluenceConfig::default())?;
        let result = json!({ "epoch": epoch, "rows": m.len(), "num_classes": m.num_classes });
        let mut d = e2.data.write().expect("session lock");
        d.influence.insert(epoch, m);
        e2.persist(&d)?;
        Ok((result, None))
    });
    Ok((StatusCode::ACCEPTED, Json(status)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InfluenceResponse {
    pub epoch: usize,
    #[serde(flatten)]
    pub matrix: InfluenceMatrix,
}

async fn get_influence(
    State(state): State<AppState>,
    Path((id, epoch)): Path<(String, usize)>,
) -> ApiResult<Json<InfluenceResponse>> {
    let entry = state.session(&id)?;
    let data = entry.data.read().expect("session lock");
    let matrix = data
        .influence
        .get(&epoch)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("influence for epoch {epoch} of session {id}")))?;
    Ok(Json(InfluenceResponse { epoch, matrix }))
}

#[derive(Debug, Deserialize)]
pub struct CeilingQuery {
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub zero_tol: Option<f64>,
    #[serde(default)]
    pub tau_region: Option<f64>,
    #[serde(default)]
    pub tau_residual: Option<f64>,
}

async fn get_ceiling(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<CeilingQuery>,
) -> ApiResult<Json<CeilingReport>> {
    let entry = state.session(&id)?;
    let epoch = resolve_epoch(&entry, q.epoch)?;
    let defaults = CeilingConfig::default();
    let config = CeilingConfig {
        zero_tol: q.zero_tol.unwrap_or(defaults.zero_tol),
        tau_region: q.tau_region.unwrap_or(defaults.tau_region),
        tau_residual: q.tau_residual.unwrap_or(defaults.tau_residual),
        ..defaults
    };
    let matrix = entry
        .data
        .read()
        .expect("session lock")
        .influence
        .get(&epoch)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("influence for epoch {epoch} of session {id}")))?;
    Ok(Json(blocking(move || Ok(ceiling_report(&matrix, &config)?)).await?))
}

/// Optional replacements for the search settings.
#[derive(Debug, Default, Deserialize)]
pub struct GaOverrides {
    pub iterations: Option<usize>,
    pub population_size: Option<usize>,
    pub crossover_rate: Option<f64>,
    pub mutation_rate: Option<f64>,
    pub mutation_strength: Option<f64>,
    pub num_elites: Option<usize>,
    pub num_mutated_elites: Option<usize>,
    pub num_randoms: Option<usize>,
    pub num_crossover_children: Option<usize>,
    pub seed: Option<u64>,
    pub alpha_range: Option<(f64, f64)>,
}

impl GaOverrides {
    fn apply(self, base: GAConfig) -> GAConfig {
        GAConfig {
            iterations: self.iterations.unwrap_or(base.iterations),
            population_size: self.population_size.unwrap_or(base.population_size),
            crossover_rate: self.crossover_rate.unwrap_or(base.crossover_rate),
            mutation_rate: self.mutation_rate.unwrap_or(base.mutation_rate),
            mutation_strength: self.mutation_strength.unwrap_or(base.mutation_strength),
            num_elites: self.num_elites.unwrap_or(base.num_elites),
            num_mutated_elites: self.num_mutated_elites.unwrap_or(base.num_mutated_elites),
            num_randoms: self.num_randoms.unwrap_or(base.num_randoms),
            num_crossover_children: self.num_crossover_children.unwrap_or(base.num_crossover_children),
            seed: self.seed.unwrap_or(base.seed),
            alpha_range: self.alpha_range.unwrap_or(base.alpha_range),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct ParetoRequest {
    pub mode: Mode,
    pub targets: Vec<usize>,
    /// Base epoch for DI, epoch to redo for CC. Defaults to the latest.
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub ga: Option<GaOverrides>,
    #[serde(default)]
    pub weight_bounds: Option<(f64, f64)>,
    #[serde(default)]
    pub allow_non_dropped: bool,
}

async fn start_pareto(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ParetoRequest>,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let entry = state.session(&id)?;
    let (num_classes, version) = {
        let d = entry.data.read().expect("session lock");
        (d.session.num_classes(), d.version)
    };
    let targets = TargetSet::new(req.targets, num_classes).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let epoch = resolve_epoch(&entry, req.epoch)?;
    let defaults = ParetoConfig::default();
    let config = ParetoConfig {
        ga: req.ga.unwrap_or_default().apply(defaults.ga),
        weight_bounds: req.weight_bounds.unwrap_or(defaults.weight_bounds),
        influence: defaults.influence,
    };
    config.ga.validate().map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let (lo, hi) = config.weight_bounds;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(ApiError::Unprocessable("weight bounds need finite lo < hi".into()));
    }
    if req.mode == Mode::CourseCorrection {
        if epoch == 0 {
            return Err(ApiError::Unprocessable("epoch 0 cannot be course-corrected".into()));
        }
        let d = entry.data.read().expect("session lock");
        let before = &d.session.metrics(epoch - 1)?.per_class_accuracy;
        let after = &d.session.metrics(epoch)?.per_class_accuracy;
        let steady: Vec<usize> = targets.classes().iter().copied().filter(|&k| after[k] >= before[k]).collect();
        if !steady.is_empty() && !req.allow_non_dropped {
            return Err(ApiError::Unprocessable(format!(
                "accuracy of target classes {steady:?} did not drop at epoch {epoch}"
            )));
        }
    }
    let kind = match req.mode {
        Mode::DirectImprovement => JobKind::ParetoDi,
        Mode::CourseCorrection => JobKind::ParetoCc,
    };
    let guard = entry.acquire("pareto")?;
    let job = state.new_job(&id, kind, version)?;
    let status = job.lock().expect("job lock").status.clone();
    let e2 = Arc::clone(&entry);
    let allow = req.allow_non_dropped;
    let mode = req.mode;
    spawn_job(state, job, guard, move |progress| {
        let session = e2.data.read().expect("session lock").session.clone();
        let outcome = pareto::search(&session, mode, epoch, &targets, &config, allow, Some(progress))?;
        let result = serde_json::to_value(&outcome.result).map_err(infvec_core::Error::from)?;
        Ok((result, Some(outcome)))
    });
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn get_job(State(state): State<AppState>, Path(job_id): Path<String>) -> ApiResult<Json<JobStatus>> {
    let job = state.job(&job_id)?;
    let status = job.lock().expect("job lock").status.clone();
    Ok(Json(status))
}

#[derive(Debug, Deserialize)]
pub struct CommitRequest {
    pub job_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommitResponse {
    pub job_id: String,
    pub epoch: usize,
    pub before: EpochMetrics,
    pub after: EpochMetrics,
    pub delta: Vec<f64>,
}

async fn commit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<CommitRequest>,
) -> ApiResult<Json<CommitResponse>> {
    let entry = state.session(&id)?;
    let job = state.job(&req.job_id)?;
    let (outcome, launched_at) = {
        let r = job.lock().expect("job lock");
        if r.status.session_id != id {
            return Err(ApiError::NotFound(format!("job {} in session {id}", req.job_id)));
        }
        if !matches!(r.status.kind, JobKind::ParetoDi | JobKind::ParetoCc) {
            return Err(ApiError::Unprocessable(format!("job {} is not a reweighting search", req.job_id)));
        }
        if r.status.state != JobState::Done {
            return Err(ApiError::Conflict(format!("job {} has not completed", req.job_id)));
        }
        if r.committed {
            return Err(ApiError::Conflict(format!("job {} was already committed", req.job_id)));
        }
        (r.outcome.clone().ok_or_else(|| ApiError::Internal("completed job has no outcome".into()))?, r.version)
    };
    let guard = entry.acquire("commit")?;
    let e2 = Arc::clone(&entry);
    let (epoch, after) = blocking(move || {
        let _guard = guard;
        let mut d = e2.data.write().expect("session lock");
        if d.version != launched_at {
            return Err(ApiError::Conflict("session changed since the search was launched".into()));
        }
        let after = commit_result(&mut d.session, &outcome)?;
        let epoch = d.session.current_epoch();
        d.version += 1;
        d.invalidate_from(epoch);
        e2.persist(&d)?;
        Ok((epoch, after))
    })
    .await?;
    let mut r = job.lock().expect("job lock");
    r.committed = true;
    state.persist_job(&r)?;
    let outcome = r.outcome.as_ref().expect("checked above");
    Ok(Json(CommitResponse {
        job_id: req.job_id,
        epoch,
        before: outcome.result.baseline.clone(),
        after,
        delta: outcome.result.best_delta.clone(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct RollbackRequest {
    pub epoch: usize,
}

async fn rollback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<RollbackRequest>,
) -> ApiResult<Json<SessionSummary>> {
    let entry = state.session(&id)?;
    resolve_epoch(&entry, Some(req.epoch))?;
    let guard = entry.acquire("rollback")?;
    let e2 = Arc::clone(&entry);
    blocking(move || {
        let _guard = guard;
        let mut d = e2.data.write().expect("session lock");
        if req.epoch < d.session.current_epoch() {
            d.session.rollback(req.epoch)?;
            d.version += 1;
            d.invalidate_from(req.epoch + 1);
            e2.persist(&d)?;
        }
        Ok(())
    })
    .await?;
    Ok(Json(summary(&state, &entry)))
}
