use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use infvec_core::error::io_err;
use infvec_core::influence::{sha256_hex, InfluenceMatrix};
use infvec_core::pareto::{GaOutcome, TrainingSession};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    TrainEpoch,
    Influence,
    Ceiling,
    ParetoDi,
    ParetoCc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub session_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A job as persisted: its public status plus what a commit needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct JobRecord {
    pub status: JobStatus,
    /// Session version the job was launched against.
    pub version: u64,
    #[serde(default)]
    pub outcome: Option<GaOutcome>,
    #[serde(default)]
    pub committed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct SessionData {
    pub session: TrainingSession,
    /// Bumped by every change to the checkpoint list.
    pub version: u64,
    #[serde(skip)]
    pub influence: BTreeMap<usize, InfluenceMatrix>,
}

impl SessionData {
    /// Drops influence matrices of epochs that no longer exist or were replaced.
    pub fn invalidate_from(&mut self, epoch: usize) {
        self.influence.retain(|&e, _| e < epoch);
    }
}

pub(crate) struct SessionEntry {
    pub id: String,
    pub dir: PathBuf,
    pub data: RwLock<SessionData>,
    slot: Mutex<Option<String>>,
}

/// Exclusive hold on a session's mutating slot, released on drop.
pub(crate) struct SlotGuard(Arc<SessionEntry>);

impl Drop for SlotGuard {
    fn drop(&mut self) {
        *self.0.slot.lock().expect("slot lock") = None;
    }
}

impl SessionEntry {
    pub fn acquire(self: &Arc<Self>, holder: &str) -> ApiResult<SlotGuard> {
        let mut slot = self.slot.lock().expect("slot lock");
        if let Some(h) = slot.as_ref() {
            return Err(ApiError::Conflict(format!("session {} is busy with {h}", self.id)));
        }
        *slot = Some(holder.to_string());
        Ok(SlotGuard(Arc::clone(self)))
    }

    pub fn busy_with(&self) -> Option<String> {
        self.slot.lock().expect("slot lock").clone()
    }

    fn influence_paths(&self, epoch: usize) -> (PathBuf, PathBuf) {
        let dir = self.dir.join("influence");
        (dir.join(format!("epoch_{epoch:04}.csv")), dir.join(format!("epoch_{epoch:04}.json")))
    }

    /// Writes `session.json` and the influence matrices, removing stale ones.
    pub fn persist(&self, data: &SessionData) -> ApiResult<()> {
        write_json_atomic(&self.dir.join("session.json"), data)?;
        let dir = self.dir.join("influence");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))?.flatten() {
            let keep = epoch_of(&entry.path()).is_some_and(|e| data.influence.contains_key(&e));
            if !keep {
                fs::remove_file(entry.path()).map_err(io_err(entry.path()))?;
            }
        }
        for (&e, m) in &data.influence {
            let (csv, sidecar) = self.influence_paths(e);
            if !csv.exists() {
                let params = data.session.checkpoint(e)?;
                let sha = sha256_hex(&serde_json::to_vec(params).map_err(infvec_core::Error::from)?);
                m.save(&csv, &sidecar, &sha)?;
            }
        }
        Ok(())
    }
}

fn epoch_of(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("epoch_")?.parse().ok()
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> ApiResult<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string(value).map_err(infvec_core::Error::from)?;
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

struct Inner {
    root: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<SessionEntry>>>,
    jobs: RwLock<BTreeMap<String, Arc<Mutex<JobRecord>>>>,
    counters: Mutex<(u64, u64)>,
}

/// Shared service state. Sessions live under `<root>/sessions/<id>/` and
/// jobs under `<root>/jobs/`, so a restarted service picks them up again.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn open(root: &Path) -> infvec_core::Result<Self> {
        let sessions_dir = root.join("sessions");
        let jobs_dir = root.join("jobs");
        fs::create_dir_all(&sessions_dir).map_err(io_err(&sessions_dir))?;
        fs::create_dir_all(&jobs_dir).map_err(io_err(&jobs_dir))?;

        let mut sessions = BTreeMap::new();
        let mut max_session = 0;
        for entry in fs::read_dir(&sessions_dir).map_err(io_err(&sessions_dir))?.flatten() {
            let dir = entry.path();
            let Some(id) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
                continue;
            };
            let file = dir.join("session.json");
            if !file.is_file() {
                continue;
            }
            let text = fs::read_to_string(&file).map_err(io_err(&file))?;
            let mut data: SessionData = serde_json::from_str(&text)?;
            let inf_dir = dir.join("influence");
            if inf_dir.is_dir() {
                for f in fs::read_dir(&inf_dir).map_err(io_err(&inf_dir))?.flatten() {
                    let p = f.path();
                    if p.extension().is_some_and(|x| x == "csv") {
                        if let Some(e) = epoch_of(&p) {
                            data.influence.insert(e, InfluenceMatrix::load(&p, &p.with_extension("json"))?);
                        }
                    }
                }
            }
            max_session = max_session.max(numeric_suffix(&id));
            sessions.insert(
                id.clone(),
                Arc::new(SessionEntry {
                    id,
                    dir,
                    data: RwLock::new(data),
                    slot: Mutex::new(None),
                }),
            );
        }

        let mut jobs = BTreeMap::new();
        let mut max_job = 0;
        for entry in fs::read_dir(&jobs_dir).map_err(io_err(&jobs_dir))?.flatten() {
            let p = entry.path();
            if p.extension().is_none_or(|x| x != "json") {
                continue;
            }
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let mut record: JobRecord = serde_json::from_str(&text)?;
            if !record.status.state.is_terminal() {
                record.status.state = JobState::Failed;
                record.status.error = Some("interrupted by a service restart".into());
            }
            max_job = max_job.max(numeric_suffix(&record.status.job_id));
            jobs.insert(record.status.job_id.clone(), Arc::new(Mutex::new(record)));
        }

        Ok(AppState(Arc::new(Inner {
            root: root.to_path_buf(),
            sessions: RwLock::new(sessions),
            jobs: RwLock::new(jobs),
            counters: Mutex::new((max_session, max_job)),
        })))
    }

    pub fn root(&self) -> &Path {
        &self.0.root
    }

    pub(crate) fn session(&self, id: &str) -> ApiResult<Arc<SessionEntry>> {
        self.0
            .sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub(crate) fn insert_session(&self, session: TrainingSession) -> ApiResult<Arc<SessionEntry>> {
        let id = {
            let mut c = self.0.counters.lock().expect("counter lock");
            c.0 += 1;
            format!("s{:04}", c.0)
        };
        let dir = self.0.root.join("sessions").join(&id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let entry = Arc::new(SessionEntry {
            id: id.clone(),
            dir,
            data: RwLock::new(SessionData {
                session,
                version: 0,
                influence: BTreeMap::new(),
            }),
            slot: Mutex::new(None),
        });
        entry.persist(&entry.data.read().expect("session lock"))?;
        self.0.sessions.write().expect("sessions lock").insert(id, Arc::clone(&entry));
        Ok(entry)
    }

    pub(crate) fn job(&self, id: &str) -> ApiResult<Arc<Mutex<JobRecord>>> {
        self.0
            .jobs
            .read()
            .expect("jobs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("job {id}")))
    }

    pub(crate) fn session_jobs(&self, session_id: &str) -> Vec<JobStatus> {
        self.0
            .jobs
            .read()
            .expect("jobs lock")
            .values()
            .map(|j| j.lock().expect("job lock").status.clone())
            .filter(|s| s.session_id == session_id)
            .collect()
    }

    pub(crate) fn new_job(&self, session_id: &str, kind: JobKind, version: u64) -> ApiResult<Arc<Mutex<JobRecord>>> {
        let id = {
            let mut c = self.0.counters.lock().expect("counter lock");
            c.1 += 1;
            format!("j{:06}", c.1)
        };
        let record = JobRecord {
            status: JobStatus {
                job_id: id.clone(),
                session_id: session_id.to_string(),
                kind,
                state: JobState::Queued,
                progress: 0.0,
                result: None,
                error: None,
            },
            version,
            outcome: None,
            committed: false,
        };
        self.persist_job(&record)?;
        let job = Arc::new(Mutex::new(record));
        self.0.jobs.write().expect("jobs lock").insert(id, Arc::clone(&job));
        Ok(job)
    }

    pub(crate) fn persist_job(&self, record: &JobRecord) -> ApiResult<()> {
        write_json_atomic(&self.0.root.join("jobs").join(format!("{}.json", record.status.job_id)), record)
    }
}

fn numeric_suffix(id: &str) -> u64 {
    id.trim_start_matches(|c: char| !c.is_ascii_digit()).parse().unwrap_or(0)
}
