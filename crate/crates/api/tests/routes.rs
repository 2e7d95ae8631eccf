use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use infvec_api::{router, AppState};
use infvec_core::datamodel::{mixture_split, save_dataset, MixtureSpec, RunManifest, VALIDATION_ARTIFACT};
use infvec_core::trainer::ModelConfig;
use serde_json::{json, Value};
use tower::ServiceExt;

fn write_run(dir: &Path) -> Value {
    let split = mixture_split(&MixtureSpec::four_class(), vec![250; 4], 0).unwrap();
    save_dataset(&split.train, &dir.join("train.csv")).unwrap();
    save_dataset(&split.validation, &dir.join("validation.csv")).unwrap();
    let mut manifest = RunManifest {
        seed: 0,
        dataset_path: "train.csv".into(),
        model_config: ModelConfig {
            learning_rate: 0.1,
            ..ModelConfig::default()
        },
        hyperparameters: Default::default(),
        artifact_paths: Default::default(),
    };
    manifest
        .artifact_paths
        .insert(VALIDATION_ARTIFACT.into(), "validation.csv".into());
    manifest.save(&dir.join("manifest.json")).unwrap();
    json!({ "manifest_path": dir.join("manifest.json") })
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn wait_for(state: &AppState, job_id: &str) -> Value {
    for _ in 0..600 {
        let (status, job) = call(state, "GET", &format!("/jobs/{job_id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if job["state"] == "done" || job["state"] == "failed" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {job_id} did not finish");
}

struct Fixture {
    _tmp: tempfile::TempDir,
    state: AppState,
    root: std::path::PathBuf,
    id: String,
}

async fn fixture(epochs: usize) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let body = write_run(tmp.path());
    let root = tmp.path().join("service");
    let state = AppState::open(&root).unwrap();
    let (status, s) = call(&state, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{s}");
    let id = s["session_id"].as_str().unwrap().to_string();
    if epochs > 0 {
        let (status, t) = call(&state, "POST", &format!("/sessions/{id}/epochs"), Some(json!({ "count": epochs }))).await;
        assert_eq!(status, StatusCode::OK, "{t}");
    }
    Fixture {
        _tmp: tmp,
        state,
        root,
        id,
    }
}

#[tokio::test]
async fn training_two_epochs_reports_two_rows() {
    let f = fixture(0).await;
    for _ in 0..2 {
        let (status, body) = call(&f.state, "POST", &format!("/sessions/{}/epochs", f.id), None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }
    let (status, m) = call(&f.state, "GET", &format!("/sessions/{}/metrics", f.id), None).await;
    assert_eq!(status, StatusCode::OK);
    let epochs = m["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 2);
    for (i, e) in epochs.iter().enumerate() {
        assert_eq!(e["epoch"], i + 1);
        assert_eq!(e["per_class_accuracy"].as_array().unwrap().len(), 4);
        assert_eq!(e["weighted"], false);
    }
    let (_, again) = call(&f.state, "GET", &format!("/sessions/{}/metrics", f.id), None).await;
    assert_eq!(m, again);
    let (_, s) = call(&f.state, "GET", &format!("/sessions/{}", f.id), None).await;
    assert_eq!(s["current_epoch"], 2);
    assert_eq!(s["num_classes"], 4);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let f = fixture(0).await;
    assert_eq!(call(&f.state, "GET", "/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&f.state, "GET", "/sessions/nope/metrics", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&f.state, "GET", "/jobs/j999999", None).await.0, StatusCode::NOT_FOUND);
    let (status, _) = call(
        &f.state,
        "POST",
        &format!("/sessions/{}/commit", f.id),
        Some(json!({ "job_id": "j999999" })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.state, "GET", &format!("/sessions/{}/influence/0", f.id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.state, "GET", &format!("/sessions/{}/ceiling", f.id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_targets_are_422() {
    let f = fixture(1).await;
    for targets in [json!([0, 1, 2, 3]), json!([]), json!([4]), json!([0, 9])] {
        let (status, body) = call(
            &f.state,
            "POST",
            &format!("/sessions/{}/pareto", f.id),
            Some(json!({ "mode": "DI", "targets": targets })),
        )
        .await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{targets}: {body}");
    }
    let (status, _) = call(
        &f.state,
        "POST",
        &format!("/sessions/{}/pareto", f.id),
        Some(json!({ "mode": "DI", "targets": [0], "epoch": 7 })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&f.state, "POST", &format!("/sessions/{}/rollback", f.id), Some(json!({ "epoch": 5 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn direct_improvement_job_commits_one_epoch() {
    let f = fixture(10).await;
    let (status, job) = call(
        &f.state,
        "POST",
        &format!("/sessions/{}/pareto", f.id),
        Some(json!({ "mode": "DI", "targets": [0, 2], "ga": { "iterations": 3 } })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    assert_eq!(job["kind"], "pareto_di");
    let job_id = job["job_id"].as_str().unwrap().to_string();
    let done = wait_for(&f.state, &job_id).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["progress"], 1.0);
    assert_eq!(done["result"]["mode"], "DI");
    assert_eq!(done["result"]["generation_best"].as_array().unwrap().len(), 3);

    let (status, c) = call(&f.state, "POST", &format!("/sessions/{}/commit", f.id), Some(json!({ "job_id": job_id }))).await;
    assert_eq!(status, StatusCode::OK, "{c}");
    assert_eq!(c["epoch"], 11);
    for k in [0, 2] {
        assert!(c["after"]["per_class_accuracy"][k].as_f64() > c["before"]["per_class_accuracy"][k].as_f64());
    }
    let (_, m) = call(&f.state, "GET", &format!("/sessions/{}/metrics", f.id), None).await;
    assert_eq!(m["epochs"].as_array().unwrap().len(), 11);
    assert_eq!(m["epochs"][10]["weighted"], true);
    assert_eq!(m["epochs"][10]["per_class_accuracy"], c["after"]["per_class_accuracy"]);

    let (status, _) = call(&f.state, "POST", &format!("/sessions/{}/commit", f.id), Some(json!({ "job_id": job_id }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn mutations_conflict_while_a_job_runs() {
    let f = fixture(4).await;
    let (status, job) = call(
        &f.state,
        "POST",
        &format!("/sessions/{}/pareto", f.id),
        Some(json!({ "mode": "DI", "targets": [0, 2], "ga": { "iterations": 20 } })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job_id = job["job_id"].as_str().unwrap().to_string();

    let (status, _) = call(&f.state, "POST", &format!("/sessions/{}/epochs", f.id), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(
        &f.state,
        "POST",
        &format!("/sessions/{}/pareto", f.id),
        Some(json!({ "mode": "DI", "targets": [1] })),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&f.state, "POST", &format!("/sessions/{}/rollback", f.id), Some(json!({ "epoch": 1 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&f.state, "POST", &format!("/sessions/{}/commit", f.id), Some(json!({ "job_id": job_id }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    // reads stay available
    assert_eq!(call(&f.state, "GET", &format!("/sessions/{}/metrics", f.id), None).await.0, StatusCode::OK);

    assert_eq!(wait_for(&f.state, &job_id).await["state"], "done");
    let (status, _) = call(&f.state, "POST", &format!("/sessions/{}/epochs", f.id), None).await;
    assert_eq!(status, StatusCode::OK);
    // the session moved on, so the search result no longer applies
    let (status, _) = call(&f.state, "POST", &format!("/sessions/{}/commit", f.id), Some(json!({ "job_id": job_id }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn rollback_restores_the_earlier_history() {
    let f = fixture(3).await;
    let (_, before) = call(&f.state, "GET", &format!("/sessions/{}/metrics", f.id), None).await;
    call(&f.state, "POST", &format!("/sessions/{}/epochs", f.id), Some(json!({ "count": 2 }))).await;
    let (status, s) = call(&f.state, "POST", &format!("/sessions/{}/rollback", f.id), Some(json!({ "epoch": 3 }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["current_epoch"], 3);
    let (_, after) = call(&f.state, "GET", &format!("/sessions/{}/metrics", f.id), None).await;
    assert_eq!(before, after);
}

#[tokio::test]
async fn influence_then_ceiling() {
    let f = fixture(5).await;
    let (status, job) = call(&f.state, "POST", &format!("/sessions/{}/influence?epoch=5", f.id), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(job["kind"], "influence");
    let done = wait_for(&f.state, job["job_id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "done", "{done}");

    let (status, inf) = call(&f.state, "GET", &format!("/sessions/{}/influence/5", f.id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(inf["epoch"], 5);
    assert_eq!(inf["num_classes"], 4);
    assert_eq!(inf["rows"].as_array().unwrap().len(), 520);
    assert_eq!(inf["rows"][0]["p"].as_array().unwrap().len(), 4);

    let (status, report) = call(&f.state, "GET", &format!("/sessions/{}/ceiling?epoch=5", f.id), None).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    let census = &report["census"];
    let total: u64 = ["joint_positive", "joint_negative", "mixed"]
        .iter()
        .map(|k| census[k]["count"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 520);
    assert!(report["verdict"].is_string());
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let f = fixture(2).await;
    let (_, inf) = call(&f.state, "POST", &format!("/sessions/{}/influence", f.id), None).await;
    wait_for(&f.state, inf["job_id"].as_str().unwrap()).await;
    let (_, metrics) = call(&f.state, "GET", &format!("/sessions/{}/metrics", f.id), None).await;
    let (_, influence) = call(&f.state, "GET", &format!("/sessions/{}/influence/2", f.id), None).await;

    let reopened = AppState::open(&f.root).unwrap();
    assert_eq!(call(&reopened, "GET", &format!("/sessions/{}/metrics", f.id), None).await.1, metrics);
    assert_eq!(call(&reopened, "GET", &format!("/sessions/{}/influence/2", f.id), None).await.1, influence);
    let (_, job) = call(&reopened, "GET", &format!("/jobs/{}", inf["job_id"].as_str().unwrap()), None).await;
    assert_eq!(job["state"], "done");
    // new ids continue after the persisted ones
    let (_, t) = call(&reopened, "POST", &format!("/sessions/{}/epochs", f.id), None).await;
    assert_ne!(t["job_id"], inf["job_id"]);
}
