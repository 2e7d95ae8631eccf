use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn infvec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infvec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> PathBuf {
    let out = infvec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn checksums(run: &Path) -> Vec<(String, String)> {
    let mut dirs: Vec<_> = fs::read_dir(run.join("artifacts"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| {
            (
                d.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read_to_string(d.join("SHA256SUMS")).unwrap(),
            )
        })
        .collect()
}

/// Every command on a small four-class run, in order.
fn full_pipeline(run: &Path) {
    let r = run.to_str().unwrap();
    ok(&["synth-gen", "--preset", "mixture4", "--seed", "3", "-o", r, "--epochs", "6"]);
    ok(&["train", "--run", r]);
    ok(&["influence", "--run", r]);
    ok(&["ceiling", "--run", r]);
    ok(&["removal-exp", "--run", r, "--fraction", "0.05"]);
    ok(&["loo-oracle", "--run", r, "--limit", "3"]);
    ok(&["pareto-di", "--run", r, "--targets", "0,2", "--iterations", "3"]);
    ok(&["trim", "--run", r, "--max-iterations", "1"]);
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(infvec(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(infvec(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(infvec(&["train", "--run", missing.to_str().unwrap()]).status.code(), Some(2));

    let r = tmp.path().join("run");
    let r = r.to_str().unwrap();
    ok(&["synth-gen", "--preset", "mixture4", "-o", r, "--epochs", "2"]);
    // a second synth-gen must not clobber the run
    assert_eq!(infvec(&["synth-gen", "--preset", "mixture4", "-o", r]).status.code(), Some(2));
    // nothing trained yet
    assert_eq!(infvec(&["influence", "--run", r]).status.code(), Some(2));
    ok(&["train", "--run", r]);
    assert_eq!(infvec(&["ceiling", "--run", r]).status.code(), Some(2));
    assert_eq!(infvec(&["influence", "--run", r, "--epoch", "9"]).status.code(), Some(2));
    for targets in ["0,1,2,3", "7"] {
        let out = infvec(&["pareto-di", "--run", r, "--targets", targets]);
        assert_eq!(out.status.code(), Some(2), "targets {targets}");
    }
    assert_eq!(
        infvec(&["pareto-cc", "--run", r, "--targets", "0", "--epoch", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(
        infvec(&["pareto-di", "--run", r, "--targets", "0", "--w-min", "2", "--w-max", "1"]).status.code(),
        Some(2)
    );
}

#[test]
fn pipeline_writes_checksummed_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    full_pipeline(&run);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["model_config"]["epochs"], 6);
    let paths = manifest["artifact_paths"].as_object().unwrap();
    for key in ["validation", "session", "influence_e0006", "checkpoint_e0006", "checkpoint_e0007", "pareto_di"] {
        let rel = paths.get(key).unwrap_or_else(|| panic!("missing artifact {key}"));
        assert!(run.join(rel.as_str().unwrap()).is_file(), "{key}");
    }

    let sums = checksums(&run);
    let names: Vec<_> = sums.iter().map(|(d, _)| d.as_str()).collect();
    assert_eq!(
        names,
        [
            "0001-synth-gen",
            "0002-train",
            "0003-influence",
            "0004-ceiling",
            "0005-removal-exp",
            "0006-loo-oracle",
            "0007-pareto-di",
            "0008-trim"
        ]
    );
    let commit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("artifacts/0007-pareto-di/commit.json")).unwrap()).unwrap();
    assert_eq!(commit["epoch"], 7);
    for k in [0, 2] {
        assert!(commit["after"]["per_class_accuracy"][k].as_f64() > commit["before"]["per_class_accuracy"][k].as_f64());
    }
    let text = fs::read_to_string(run.join("artifacts/0003-influence/SHA256SUMS")).unwrap();
    assert!(text.contains("influence.csv") && text.contains("influence.json"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    full_pipeline(&a);
    full_pipeline(&b);
    assert_eq!(checksums(&a), checksums(&b));
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn seed_override_must_match_the_session() {
    let tmp = tempfile::tempdir().unwrap();
    let r = tmp.path().join("run");
    let r = r.to_str().unwrap();
    ok(&["synth-gen", "--preset", "separable-noisy", "--n-blue", "40", "--n-orange", "40", "--flips-blue", "2", "--flips-orange", "2", "-o", r, "--epochs", "3"]);
    ok(&["train", "--run", r, "--seed", "5", "--epochs", "1"]);
    assert_eq!(infvec(&["train", "--run", r, "--seed", "6"]).status.code(), Some(2));
    ok(&["train", "--run", r]);
    let session: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(r).join("session.json")).unwrap()).unwrap();
    assert_eq!(session["config"]["seed"], 5);
}
