use std::fs;
use std::path::{Path, PathBuf};

use infvec_core::ceiling::{ceiling_report, trim_to_fixed_point, Centering, CeilingConfig};
use infvec_core::datamodel::{
    mixture_split, nonseparable_split, save_dataset, separable_noisy_split, Dataset, MixtureSpec, RunManifest,
    SplitPair, VALIDATION_ARTIFACT,
};
use infvec_core::error::io_err;
use infvec_core::harness::{
    influence_class_counts, pooled_spearman, removal_experiment, spearman, Polarity, RunDir,
};
use infvec_core::influence::{compute_influence, loo_deltas, sha256_hex, InfluenceConfig, InfluenceMatrix};
use infvec_core::pareto::{self, commit_result, GAConfig, GaOutcome, Mode, ParetoConfig, TargetSet, TrainingSession, WeightSet};
use infvec_core::trainer::{append_metrics_log, fit, save_checkpoint, Architecture, ModelConfig, ModelParams};
use serde::Serialize;
use serde_json::json;

use crate::{
    CeilingArgs, CenteringArg, InfluenceArgs, LooArgs, ModelArgs, ParetoCcArgs, ParetoDiArgs, PolarityArg, Preset,
    RemovalArgs, RunArgs, SearchArgs, ServeArgs, SynthGenArgs, TrainArgs, TrimArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] infvec_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

const SESSION_FILE: &str = "session.json";

struct Run {
    dir: RunDir,
    manifest: RunManifest,
}

impl Run {
    fn open(args: &RunArgs) -> CliResult<Self> {
        let dir = RunDir::open(&args.dir).map_err(|e| CliError::Usage(e.to_string()))?;
        let manifest = dir.load_manifest()?;
        Ok(Run { dir, manifest })
    }

    fn seed(&self, args: &RunArgs) -> u64 {
        args.seed.unwrap_or(self.manifest.seed)
    }

    fn splits(&self) -> CliResult<SplitPair> {
        Ok(self.manifest.load_splits(self.dir.root())?)
    }

    fn session_path(&self) -> PathBuf {
        self.dir.root().join(SESSION_FILE)
    }

    fn has_session(&self) -> bool {
        self.session_path().is_file()
    }

    /// The persisted session, or a fresh one at epoch 0.
    fn session(&self, seed: Option<u64>) -> CliResult<TrainingSession> {
        let path = self.session_path();
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let s: TrainingSession = serde_json::from_str(&text).map_err(infvec_core::Error::from)?;
            if let Some(seed) = seed {
                if seed != s.config.seed {
                    return Err(CliError::Usage(format!(
                        "session already trains with seed {}, cannot switch to {seed}",
                        s.config.seed
                    )));
                }
            }
            return Ok(s);
        }
        let split = self.splits()?;
        let mut config = self.manifest.model_config.clone();
        if let Some(seed) = seed {
            config.seed = seed;
        }
        Ok(TrainingSession::new(split.train, split.validation, config)?)
    }

    fn existing_session(&self) -> CliResult<TrainingSession> {
        if !self.has_session() {
            return Err(CliError::Usage("no trained session in this run; run `infvec train` first".into()));
        }
        self.session(None)
    }

    fn save_session(&mut self, session: &TrainingSession) -> CliResult {
        let path = self.session_path();
        write_json(&path, session)?;
        self.manifest.artifact_paths.insert("session".into(), PathBuf::from(SESSION_FILE));
        Ok(())
    }

    fn model_config(&self, args: &RunArgs) -> ModelConfig {
        ModelConfig {
            seed: self.seed(args),
            ..self.manifest.model_config.clone()
        }
    }

    /// Records `key -> path`, writes the invocation checksums and the manifest.
    fn finish(&mut self, invocation: &Path, records: &[(String, PathBuf)]) -> CliResult {
        for (key, path) in records {
            let rel = self.dir.relative(path);
            self.manifest.artifact_paths.insert(key.clone(), rel);
        }
        RunDir::write_checksums(invocation)?;
        self.dir.save_manifest(&self.manifest)?;
        println!("{}", invocation.display());
        Ok(())
    }

    fn artifact(&self, key: &str) -> Option<PathBuf> {
        self.manifest.artifact_paths.get(key).map(|p| self.dir.resolve(p))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(infvec_core::Error::from)? + "\n";
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

fn checkpoint_sha(params: &ModelParams) -> CliResult<String> {
    Ok(sha256_hex(&serde_json::to_vec(params).map_err(infvec_core::Error::from)?))
}

fn influence_key(epoch: usize) -> String {
    format!("influence_e{epoch:04}")
}

fn model_config_for(preset: Preset, seed: u64, args: &ModelArgs) -> ModelConfig {
    let base = match preset {
        Preset::Mixture4 => ModelConfig {
            learning_rate: 0.1,
            ..ModelConfig::default()
        },
        Preset::SeparableNoisy | Preset::Nonseparable => ModelConfig::default(),
    };
    ModelConfig {
        architecture: match args.hidden {
            Some(hidden_width) => Architecture::Mlp { hidden_width },
            None => base.architecture,
        },
        learning_rate: args.lr.unwrap_or(base.learning_rate),
        weight_decay: args.weight_decay.unwrap_or(base.weight_decay),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        epochs: args.epochs.unwrap_or(base.epochs),
        seed,
    }
}

pub fn synth_gen(args: SynthGenArgs) -> CliResult {
    if args.out.join(infvec_core::harness::MANIFEST).exists() {
        return Err(CliError::Usage(format!("{} already holds a run", args.out.display())));
    }
    let model_config = model_config_for(args.preset, args.seed, &args.model);
    model_config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (split, preset, mut hyper) = match args.preset {
        Preset::SeparableNoisy => {
            let n_val = args.n_val.unwrap_or(200);
            let split = separable_noisy_split(
                args.n_blue,
                args.n_orange,
                args.flips_blue,
                args.flips_orange,
                n_val,
                args.seed,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?;
            let hyper = json!({
                "n_blue": args.n_blue, "n_orange": args.n_orange,
                "flips_blue": args.flips_blue, "flips_orange": args.flips_orange,
                "n_val_per_class": n_val,
            });
            (split, "separable-noisy", hyper)
        }
        Preset::Nonseparable => {
            let n_val = args.n_val.unwrap_or(350);
            let split =
                nonseparable_split(args.n_per_class, n_val, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            (split, "nonseparable", json!({ "n_per_class": args.n_per_class, "n_val_per_class": n_val }))
        }
        Preset::Mixture4 => {
            let n_val = args.n_val.unwrap_or(250);
            let spec = MixtureSpec::four_class();
            let split = mixture_split(&spec, vec![n_val; spec.num_classes()], args.seed)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            (split, "mixture4", json!({ "counts": spec.counts, "n_val_per_class": n_val }))
        }
    };
    hyper["preset"] = json!(preset);

    let dir = RunDir::create(&args.out)?;
    let inv = dir.new_invocation("synth-gen")?;
    let train_path = inv.join("train.csv");
    let val_path = inv.join("validation.csv");
    save_dataset(&split.train, &train_path)?;
    save_dataset(&split.validation, &val_path)?;
    let mut manifest = RunManifest {
        seed: args.seed,
        dataset_path: dir.relative(&train_path),
        model_config,
        hyperparameters: hyper
            .as_object()
            .expect("object literal")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        artifact_paths: Default::default(),
    };
    manifest
        .artifact_paths
        .insert(VALIDATION_ARTIFACT.into(), dir.relative(&val_path));
    let mut run = Run { dir, manifest };
    run.finish(&inv, &[])
}

pub fn train(args: TrainArgs) -> CliResult {
    let mut run = Run::open(&args.run)?;
    let mut session = run.session(args.run.seed)?;
    let weights = match &args.weights {
        Some(p) => {
            let ws = WeightSet::load_csv(p, (0.0, f64::MAX)).map_err(|e| CliError::Usage(e.to_string()))?;
            if ws.sample_ids != session.train.ids() {
                return Err(CliError::Usage(format!(
                    "{} does not list the training samples in order",
                    p.display()
                )));
            }
            Some(ws.w)
        }
        None => None,
    };
    let start = session.current_epoch();
    let count = args.epochs.unwrap_or(session.config.epochs.saturating_sub(start));
    let inv = run.dir.new_invocation("train")?;
    let log = inv.join("metrics.jsonl");
    let mut records = Vec::new();
    for _ in 0..count {
        let m = session.train_epoch(weights.as_deref())?.clone();
        append_metrics_log(&m, &log)?;
        let e = session.current_epoch();
        let path = inv.join(format!("checkpoint_e{e:04}.json"));
        save_checkpoint(session.checkpoint(e)?, &path)?;
        records.push((format!("checkpoint_e{e:04}"), path));
        log::info!("epoch {e}: per-class accuracy {:.4?}", m.per_class_accuracy);
    }
    run.save_session(&session)?;
    run.finish(&inv, &records)
}

fn resolve_epoch(session: &TrainingSession, epoch: Option<usize>) -> CliResult<usize> {
    let e = epoch.unwrap_or(session.current_epoch());
    session.checkpoint(e).map_err(|_| {
        CliError::Usage(format!("no checkpoint for epoch {e} (latest is {})", session.current_epoch()))
    })?;
    Ok(e)
}

pub fn influence(args: InfluenceArgs) -> CliResult {
    let mut run = Run::open(&args.run)?;
    let session = run.existing_session()?;
    let epoch = resolve_epoch(&session, args.epoch)?;
    let params = session.checkpoint(epoch)?;
    let config = InfluenceConfig {
        damping: args.damping,
        ..InfluenceConfig::default()
    };
    let m = compute_influence(params, &session.train, &session.validation, &session.config, &config)?;
    let inv = run.dir.new_invocation("influence")?;
    let csv = inv.join("influence.csv");
    m.save(&csv, &inv.join("influence.json"), &checkpoint_sha(params)?)?;
    run.finish(&inv, &[(influence_key(epoch), csv)])
}

fn load_influence(run: &Run, epoch: usize) -> CliResult<InfluenceMatrix> {
    let csv = run.artifact(&influence_key(epoch)).ok_or_else(|| {
        CliError::Usage(format!("no influence matrix for epoch {epoch}; run `infvec influence --epoch {epoch}` first"))
    })?;
    Ok(InfluenceMatrix::load(&csv, &csv.with_extension("json"))?)
}

pub fn ceiling(args: CeilingArgs) -> CliResult {
    let mut run = Run::open(&args.run)?;
    let session = run.existing_session()?;
    let epoch = resolve_epoch(&session, args.epoch)?;
    let m = load_influence(&run, epoch)?;
    let config = CeilingConfig {
        zero_tol: args.zero_tol,
        tau_region: args.tau_region,
        tau_residual: args.tau_residual,
        centering: match args.centering {
            CenteringArg::Mean => Centering::Mean,
            CenteringArg::Origin => Centering::Origin,
        },
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = ceiling_report(&m, &config)?;
    let inv = run.dir.new_invocation("ceiling")?;
    let path = inv.join("ceiling.json");
    report.save_json(&path)?;
    report.census.save_csv(&inv.join("regions.csv"))?;
    log::info!(
        "verdict {:?}: joint fraction {:.4}, residual {:.4}",
        report.verdict,
        report.census.joint_fraction(),
        report.residual_ratio
    );
    run.finish(&inv, &[(format!("ceiling_e{epoch:04}"), path)])
}

#[derive(Serialize)]
struct LooSummary {
    samples: usize,
    spearman: Option<f64>,
    sign_agreement: f64,
}

pub fn loo_oracle(args: LooArgs) -> CliResult {
    let mut run = Run::open(&args.run)?;
    let split = run.splits()?;
    let config = run.model_config(&args.run);
    let params = fit(&config, &split.train)?;
    let m = compute_influence(&params, &split.train, &split.validation, &config, &InfluenceConfig::default())?;
    let n = args.limit.unwrap_or(m.len()).min(m.len());
    let ids: Vec<usize> = m.rows[..n].iter().map(|r| r.sample_id).collect();
    let scores: Vec<f64> = m.rows[..n].iter().map(|r| r.p.iter().sum()).collect();
    let loo = loo_deltas(&split.train, &ids, &split.validation, &config)?;

    let inv = run.dir.new_invocation("loo-oracle")?;
    let mut text = String::from("sample_id,influence,loo_delta\n");
    for ((id, s), d) in ids.iter().zip(&scores).zip(&loo) {
        text += &format!("{id},{s:?},{d:?}\n");
    }
    let csv = inv.join("loo.csv");
    fs::write(&csv, text).map_err(io_err(&csv))?;
    let agree = scores.iter().zip(&loo).filter(|(s, d)| s.signum() == d.signum()).count();
    let summary = LooSummary {
        samples: n,
        spearman: spearman(&scores, &loo).ok(),
        sign_agreement: agree as f64 / n.max(1) as f64,
    };
    write_json(&inv.join("summary.json"), &summary)?;
    log::info!("spearman {:?}, sign agreement {:.3}", summary.spearman, summary.sign_agreement);
    run.finish(&inv, &[("loo_oracle".into(), csv)])
}

pub fn removal_exp(args: RemovalArgs) -> CliResult {
    let mut run = Run::open(&args.run)?;
    if !(0.0..1.0).contains(&args.fraction) {
        return Err(CliError::Usage(format!("--fraction must lie in [0, 1), got {}", args.fraction)));
    }
    let split = run.splits()?;
    let config = run.model_config(&args.run);
    let params = fit(&config, &split.train)?;
    let m = compute_influence(&params, &split.train, &split.validation, &config, &InfluenceConfig::default())?;
    let polarities = match args.polarity {
        PolarityArg::Beneficial => vec![Polarity::Beneficial],
        PolarityArg::Detrimental => vec![Polarity::Detrimental],
        PolarityArg::Both => vec![Polarity::Beneficial, Polarity::Detrimental],
    };
    let inv = run.dir.new_invocation("removal-exp")?;
    let mut reports = Vec::new();
    for p in polarities {
        let r = removal_experiment(&split.train, &split.validation, &config, &m, args.fraction, p)?;
        let name = match p {
            Polarity::Beneficial => "removal_beneficial.json",
            Polarity::Detrimental => "removal_detrimental.json",
        };
        write_json(&inv.join(name), &r)?;
        log::info!("{p:?}: diagonal hits {}/{}, spearman {:?}", r.diagonal_hits(), r.accuracy_change.len(), r.spearman);
        reports.push(r);
    }
    let counts = influence_class_counts(&m, &split.train, args.fraction)?;
    write_json(&inv.join("class_counts.json"), &counts)?;
    let summary = json!({
        "diagonal_hits": reports.iter().map(|r| r.diagonal_hits()).collect::<Vec<_>>(),
        "spearman": reports.iter().map(|r| r.spearman).collect::<Vec<_>>(),
        "pooled_spearman": pooled_spearman(&reports).ok(),
    });
    let path = inv.join("summary.json");
    write_json(&path, &summary)?;
    run.finish(&inv, &[("removal_exp".into(), path)])
}

fn search_config(run: &Run, args: &RunArgs, search: &SearchArgs) -> CliResult<ParetoConfig> {
    let config = ParetoConfig {
        ga: GAConfig {
            iterations: search.iterations,
            seed: run.seed(args),
            ..GAConfig::default()
        },
        weight_bounds: (search.w_min, search.w_max),
        influence: InfluenceConfig::default(),
    };
    config.ga.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(search.w_min.is_finite() && search.w_max.is_finite() && search.w_min < search.w_max) {
        return Err(CliError::Usage("--w-min must be below --w-max".into()));
    }
    Ok(config)
}

fn finish_search(
    mut run: Run,
    mut session: TrainingSession,
    outcome: GaOutcome,
    command: &str,
    commit: bool,
) -> CliResult {
    let inv = run.dir.new_invocation(command)?;
    let result_path = inv.join("pareto_result.json");
    outcome.result.save_json(&result_path)?;
    outcome.result.best_weights.save_csv(&inv.join("weights.csv"))?;
    let mut records = vec![(command.replace('-', "_"), result_path)];
    let mut refused = None;
    if commit {
        match commit_result(&mut session, &outcome) {
            Ok(after) => {
                let e = after.epoch_index;
                let path = inv.join(format!("checkpoint_e{e:04}.json"));
                save_checkpoint(session.checkpoint(e)?, &path)?;
                write_json(
                    &inv.join("commit.json"),
                    &json!({ "epoch": e, "before": outcome.result.baseline, "after": after, "delta": outcome.result.best_delta }),
                )?;
                records.push((format!("checkpoint_e{e:04}"), path));
                run.save_session(&session)?;
                for k in 0..session.num_classes() {
                    log::info!(
                        "class {k}: {:.2}% -> {:.2}% ({:+.2}%)",
                        100.0 * outcome.result.baseline.per_class_accuracy[k],
                        100.0 * after.per_class_accuracy[k],
                        100.0 * outcome.result.best_delta[k]
                    );
                }
            }
            Err(e) => refused = Some(e),
        }
    }
    run.finish(&inv, &records)?;
    match refused {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn targets(session: &TrainingSession, classes: &[usize]) -> CliResult<TargetSet> {
    TargetSet::new(classes.to_vec(), session.num_classes()).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn pareto_di(args: ParetoDiArgs) -> CliResult {
    let run = Run::open(&args.run)?;
    let session = run.existing_session()?;
    let epoch = resolve_epoch(&session, args.epoch)?;
    let targets = targets(&session, &args.search.targets)?;
    let config = search_config(&run, &args.run, &args.search)?;
    let outcome = pareto::search(&session, Mode::DirectImprovement, epoch, &targets, &config, false, None)?;
    finish_search(run, session, outcome, "pareto-di", !args.search.no_commit)
}

pub fn pareto_cc(args: ParetoCcArgs) -> CliResult {
    let run = Run::open(&args.run)?;
    let session = run.existing_session()?;
    let epoch = resolve_epoch(&session, args.epoch)?;
    if epoch == 0 {
        return Err(CliError::Usage("epoch 0 cannot be course-corrected".into()));
    }
    let targets = targets(&session, &args.search.targets)?;
    let config = search_config(&run, &args.run, &args.search)?;
    let outcome = pareto::search(
        &session,
        Mode::CourseCorrection,
        epoch,
        &targets,
        &config,
        args.allow_non_dropped,
        None,
    )
    .map_err(|e| match e {
        infvec_core::Error::Config(msg) => CliError::Usage(msg),
        e => e.into(),
    })?;
    finish_search(run, session, outcome, "pareto-cc", !args.search.no_commit)
}

pub fn trim(args: TrimArgs) -> CliResult {
    let mut run = Run::open(&args.run)?;
    let split = run.splits()?;
    let config = run.model_config(&args.run);
    let (trimmed, reports) = trim_to_fixed_point(
        &split.train,
        &split.validation,
        &config,
        &InfluenceConfig::default(),
        args.max_iterations,
    )?;
    let inv = run.dir.new_invocation("trim")?;
    let path = inv.join("trim_reports.json");
    write_json(&path, &reports)?;
    let trimmed_path = inv.join("trimmed_train.csv");
    save_dataset(&trimmed, &trimmed_path)?;
    let removed: Vec<usize> = reports.iter().flat_map(|r| r.removed_ids.iter().copied()).collect();
    let flipped_left = flipped_remaining(&trimmed);
    log::info!(
        "{} passes removed {} samples; {} relabeled samples remain",
        reports.len(),
        removed.len(),
        flipped_left
    );
    run.finish(&inv, &[("trim".into(), path), ("trimmed_train".into(), trimmed_path)])
}

fn flipped_remaining(ds: &Dataset) -> usize {
    let ids = ds.ids();
    ds.flipped_ids().iter().filter(|id| ids.contains(id)).count()
}

pub fn serve(args: ServeArgs) -> CliResult {
    let state = infvec_api::AppState::open(&args.root)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(infvec_api::serve(state, args.addr)).map_err(|e| {
        CliError::Runtime(infvec_core::Error::Io {
            path: args.root.clone(),
            source: e,
        })
    })
}
