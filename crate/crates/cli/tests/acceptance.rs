//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. A criterion also fails when it exceeds its time
//! budget.

use std::error::Error;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use infvec_core::ceiling::{ceiling_report, classify_regions, trim_to_fixed_point, CeilingConfig};
use infvec_core::datamodel::{
    mixture_split, nonseparable_split, separable_noisy_split, Dataset, MixtureSpec, Sample, SplitTag,
};
use infvec_core::harness::{pooled_spearman, removal_experiment, spearman, Polarity};
use infvec_core::influence::{build_hessian_operator, compute_influence, loo_deltas, HessianMode, InfluenceConfig};
use infvec_core::pareto::lp::rational_int;
use infvec_core::pareto::oracle::{random_instance, vertex_optimum};
use infvec_core::pareto::{
    fitness, reweight_lp, run_course_correction, run_direct_improvement, ParetoConfig, ReweightSolution, TargetSet,
    TrainingSession, SENTINEL,
};
use infvec_core::trainer::{
    evaluate_per_class, fit, relative_change, total_gradient, total_loss, Architecture, DeltaVector, EpochMetrics,
    ModelConfig, ModelParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), Box<dyn Error>>;

fn main() {
    let criteria: [(&str, u64, fn() -> Check); 11] = [
        ("gradient and Hessian finite differences", 60, derivatives),
        ("leave-one-out fidelity", 300, loo_fidelity),
        ("noisy dataset: flipped samples are joint-negative", 120, noisy_dataset),
        ("tradeoff dataset: mixed signs on a line", 120, tradeoff_dataset),
        ("iterated trimming removes every flipped sample", 180, trimming),
        ("weight LP equals vertex enumeration", 60, lp_oracle),
        ("fitness worked example and sentinel ordering", 60, fitness_formula),
        ("end-to-end direct improvement", 900, direct_improvement),
        ("end-to-end course correction", 900, course_correction),
        ("removal experiment diagonal", 600, removal),
        ("CLI artifacts are byte-identical on rerun", 900, cli_determinism),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {name} [{:.1}s of {budget}s] {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

/// max |a - b| / max |b|
fn normwise_relative(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn derivatives() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let (mut worst_grad, mut worst_hess) = (0.0f64, 0.0f64);
    for fixture in 0..100 {
        let dim = rng.random_range(2..=3);
        let k = rng.random_range(2..=3);
        let arch = if fixture % 2 == 0 {
            Architecture::Logistic
        } else {
            Architecture::Mlp { hidden_width: 3 }
        };
        let samples = (0..8)
            .map(|i| Sample {
                id: i,
                features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: i % k,
            })
            .collect();
        let ds = Dataset::new(samples, k, SplitTag::Train)?;
        let zeros = ModelParams::zeros(arch, dim, k);
        let p = zeros.with_theta((0..zeros.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let n = p.len();
        let shifted = |j: usize, step: f64| {
            let mut theta = p.theta.clone();
            theta[j] += step;
            p.with_theta(theta)
        };

        let mut fd_grad = Vec::with_capacity(n);
        for j in 0..n {
            fd_grad.push((total_loss(&shifted(j, h), &ds)? - total_loss(&shifted(j, -h), &ds)?) / (2.0 * h));
        }
        worst_grad = worst_grad.max(normwise_relative(&total_gradient(&p, &ds), &fd_grad));

        // non-convex models need some damping; it only shifts the diagonal
        let damping = 1e-6;
        let op = build_hessian_operator(&p, &ds, damping, HessianMode::Explicit)?;
        let mut analytic = op.matrix().ok_or("explicit mode built no matrix")?.clone();
        for i in 0..n {
            analytic[(i, i)] -= damping;
        }
        let mut fd_hess = vec![0.0; n * n];
        for j in 0..n {
            let (gp, gm) = (total_gradient(&shifted(j, h), &ds), total_gradient(&shifted(j, -h), &ds));
            for i in 0..n {
                fd_hess[j * n + i] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        // both column-major
        worst_hess = worst_hess.max(normwise_relative(analytic.as_slice(), &fd_hess));
    }
    let ok = worst_grad <= 1e-4 && worst_hess <= 1e-4;
    Ok((
        ok,
        format!("100 fixtures; worst relative error gradient {worst_grad:.2e}, Hessian {worst_hess:.2e} (limit 1e-4)"),
    ))
}

fn loo_fidelity() -> Check {
    let split = separable_noisy_split(20, 20, 3, 1, 100, 0)?;
    let model = ModelConfig {
        epochs: 2000,
        batch_size: 40,
        learning_rate: 1.0,
        weight_decay: 1e-3,
        ..ModelConfig::default()
    };
    let params = fit(&model, &split.train)?;
    let m = compute_influence(&params, &split.train, &split.validation, &model, &InfluenceConfig::default())?;
    let scores = m.total();
    let loo = loo_deltas(&split.train, &split.train.ids(), &split.validation, &model)?;
    let rho = spearman(&scores, &loo)?;
    let agree = scores.iter().zip(&loo).filter(|(a, b)| a.signum() == b.signum()).count();
    let agreement = agree as f64 / loo.len() as f64;
    Ok((
        rho >= 0.8 && agreement >= 0.85,
        format!("n = 40; Spearman {rho:.3} (>= 0.8), sign agreement {agree}/40 = {agreement:.3} (>= 0.85)"),
    ))
}

fn noisy_split() -> Result<infvec_core::datamodel::SplitPair, Box<dyn Error>> {
    Ok(separable_noisy_split(300, 300, 50, 20, 200, 0)?)
}

fn noisy_dataset() -> Check {
    let split = noisy_split()?;
    let model = ModelConfig::default();
    let params = fit(&model, &split.train)?;
    let before = evaluate_per_class(&params, &split.validation)?;
    let m = compute_influence(&params, &split.train, &split.validation, &model, &InfluenceConfig::default())?;
    let census = classify_regions(&m, 0.0);
    let negative = &census.joint_negative.ids;
    let flipped = split.train.flipped_ids();
    let hits = flipped.iter().filter(|id| negative.contains(id)).count();
    let recall = hits as f64 / flipped.len() as f64;
    let retrained = fit(&model, &split.train.without_ids(negative))?;
    let after = evaluate_per_class(&retrained, &split.validation)?;
    let both_improve = (0..2).all(|k| after.per_class_accuracy[k] > before.per_class_accuracy[k]);
    Ok((
        recall >= 0.9 && both_improve,
        format!(
            "{hits}/{} flipped joint-negative = {recall:.3} (>= 0.9); joint-negative set {} ({} clean); accuracy {:?} -> {:?} after removal (both must rise)",
            flipped.len(),
            negative.len(),
            negative.len() - hits,
            rounded(&before),
            rounded(&after)
        ),
    ))
}

fn rounded(m: &EpochMetrics) -> Vec<f64> {
    m.per_class_accuracy.iter().map(|a| (a * 1e4).round() / 1e4).collect()
}

fn tradeoff_dataset() -> Check {
    let split = nonseparable_split(350, 350, 0)?;
    let model = ModelConfig::default();
    let params = fit(&model, &split.train)?;
    let m = compute_influence(&params, &split.train, &split.validation, &model, &InfluenceConfig::default())?;
    let report = ceiling_report(&m, &CeilingConfig::default())?;
    let mixed = report.census.mixed.count as f64 / report.census.total() as f64;
    Ok((
        mixed >= 0.95 && report.residual_ratio < 0.05 && report.principal_axis_alignment > 0.9,
        format!(
            "mixed {mixed:.4} (>= 0.95), residual ratio {:.4} (< 0.05), axis alignment {:.4} (> 0.9), verdict {:?}",
            report.residual_ratio, report.principal_axis_alignment, report.verdict
        ),
    ))
}

fn trimming() -> Check {
    let split = noisy_split()?;
    let (trimmed, reports) = trim_to_fixed_point(
        &split.train,
        &split.validation,
        &ModelConfig::default(),
        &InfluenceConfig::default(),
        5,
    )?;
    let ids = trimmed.ids();
    let left = split.train.flipped_ids().iter().filter(|id| ids.contains(id)).count();
    let monotone = reports.iter().all(|r| {
        r.after
            .per_class_accuracy
            .iter()
            .zip(&r.before.per_class_accuracy)
            .all(|(a, b)| a >= b)
    });
    let removed: Vec<usize> = reports.iter().map(|r| r.removed_ids.len()).collect();
    Ok((
        left == 0 && monotone,
        format!(
            "{} passes removing {removed:?}; {left}/{} flipped remain (must be 0); per-pass accuracy non-decreasing: {monotone}",
            reports.len(),
            split.train.flipped_ids().len()
        ),
    ))
}

fn lp_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (lo, hi) = (rational_int(0), rational_int(2));
    let (mut agree, mut feasible) = (0, 0);
    for _ in 0..50 {
        let (rows, targets, alpha) = random_instance(&mut rng);
        let solved = match reweight_lp(&rows, &targets, &alpha, (lo.clone(), hi.clone()))? {
            ReweightSolution::Optimal { objective, .. } => Some(objective),
            ReweightSolution::Infeasible => None,
        };
        let oracle = vertex_optimum(&rows, &targets, &alpha, &lo, &hi);
        feasible += usize::from(oracle.is_some());
        agree += usize::from(solved == oracle);
    }
    Ok((
        agree == 50,
        format!("{agree}/50 exact rational agreements ({feasible} feasible, {} infeasible)", 50 - feasible),
    ))
}

fn fitness_formula() -> Check {
    let worked = DeltaVector {
        delta: vec![16.02, -0.78, 11.39, -2.31, -1.2, 0.0, 5.73, -0.11, -2.90, 0.12],
    };
    let f = fitness(&worked, &TargetSet::new(vec![0, 2], 10)?);
    let example_ok = (f - (-0.9125)).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let targets = TargetSet::new(vec![1, 3], 6)?;
    let clean = |d: &[f64]| targets.classes().iter().all(|&k| d[k] > 0.0);
    let draw = |rng: &mut ChaCha8Rng| DeltaVector {
        delta: (0..6)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(-1.0..1.0) })
            .collect(),
    };
    let (mut pairs, mut violations) = (0, 0);
    for _ in 0..20_000 {
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let (fa, fb) = (fitness(&a, &targets), fitness(&b, &targets));
        let (ca, cb) = (clean(&a.delta), clean(&b.delta));
        if ca != cb {
            pairs += 1;
            let (good, bad) = if ca { (fa, fb) } else { (fb, fa) };
            if good <= bad || bad > SENTINEL / 2.0 + 1.0 {
                violations += 1;
            }
        }
    }
    Ok((
        example_ok && violations == 0 && pairs > 0,
        format!("worked example F = {f} (-0.9125 within 1e-12); sentinel ordering violated in {violations}/{pairs} mixed pairs"),
    ))
}

fn mixture_session(epochs: usize) -> Result<TrainingSession, Box<dyn Error>> {
    let split = mixture_split(&MixtureSpec::four_class(), vec![250; 4], 0)?;
    let config = ModelConfig {
        learning_rate: 0.1,
        ..ModelConfig::default()
    };
    let mut s = TrainingSession::new(split.train, split.validation, config)?;
    for _ in 0..epochs {
        s.train_epoch(None)?;
    }
    Ok(s)
}

fn judge(delta: &DeltaVector, targets: &TargetSet) -> bool {
    targets.classes().iter().all(|&k| delta.delta[k] > 0.0)
        && targets.non_targets().iter().all(|&k| delta.delta[k] >= -0.03)
}

fn direct_improvement() -> Check {
    let targets = TargetSet::new(vec![0, 2], 4)?;
    let run = || -> Result<_, Box<dyn Error>> {
        let mut s = mixture_session(10)?;
        let out = run_direct_improvement(&mut s, 10, &targets, &ParetoConfig::default())?;
        Ok((out, s.current_epoch()))
    };
    let (first, epoch) = run()?;
    let (second, _) = run()?;
    let delta = relative_change(&first.before, &first.after)?;
    let deterministic = first == second;
    Ok((
        judge(&delta, &targets) && deterministic && epoch == 11,
        format!(
            "targets {{0, 2}}; committed epoch {epoch}; relative change {:?}; deterministic rerun: {deterministic}",
            delta.to_percent_strings()
        ),
    ))
}

fn course_correction() -> Check {
    let targets = TargetSet::new(vec![0, 2], 4)?;
    let mut s = mixture_session(10)?;
    let biased: Vec<f64> = s
        .train
        .samples()
        .iter()
        .map(|x| if x.label % 2 == 1 { 2.0 } else { 0.5 })
        .collect();
    s.train_epoch(Some(&biased))?;
    let drop = relative_change(s.metrics(10)?, s.metrics(11)?)?;
    let dropped = drop.delta.iter().filter(|&&d| d < 0.0).count();
    let out = run_course_correction(&mut s, 11, &targets, &ParetoConfig::default(), false)?;
    let delta = relative_change(&out.before, &out.after)?;
    Ok((
        dropped >= 2 && judge(&delta, &targets) && s.current_epoch() == 11,
        format!(
            "biased epoch drops {dropped} classes {:?}; replacement vs degraded epoch {:?}",
            drop.to_percent_strings(),
            delta.to_percent_strings()
        ),
    ))
}

fn removal() -> Check {
    let split = mixture_split(&MixtureSpec::four_class(), vec![250; 4], 0)?;
    let config = ModelConfig {
        learning_rate: 0.1,
        ..ModelConfig::default()
    };
    let params = fit(&config, &split.train)?;
    let m = compute_influence(&params, &split.train, &split.validation, &config, &InfluenceConfig::default())?;
    let b = removal_experiment(&split.train, &split.validation, &config, &m, 0.1, Polarity::Beneficial)?;
    let d = removal_experiment(&split.train, &split.validation, &config, &m, 0.1, Polarity::Detrimental)?;
    let (hb, hd) = (b.diagonal_hits(), d.diagonal_hits());
    let (rb, rd) = (b.spearman.unwrap_or(f64::NAN), d.spearman.unwrap_or(f64::NAN));
    let pooled = pooled_spearman(&[b, d])?;
    Ok((
        hb >= 3 && hd >= 3 && rb >= 0.8 && rd >= 0.8 && pooled >= 0.8,
        format!(
            "diagonal hits beneficial {hb}/4, detrimental {hd}/4 (>= 3); Spearman {rb:.3} / {rd:.3}, pooled {pooled:.3} (>= 0.8)"
        ),
    ))
}

/// Runs every artifact-writing command against `run`; returns exit codes.
fn cli_pipeline(run: &Path) -> Result<Vec<i32>, Box<dyn Error>> {
    let r = run.to_str().ok_or("non-utf8 path")?;
    let weights = run.join("artifacts/0007-pareto-di/weights.csv");
    let weights = weights.to_str().ok_or("non-utf8 path")?;
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth-gen", "--preset", "mixture4", "--seed", "1", "-o", r, "--epochs", "6"],
        vec!["train", "--run", r],
        vec!["influence", "--run", r],
        vec!["ceiling", "--run", r],
        vec!["removal-exp", "--run", r, "--fraction", "0.05"],
        vec!["loo-oracle", "--run", r, "--limit", "4"],
        vec!["pareto-di", "--run", r, "--targets", "0,2", "--iterations", "3"],
        vec!["train", "--run", r, "--epochs", "1", "--weights", weights],
        vec!["pareto-cc", "--run", r, "--targets", "1", "--allow-non-dropped", "--iterations", "3"],
        vec!["trim", "--run", r, "--max-iterations", "2"],
    ];
    let mut codes = Vec::new();
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_infvec"))
            .args(&args)
            .env("RUST_LOG", "error")
            .output()?;
        codes.push(out.status.code().unwrap_or(-1));
    }
    Ok(codes)
}

fn snapshot(run: &Path) -> Result<Vec<(String, Vec<u8>)>, Box<dyn Error>> {
    let mut out = vec![("manifest.json".to_string(), fs::read(run.join("manifest.json"))?)];
    let mut dirs: Vec<_> = fs::read_dir(run.join("artifacts"))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    dirs.sort();
    for d in dirs {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            let name = format!("{}/{}", d.file_name().unwrap_or_default().to_string_lossy(), p.file_name().unwrap_or_default().to_string_lossy());
            out.push((name, fs::read(&p)?));
        }
    }
    out.sort();
    Ok(out)
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let codes_a = cli_pipeline(&a)?;
    let codes_b = cli_pipeline(&b)?;
    let (sa, sb) = (snapshot(&a)?, snapshot(&b)?);
    let differing: Vec<&str> = sa
        .iter()
        .zip(&sb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let ok = codes_a == codes_b && sa.len() == sb.len() && differing.is_empty() && codes_a[..8].iter().all(|&c| c == 0);
    Ok((
        ok,
        format!(
            "{} invocations, {} files compared; exit codes {codes_a:?}; differing files {differing:?}",
            codes_a.len(),
            sa.len()
        ),
    ))
}
