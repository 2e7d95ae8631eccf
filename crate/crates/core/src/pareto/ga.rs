use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::session::TrainingSession;
use super::{fitness, infeasible_fitness, solve_reweight_lp, AlphaThresholds, TargetSet, WeightSet};
use crate::error::{io_err, Error, Result};
use crate::influence::InfluenceMatrix;
use crate::trainer::{evaluate_per_class, relative_change, EpochMetrics, ModelParams};

/// Genetic search settings. The four group sizes must add up to the
/// population size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GAConfig {
    pub iterations: usize,
    pub population_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub mutation_strength: f64,
    pub num_elites: usize,
    pub num_mutated_elites: usize,
    pub num_randoms: usize,
    pub num_crossover_children: usize,
    pub seed: u64,
    pub alpha_range: (f64, f64),
}

impl Default for GAConfig {
    fn default() -> Self {
        GAConfig {
            iterations: 20,
            population_size: 24,
            crossover_rate: 1.0,
            mutation_rate: 0.25,
            mutation_strength: 0.25,
            num_elites: 6,
            num_mutated_elites: 6,
            num_randoms: 6,
            num_crossover_children: 6,
            seed: 0,
            alpha_range: (0.0, 1.0),
        }
    }
}

impl GAConfig {
    pub fn validate(&self) -> Result<()> {
        let groups = self.num_elites + self.num_mutated_elites + self.num_randoms + self.num_crossover_children;
        if groups != self.population_size {
            return Err(Error::Config(format!(
                "elites + mutated elites + randoms + crossover children = {groups}, population is {}",
                self.population_size
            )));
        }
        if self.iterations == 0 || self.num_elites == 0 {
            return Err(Error::Config("need at least one generation and one elite".into()));
        }
        for (name, v) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.mutation_strength >= 0.0 && self.mutation_strength.is_finite()) {
            return Err(Error::Config("mutation_strength must be non-negative".into()));
        }
        let (lo, hi) = self.alpha_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config("alpha range needs finite alpha_min < alpha_max".into()));
        }
        Ok(())
    }
}

/// Called with the completed fraction of the search after each generation.
pub type Progress<'a> = &'a (dyn Fn(f64) + Sync);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Improve the epoch after `e`, measured against epoch `e`.
    #[serde(rename = "DI")]
    DirectImprovement,
    /// Redo epoch `e + 1`, measured against the original epoch `e + 1`.
    #[serde(rename = "CC")]
    CourseCorrection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub generation: usize,
    pub alpha: Vec<f64>,
    pub lp_status: LpStatus,
    pub delta: Option<Vec<f64>>,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoResult {
    pub mode: Mode,
    /// Epoch the weighted epoch starts from.
    pub base_epoch: usize,
    pub targets: Vec<usize>,
    pub best_weights: WeightSet,
    pub best_alpha: AlphaThresholds,
    pub best_fitness: f64,
    pub best_delta: Vec<f64>,
    /// Metrics the deltas are measured against.
    pub baseline: EpochMetrics,
    pub best_metrics: EpochMetrics,
    /// Best fitness seen up to and including each generation.
    pub generation_best: Vec<f64>,
    pub log: Vec<CandidateRecord>,
}

impl ParetoResult {
    /// True when some target did not strictly improve.
    pub fn has_sentinel(&self) -> bool {
        self.targets.iter().any(|&k| self.best_delta[k] <= 0.0)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(io_err(path))?)?)
    }
}

/// Search result plus the parameters of the best weighted epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaOutcome {
    pub result: ParetoResult,
    pub best_params: ModelParams,
}

#[derive(Clone)]
struct Evaluation {
    weights: Option<WeightSet>,
    delta: Option<Vec<f64>>,
    metrics: Option<EpochMetrics>,
    params: Option<ModelParams>,
    fitness: f64,
}

impl Evaluation {
    fn target_gain(&self, targets: &TargetSet) -> f64 {
        match &self.delta {
            Some(d) => targets.classes().iter().map(|&k| d[k]).sum(),
            None => f64::NEG_INFINITY,
        }
    }
}

struct Evaluator<'a> {
    session: &'a TrainingSession,
    base_epoch: usize,
    matrix: &'a InfluenceMatrix,
    targets: &'a TargetSet,
    bounds: (f64, f64),
    alpha_range: (f64, f64),
    baseline: EpochMetrics,
}

impl Evaluator<'_> {
    fn evaluate(&self, alpha: &[f64]) -> Result<Evaluation> {
        let thresholds = AlphaThresholds {
            alpha: alpha.to_vec(),
            range: self.alpha_range,
        };
        let Some(weights) = solve_reweight_lp(self.matrix, self.targets, &thresholds, self.bounds)? else {
            return Ok(Evaluation {
                weights: None,
                delta: None,
                metrics: None,
                params: None,
                fitness: infeasible_fitness(self.targets.num_classes()),
            });
        };
        let params = self.session.weighted_epoch(self.base_epoch, &weights.w)?;
        let metrics = evaluate_per_class(&params, &self.session.validation)?;
        let delta = relative_change(&self.baseline, &metrics)?;
        Ok(Evaluation {
            fitness: fitness(&delta, self.targets),
            weights: Some(weights),
            delta: Some(delta.delta),
            metrics: Some(metrics),
            params: Some(params),
        })
    }
}

fn key(alpha: &[f64]) -> Vec<u64> {
    alpha.iter().map(|a| a.to_bits()).collect()
}

/// Searches threshold vectors for the weighting whose single weighted epoch
/// from `base_epoch` scores best.
///
/// Each generation keeps the elites, adds mutated copies of them, uniform
/// crossovers of pairs of elites and fresh random draws. Deltas are measured
/// against epoch `base_epoch` (direct improvement) or against the original
/// epoch `base_epoch + 1` (course correction).
pub fn ga_search(
    session: &TrainingSession,
    base_epoch: usize,
    matrix: &InfluenceMatrix,
    targets: &TargetSet,
    config: &GAConfig,
    bounds: (f64, f64),
    mode: Mode,
    progress: Option<Progress<'_>>,
) -> Result<GaOutcome> {
    config.validate()?;
    let k = targets.num_classes();
    if matrix.num_classes != k || matrix.len() != session.train.len() {
        return Err(Error::Config(
            "influence matrix does not match the session's training split".into(),
        ));
    }
    let baseline = match mode {
        Mode::DirectImprovement => session.metrics(base_epoch)?.clone(),
        Mode::CourseCorrection => session.metrics(base_epoch + 1)?.clone(),
    };
    session.checkpoint(base_epoch)?;
    let evaluator = Evaluator {
        session,
        base_epoch,
        matrix,
        targets,
        bounds,
        alpha_range: config.alpha_range,
        baseline: baseline.clone(),
    };

    let (lo, hi) = config.alpha_range;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.mutation_strength * (hi - lo))
        .map_err(|e| Error::Config(format!("mutation noise: {e}")))?;
    let random_alpha = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..k).map(|_| rng.random_range(lo..=hi)).collect() };

    let mut population: Vec<Vec<f64>> = (0..config.population_size).map(|_| random_alpha(&mut rng)).collect();
    // evaluations and the order in which they were first seen
    let mut cache: HashMap<Vec<u64>, (usize, Evaluation)> = HashMap::new();
    let mut log = Vec::new();
    let mut generation_best = Vec::with_capacity(config.iterations);
    let mut best: Option<(usize, Vec<f64>)> = None;

    let rank = |a: &(usize, &Evaluation), b: &(usize, &Evaluation)| -> Ordering {
        b.1.fitness
            .total_cmp(&a.1.fitness)
            .then(b.1.target_gain(targets).total_cmp(&a.1.target_gain(targets)))
            .then(a.0.cmp(&b.0))
    };

    for generation in 0..config.iterations {
        let fresh: Vec<Vec<f64>> = {
            let mut seen = std::collections::HashSet::new();
            population
                .iter()
                .filter(|a| !cache.contains_key(&key(a)) && seen.insert(key(a)))
                .cloned()
                .collect()
        };
        let evaluated: Vec<Evaluation> = fresh
            .par_iter()
            .map(|a| evaluator.evaluate(a))
            .collect::<Result<_>>()?;
        for (a, e) in fresh.into_iter().zip(evaluated) {
            let order = cache.len();
            cache.insert(key(&a), (order, e));
        }

        for alpha in &population {
            let (order, e) = &cache[&key(alpha)];
            log.push(CandidateRecord {
                generation,
                alpha: alpha.clone(),
                lp_status: if e.weights.is_some() {
                    LpStatus::Optimal
                } else {
                    LpStatus::Infeasible
                },
                delta: e.delta.clone(),
                fitness: e.fitness,
            });
            if e.weights.is_none() {
                continue;
            }
            let better = match &best {
                None => true,
                Some((_, b)) => {
                    let (bo, be) = &cache[&key(b)];
                    rank(&(*order, e), &(*bo, be)) == Ordering::Less
                }
            };
            if better {
                best = Some((*order, alpha.clone()));
            }
        }
        generation_best.push(match &best {
            Some((_, b)) => cache[&key(b)].1.fitness,
            None => infeasible_fitness(k),
        });
        if let Some(report) = progress {
            report((generation + 1) as f64 / config.iterations as f64);
        }

        if generation + 1 == config.iterations {
            break;
        }
        let mut ranked: Vec<(usize, &Evaluation, &Vec<f64>)> = population
            .iter()
            .map(|a| {
                let (o, e) = &cache[&key(a)];
                (*o, e, a)
            })
            .collect();
        ranked.sort_by(|a, b| rank(&(a.0, a.1), &(b.0, b.1)));
        ranked.dedup_by(|a, b| a.0 == b.0);
        let elites: Vec<Vec<f64>> = ranked
            .iter()
            .cycle()
            .take(config.num_elites)
            .map(|r| r.2.clone())
            .collect();

        let mut next = elites.clone();
        for i in 0..config.num_mutated_elites {
            let mut child = elites[i % elites.len()].clone();
            for g in child.iter_mut() {
                if rng.random_bool(config.mutation_rate) {
                    *g = (*g + noise.sample(&mut rng)).clamp(lo, hi);
                }
            }
            next.push(child);
        }
        for _ in 0..config.num_crossover_children {
            let a = rng.random_range(0..elites.len());
            let mut b = rng.random_range(0..elites.len());
            if elites.len() > 1 {
                while b == a {
                    b = rng.random_range(0..elites.len());
                }
            }
            let child = if rng.random_bool(config.crossover_rate) {
                (0..k)
                    .map(|g| if rng.random_bool(0.5) { elites[a][g] } else { elites[b][g] })
                    .collect()
            } else {
                elites[a].clone()
            };
            next.push(child);
        }
        for _ in 0..config.num_randoms {
            next.push(random_alpha(&mut rng));
        }
        population = next;
    }

    let Some((_, alpha)) = best else {
        return Err(Error::AllInfeasible);
    };
    let e = cache.remove(&key(&alpha)).expect("best is cached").1;
    let best_fitness = e.fitness;
    Ok(GaOutcome {
        result: ParetoResult {
            mode,
            base_epoch,
            targets: targets.classes().to_vec(),
            best_weights: e.weights.expect("feasible"),
            best_alpha: AlphaThresholds {
                alpha,
                range: config.alpha_range,
            },
            best_fitness,
            best_delta: e.delta.expect("feasible"),
            baseline,
            best_metrics: e.metrics.expect("feasible"),
            generation_best,
            log,
        },
        best_params: e.params.expect("feasible"),
    })
}
