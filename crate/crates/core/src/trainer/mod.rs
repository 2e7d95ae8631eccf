//! Weighted empirical-risk training with deterministic epoch replay, per-class
//! evaluation and relative accuracy change.

mod model;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{io_err, Error, Result};

pub use model::{Architecture, ModelParams};
pub(crate) use model::dot as dot_product;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Logistic,
            learning_rate: 0.5,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Base training schedule used for the image and text benchmarks.
    pub fn benchmark_reference() -> Self {
        ModelConfig {
            architecture: Architecture::Logistic,
            learning_rate: 0.4,
            weight_decay: 0.001,
            batch_size: 512,
            epochs: 25,
            seed: 0,
        }
    }

    /// Schedule used for the reweighted epochs of the LP+GA search on the
    /// image benchmark.
    pub fn reweighting_reference() -> Self {
        ModelConfig {
            architecture: Architecture::Logistic,
            learning_rate: 0.0001,
            weight_decay: 0.0001,
            batch_size: 512,
            epochs: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Architecture::Mlp { hidden_width: 0 } = self.architecture {
            return Err(Error::Config("hidden_width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-class accuracy after some epoch, measured on an evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub epoch_index: usize,
}

/// Relative per-class change, stored as a fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector {
    pub delta: Vec<f64>,
}

impl DeltaVector {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// Percent rendering with two decimals, e.g. `+16.02`.
    pub fn to_percent_strings(&self) -> Vec<String> {
        self.delta.iter().map(|d| format!("{:+.2}", d * 100.0)).collect()
    }
}

/// Starting parameters: zeros for logistic regression, scaled Gaussian draws
/// for the MLP (fan-in variance), keyed by the config seed.
pub fn init_params(config: &ModelConfig, input_dim: usize, num_classes: usize) -> ModelParams {
    let mut params = ModelParams::zeros(config.architecture, input_dim, num_classes);
    if let Architecture::Mlp { hidden_width: h } = config.architecture {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let w1 = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("finite std");
        let w2 = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("finite std");
        let d = input_dim;
        for v in &mut params.theta[..h * d] {
            *v = w1.sample(&mut rng);
        }
        let off = h * d + h;
        for v in &mut params.theta[off..off + num_classes * h] {
            *v = w2.sample(&mut rng);
        }
    }
    params
}

/// Order in which samples are visited during `epoch_index`. Depends only on
/// the seed and the epoch index.
pub fn batch_order(seed: u64, epoch_index: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch_index as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs `num_epochs` of mini-batch gradient descent on
/// `(1/n) sum_i w_i loss(z_i) + weight_decay * |theta|^2`.
///
/// Each mini-batch step uses `(1/|B|) sum_{i in B} w_i grad loss(z_i) +
/// 2 weight_decay theta`. Epoch `e` visits samples in [`batch_order`]`(seed, e)`.
pub fn train_weighted(
    init: &ModelParams,
    train: &Dataset,
    weights: &[f64],
    config: &ModelConfig,
    num_epochs: usize,
) -> Result<ModelParams> {
    if weights.len() != train.len() {
        return Err(Error::WeightLength {
            expected: train.len(),
            got: weights.len(),
        });
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config(format!(
            "weight {} of sample {} is not a finite non-negative number",
            weights[i],
            train.samples()[i].id
        )));
    }
    run_epochs(init, train, Some(weights), config, num_epochs)
}

/// Unweighted training, equivalent to all weights equal to one.
pub fn train(
    init: &ModelParams,
    train: &Dataset,
    config: &ModelConfig,
    num_epochs: usize,
) -> Result<ModelParams> {
    run_epochs(init, train, None, config, num_epochs)
}

/// Initializes from the config seed and trains for `config.epochs`.
pub fn fit(config: &ModelConfig, train_set: &Dataset) -> Result<ModelParams> {
    let init = init_params(config, train_set.dim(), train_set.num_classes());
    train(&init, train_set, config, config.epochs)
}

fn run_epochs(
    init: &ModelParams,
    train: &Dataset,
    weights: Option<&[f64]>,
    config: &ModelConfig,
    num_epochs: usize,
) -> Result<ModelParams> {
    config.validate()?;
    init.check_shape()?;
    if init.architecture != config.architecture {
        return Err(Error::Config(
            "parameter architecture differs from the training config".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split".into()));
    }
    if train.dim() != init.input_dim || train.num_classes() != init.num_classes {
        return Err(Error::Config(format!(
            "dataset shape ({} features, {} classes) does not match the model ({}, {})",
            train.dim(),
            train.num_classes(),
            init.input_dim,
            init.num_classes
        )));
    }
    let samples = train.samples();
    let mut params = init.clone();
    let mut grad = vec![0.0; params.len()];
    for _ in 0..num_epochs {
        let epoch = params.epoch_index + 1;
        let order = batch_order(config.seed, epoch, samples.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let w = weights.map_or(1.0, |w| w[i]);
                if w == 0.0 {
                    continue;
                }
                let s = &samples[i];
                let l = params.accumulate_gradient(&s.features, s.label, w * inv, &mut grad);
                epoch_loss += w * l;
            }
            let decay = 2.0 * config.weight_decay;
            for (t, g) in params.theta.iter_mut().zip(&grad) {
                *t -= config.learning_rate * (g + decay * *t);
            }
        }
        if !epoch_loss.is_finite() || params.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                message: format!("weighted training loss {epoch_loss}"),
            });
        }
        params.epoch_index = epoch;
    }
    Ok(params)
}

/// Per-class accuracy of `params` on `eval`.
pub fn evaluate_per_class(params: &ModelParams, eval: &Dataset) -> Result<EpochMetrics> {
    let k = eval.num_classes();
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for s in eval.samples() {
        total[s.label] += 1;
        if params.predict(&s.features) == s.label {
            correct[s.label] += 1;
        }
    }
    if let Some(c) = total.iter().position(|&t| t == 0) {
        return Err(Error::InvalidDataset(format!(
            "evaluation split has no sample of class {c}"
        )));
    }
    let per_class_accuracy = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| c as f64 / t as f64)
        .collect();
    Ok(EpochMetrics {
        per_class_accuracy,
        overall_accuracy: correct.iter().sum::<usize>() as f64 / eval.len() as f64,
        epoch_index: params.epoch_index,
    })
}

/// `(new_k - old_k) / old_k` for every class.
pub fn relative_change(old: &EpochMetrics, new: &EpochMetrics) -> Result<DeltaVector> {
    if old.per_class_accuracy.len() != new.per_class_accuracy.len() {
        return Err(Error::Config("metrics have different class counts".into()));
    }
    old.per_class_accuracy
        .iter()
        .zip(&new.per_class_accuracy)
        .enumerate()
        .map(|(k, (&o, &n))| {
            if o > 0.0 {
                Ok((n - o) / o)
            } else {
                Err(Error::UndefinedChange { class: k })
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(|delta| DeltaVector { delta })
}

/// Sum of sample losses over `set`.
pub fn total_loss(params: &ModelParams, set: &Dataset) -> Result<f64> {
    set.samples().iter().map(|s| params.loss(s)).sum()
}

/// Sum of sample loss gradients over `set`.
pub fn total_gradient(params: &ModelParams, set: &Dataset) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    for s in set.samples() {
        params.accumulate_gradient(&s.features, s.label, 1.0, &mut g);
    }
    g
}

pub const CHECKPOINT_FORMAT: &str = "infvec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: ModelParams,
}

/// Writes a JSON checkpoint: format tag, version, architecture, shape,
/// epoch index and theta.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    fs::write(path, serde_json::to_string(&file)? + "\n").map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    file.params.check_shape()?;
    Ok(file.params)
}

/// Appends `epoch,class,accuracy` rows, writing the header on first use.
pub fn append_metrics_log(metrics: &EpochMetrics, path: &Path) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut out = String::new();
    if fresh {
        out.push_str("epoch,class,accuracy\n");
    }
    for (k, a) in metrics.per_class_accuracy.iter().enumerate() {
        out.push_str(&format!("{},{k},{a}\n", metrics.epoch_index));
    }
    f.write_all(out.as_bytes()).map_err(io_err(path))
}
