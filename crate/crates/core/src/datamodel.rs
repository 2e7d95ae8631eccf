//! Datasets, synthetic generators and the on-disk formats shared by every run
//! artifact.
//!
//! A dataset file is a plain CSV with header `id,f0,...,f{d-1},label`. The
//! number of classes, the split tag and any generator metadata (the ids whose
//! labels were flipped) live in a JSON sidecar next to it, `<file>.meta.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::trainer::ModelConfig;

/// One labeled observation `z = (x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
}

/// An ordered, immutable collection of samples over `num_classes` labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    split: SplitTag,
    /// Ids whose labels were flipped by a noisy generator. Empty otherwise.
    flipped_ids: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset and checks its invariants: `K >= 2`, every label below
    /// `K`, one feature dimension, unique ids, and for validation splits at
    /// least one sample of every class.
    pub fn new(samples: Vec<Sample>, num_classes: usize, split: SplitTag) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset(format!("{split:?}")));
        }
        let dim = samples[0].features.len();
        let mut seen = BTreeSet::new();
        for s in &samples {
            if s.label >= num_classes {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has label {} but K = {num_classes}",
                    s.id, s.label
                )));
            }
            if s.features.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has {} features, expected {dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if !seen.insert(s.id) {
                return Err(Error::InvalidDataset(format!("duplicate id {}", s.id)));
            }
        }
        let ds = Dataset {
            samples,
            num_classes,
            split,
            flipped_ids: Vec::new(),
        };
        if split == SplitTag::Validation {
            let counts = ds.class_counts();
            if let Some(k) = counts.iter().position(|&c| c == 0) {
                return Err(Error::InvalidDataset(format!(
                    "validation split has no sample of class {k}"
                )));
            }
        }
        Ok(ds)
    }

    pub fn with_flipped_ids(mut self, mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        self.flipped_ids = ids;
        self
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn flipped_ids(&self) -> &[usize] {
        &self.flipped_ids
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// The samples with label `k` (S^k / V^k), as an unchecked subset that
    /// keeps the parent's split tag.
    pub fn class_subset(&self, k: usize) -> Dataset {
        self.filtered(|s| s.label == k)
    }

    /// Samples whose id is not in `ids`, in original order.
    pub fn without_ids(&self, ids: &[usize]) -> Dataset {
        let drop: BTreeSet<usize> = ids.iter().copied().collect();
        self.filtered(|s| !drop.contains(&s.id))
    }

    /// Samples whose id is in `ids`, in original order.
    pub fn select_ids(&self, ids: &[usize]) -> Dataset {
        let keep: BTreeSet<usize> = ids.iter().copied().collect();
        self.filtered(|s| keep.contains(&s.id))
    }

    /// Concatenation with `other`; ids of `other` must not collide.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        let mut flipped = self.flipped_ids.clone();
        flipped.extend_from_slice(&other.flipped_ids);
        Ok(Dataset::new(samples, self.num_classes, self.split)?.with_flipped_ids(flipped))
    }

    fn filtered(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        let samples: Vec<Sample> = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        let ids: BTreeSet<usize> = samples.iter().map(|s| s.id).collect();
        Dataset {
            num_classes: self.num_classes,
            split: self.split,
            flipped_ids: self
                .flipped_ids
                .iter()
                .copied()
                .filter(|id| ids.contains(id))
                .collect(),
            samples,
        }
    }
}

/// Geometry of the two-class synthetic sets. The generating distributions are
/// only described as "circular uniform", so these defaults are a documented
/// choice rather than recovered values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGeometry {
    /// Centers of the blue (class 0) and orange (class 1) disks for the
    /// separable set.
    pub separable_centers: [[f64; 2]; 2],
    pub separable_radius: f64,
    /// Blue disk of the non-separable set.
    pub nonseparable_blue_center: [f64; 2],
    pub nonseparable_blue_radius: f64,
    /// Orange shape of the non-separable set: radius `r0 * (1 + a sin(phi))`.
    pub nonseparable_orange_center: [f64; 2],
    pub nonseparable_orange_r0: f64,
    pub nonseparable_orange_a: f64,
}

impl Default for SyntheticGeometry {
    fn default() -> Self {
        SyntheticGeometry {
            separable_centers: [[-1.05, 0.0], [1.05, 0.0]],
            separable_radius: 1.0,
            nonseparable_blue_center: [-0.5, 0.0],
            nonseparable_blue_radius: 1.0,
            nonseparable_orange_center: [0.5, 0.0],
            nonseparable_orange_r0: 1.0,
            nonseparable_orange_a: 0.5,
        }
    }
}

fn uniform_disk(rng: &mut ChaCha8Rng, center: [f64; 2], radius: f64) -> Vec<f64> {
    let r = radius * rng.random::<f64>().sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    vec![center[0] + r * phi.cos(), center[1] + r * phi.sin()]
}

/// Two linearly separable disks with `flips_blue` blue points relabeled as
/// orange and `flips_orange` orange points relabeled as blue.
pub fn gen_separable_noisy(
    n_blue: usize,
    n_orange: usize,
    flips_blue: usize,
    flips_orange: usize,
    seed: u64,
) -> Result<Dataset> {
    gen_separable_noisy_with(
        &SyntheticGeometry::default(),
        n_blue,
        n_orange,
        flips_blue,
        flips_orange,
        seed,
        0,
    )
}

pub fn gen_separable_noisy_with(
    geometry: &SyntheticGeometry,
    n_blue: usize,
    n_orange: usize,
    flips_blue: usize,
    flips_orange: usize,
    seed: u64,
    first_id: usize,
) -> Result<Dataset> {
    if n_blue == 0 || n_orange == 0 {
        return Err(Error::Config(
            "class sizes of the separable generator must be positive".into(),
        ));
    }
    if flips_blue > n_blue || flips_orange > n_orange {
        return Err(Error::Config(format!(
            "cannot flip {flips_blue}/{flips_orange} labels out of {n_blue}/{n_orange}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_blue + n_orange);
    for (label, n) in [(0usize, n_blue), (1, n_orange)] {
        for _ in 0..n {
            let features = uniform_disk(
                &mut rng,
                geometry.separable_centers[label],
                geometry.separable_radius,
            );
            samples.push(Sample {
                id: first_id + samples.len(),
                features,
                label,
            });
        }
    }
    let blue: Vec<usize> = (0..n_blue).collect();
    let orange: Vec<usize> = (n_blue..n_blue + n_orange).collect();
    let mut flipped = Vec::with_capacity(flips_blue + flips_orange);
    for (pool, count) in [(blue, flips_blue), (orange, flips_orange)] {
        for idx in rand::seq::index::sample(&mut rng, pool.len(), count) {
            let s = &mut samples[pool[idx]];
            s.label = 1 - s.label;
            flipped.push(s.id);
        }
    }
    Ok(Dataset::new(samples, 2, SplitTag::Train)?.with_flipped_ids(flipped))
}

/// Two overlapping classes: a blue disk and an orange blob whose radius
/// depends on the angle from its center. No labels are flipped.
pub fn gen_nonseparable(n_per_class: usize, seed: u64) -> Result<Dataset> {
    gen_nonseparable_with(&SyntheticGeometry::default(), n_per_class, seed, 0)
}

pub fn gen_nonseparable_with(
    geometry: &SyntheticGeometry,
    n_per_class: usize,
    seed: u64,
    first_id: usize,
) -> Result<Dataset> {
    if n_per_class < 2 {
        return Err(Error::Config(format!(
            "non-separable generator needs at least 2 samples per class, got {n_per_class}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        let features = uniform_disk(
            &mut rng,
            geometry.nonseparable_blue_center,
            geometry.nonseparable_blue_radius,
        );
        samples.push(Sample {
            id: first_id + samples.len(),
            features,
            label: 0,
        });
    }
    let c = geometry.nonseparable_orange_center;
    for _ in 0..n_per_class {
        let phi = 2.0 * PI * rng.random::<f64>();
        let radius = geometry.nonseparable_orange_r0 * (1.0 + geometry.nonseparable_orange_a * phi.sin());
        let r = radius * rng.random::<f64>().sqrt();
        samples.push(Sample {
            id: first_id + samples.len(),
            features: vec![c[0] + r * phi.cos(), c[1] + r * phi.sin()],
            label: 1,
        });
    }
    Dataset::new(samples, 2, SplitTag::Train)
}

/// Isotropic Gaussian mixture with one component per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub centers: Vec<Vec<f64>>,
    pub std_devs: Vec<f64>,
    pub counts: Vec<usize>,
}

impl MixtureSpec {
    /// Four classes on the corners of a square, adjacent corners overlapping.
    /// Classes 0 and 2 are under-represented so that they trail the others
    /// early in training.
    pub fn four_class() -> Self {
        MixtureSpec {
            centers: vec![
                vec![-1.5, -1.5],
                vec![1.5, -1.5],
                vec![1.5, 1.5],
                vec![-1.5, 1.5],
            ],
            std_devs: vec![1.0, 1.0, 1.0, 1.0],
            counts: vec![60, 200, 60, 200],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn scaled(&self, counts: Vec<usize>) -> Self {
        MixtureSpec {
            counts,
            ..self.clone()
        }
    }
}

pub fn gen_gaussian_mixture(spec: &MixtureSpec, split: SplitTag, seed: u64) -> Result<Dataset> {
    let k = spec.centers.len();
    if k < 2 || spec.std_devs.len() != k || spec.counts.len() != k {
        return Err(Error::Config(
            "mixture needs >= 2 classes with matching centers, std_devs and counts".into(),
        ));
    }
    let dim = spec.centers[0].len();
    if dim == 0 || spec.centers.iter().any(|c| c.len() != dim) {
        return Err(Error::Config("mixture centers must share a positive dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(spec.counts.iter().sum());
    for label in 0..k {
        let normal = Normal::new(0.0, spec.std_devs[label])
            .map_err(|e| Error::Config(format!("bad std_dev for class {label}: {e}")))?;
        for _ in 0..spec.counts[label] {
            let features = spec.centers[label]
                .iter()
                .map(|&c| c + normal.sample(&mut rng))
                .collect();
            samples.push(Sample {
                id: samples.len(),
                features,
                label,
            });
        }
    }
    Dataset::new(samples, k, split)
}

/// A train/validation pair. The validation split is drawn from the same
/// distribution with a derived seed and never carries label noise.
#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: Dataset,
    pub validation: Dataset,
}

fn derived_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

pub fn separable_noisy_split(
    n_blue: usize,
    n_orange: usize,
    flips_blue: usize,
    flips_orange: usize,
    n_val_per_class: usize,
    seed: u64,
) -> Result<SplitPair> {
    let train = gen_separable_noisy(n_blue, n_orange, flips_blue, flips_orange, seed)?;
    let val = gen_separable_noisy_with(
        &SyntheticGeometry::default(),
        n_val_per_class,
        n_val_per_class,
        0,
        0,
        derived_seed(seed, 1),
        0,
    )?;
    Ok(SplitPair {
        train,
        validation: retag(val, SplitTag::Validation)?,
    })
}

pub fn nonseparable_split(n_per_class: usize, n_val_per_class: usize, seed: u64) -> Result<SplitPair> {
    let train = gen_nonseparable(n_per_class, seed)?;
    let val = gen_nonseparable_with(
        &SyntheticGeometry::default(),
        n_val_per_class,
        derived_seed(seed, 1),
        0,
    )?;
    Ok(SplitPair {
        train,
        validation: retag(val, SplitTag::Validation)?,
    })
}

pub fn mixture_split(spec: &MixtureSpec, val_counts: Vec<usize>, seed: u64) -> Result<SplitPair> {
    let train = gen_gaussian_mixture(spec, SplitTag::Train, seed)?;
    let validation = gen_gaussian_mixture(
        &spec.scaled(val_counts),
        SplitTag::Validation,
        derived_seed(seed, 1),
    )?;
    Ok(SplitPair { train, validation })
}

fn retag(ds: Dataset, split: SplitTag) -> Result<Dataset> {
    let flipped = ds.flipped_ids.clone();
    Ok(Dataset::new(ds.samples, ds.num_classes, split)?.with_flipped_ids(flipped))
}

/// Sidecar stored next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub split: SplitTag,
    #[serde(default)]
    pub flipped_ids: Vec<usize>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes the CSV and its `.meta.json` sidecar.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("id");
    for j in 0..dataset.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push_str(",label\n");
    for s in &dataset.samples {
        out.push_str(&s.id.to_string());
        for v in &s.features {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push_str(&format!(",{}\n", s.label));
    }
    fs::write(path, out).map_err(io_err(path))?;
    let meta = DatasetMeta {
        num_classes: dataset.num_classes,
        split: dataset.split,
        flipped_ids: dataset.flipped_ids.clone(),
    };
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&mp))?;
    Ok(())
}

/// Loads a dataset using its sidecar. Without a sidecar, K is inferred from the
/// largest label and the split is assumed to be `train`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mp = meta_path(path);
    if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        let ds = load_dataset_csv(path, meta.num_classes, meta.split)?;
        Ok(ds.with_flipped_ids(meta.flipped_ids))
    } else {
        let rows = parse_rows(path, None)?;
        let k = rows.iter().map(|s| s.label + 1).max().unwrap_or(0).max(2);
        Dataset::new(rows, k, SplitTag::Train)
    }
}

/// Loads the CSV alone with an explicit class count and split.
pub fn load_dataset_csv(path: &Path, num_classes: usize, split: SplitTag) -> Result<Dataset> {
    let rows = parse_rows(path, Some(num_classes))?;
    Dataset::new(rows, num_classes, split)
}

fn parse_rows(path: &Path, num_classes: Option<usize>) -> Result<Vec<Sample>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader.headers()?.clone();
    let ncols = header.len();
    if ncols < 3
        || &header[0] != "id"
        || &header[ncols - 1] != "label"
        || (1..ncols - 1).any(|j| header[j] != format!("f{}", j - 1))
    {
        return Err(parse_err(1, "header must be id,f0,...,f{d-1},label".into()));
    }
    let dim = ncols - 2;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != ncols {
            return Err(parse_err(
                line,
                format!("expected {ncols} fields, found {}", record.len()),
            ));
        }
        let id = record[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("bad id '{}': {e}", &record[0])))?;
        let mut features = Vec::with_capacity(dim);
        for j in 0..dim {
            let v = record[j + 1]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("bad feature f{j} '{}': {e}", &record[j + 1])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature f{j}")));
            }
            features.push(v);
        }
        let label = record[ncols - 1]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("bad label '{}': {e}", &record[ncols - 1])))?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(parse_err(line, format!("label {label} out of range for K = {k}")));
            }
        }
        samples.push(Sample { id, features, label });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(samples)
}

pub const VALIDATION_ARTIFACT: &str = "validation";

/// Describes one run: where its data lives, how the model is configured and
/// which artifacts earlier commands produced. Paths are relative to the run
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub dataset_path: PathBuf,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub artifact_paths: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }

    pub fn hyper_f64(&self, key: &str) -> Option<f64> {
        self.hyperparameters.get(key).and_then(|v| v.as_f64())
    }

    /// Loads the training set and the validation set recorded under the
    /// `validation` artifact, resolving relative paths against `base`.
    pub fn load_splits(&self, base: &Path) -> Result<SplitPair> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let val = self
            .artifact_paths
            .get(VALIDATION_ARTIFACT)
            .ok_or_else(|| Error::Config(format!("manifest has no '{VALIDATION_ARTIFACT}' artifact")))?;
        Ok(SplitPair {
            train: load_dataset(&resolve(&self.dataset_path))?,
            validation: load_dataset(&resolve(val))?,
        })
    }
}
