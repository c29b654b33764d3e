//! Datasets, splits and minibatch sampling.

mod idx;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};

pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values { values: Vec<f64>, dim: usize },
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values { values, dim } => values.len() / dim,
        }
    }
}

/// Targets of a gathered batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    feature_shape: Vec<usize>,
    targets: Targets,
    tags: Vec<Split>,
    provenance: String,
}

/// Train/val/test fractions used when a dataset is split by seeded shuffle.
pub const DEFAULT_SPLIT: (f64, f64) = (0.70, 0.15);

impl Dataset {
    /// Builds a dataset with every example tagged `Train`.
    pub fn new(inputs: Vec<f64>, feature_shape: Vec<usize>, targets: Targets, provenance: impl Into<String>) -> Result<Self> {
        let dim: usize = feature_shape.iter().product();
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be at least 1".into()));
        }
        if inputs.len() % dim != 0 {
            return Err(Error::Shape(format!("{} input values not a multiple of D = {dim}", inputs.len())));
        }
        let n = inputs.len() / dim;
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} examples", targets.len())));
        }
        if let Targets::Classes { labels, n_classes } = &targets {
            if labels.iter().any(|l| l >= n_classes) {
                return Err(Error::Shape("label outside class range".into()));
            }
        }
        Ok(Self { inputs, feature_shape, targets, tags: vec![Split::Train; n], provenance: provenance.into() })
    }

    /// Re-tags examples by a seeded shuffle into train/val/test fractions.
    /// Validation and test each receive at least one example when `n ≥ 3`.
    pub fn with_shuffled_split(mut self, seed: u64, train_frac: f64, val_frac: f64) -> Result<Self> {
        let n = self.len();
        if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&val_frac) || train_frac + val_frac > 1.0 {
            return Err(Error::Config(format!("invalid split fractions {train_frac}/{val_frac}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut RngStream::new(seed, streams::SPLIT).generator());
        let test_frac = 1.0 - train_frac - val_frac;
        let mut n_val = (val_frac * n as f64).floor() as usize;
        let mut n_test = (test_frac * n as f64 + 1e-9).floor() as usize;
        if n >= 3 {
            n_val = n_val.max(usize::from(val_frac > 0.0));
            n_test = n_test.max(usize::from(test_frac > 1e-12));
        }
        if n_val + n_test >= n {
            return Err(Error::Config(format!("dataset of {n} examples too small to split")));
        }
        let n_train = n - n_val - n_test;
        for (pos, &i) in order.iter().enumerate() {
            self.tags[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(self)
    }

    /// Tags every example explicitly.
    pub fn with_tags(mut self, tags: Vec<Split>) -> Result<Self> {
        if tags.len() != self.len() {
            return Err(Error::Shape(format!("{} tags for {} examples", tags.len(), self.len())));
        }
        self.tags = tags;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Flattened feature dimension D.
    pub fn dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { n_classes, .. } => Some(*n_classes),
            Targets::Values { .. } => None,
        }
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.tags[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == split).collect()
    }

    /// Inputs of `indices` as a `[n, feature_shape...]` tensor plus their targets.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, BatchTargets)> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("index {i} out of range for {} examples", self.len())));
            }
            data.extend_from_slice(self.input(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        let targets = match &self.targets {
            Targets::Classes { labels, .. } => BatchTargets::Classes(indices.iter().map(|&i| labels[i]).collect()),
            Targets::Values { values, dim } => {
                BatchTargets::Values(indices.iter().flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied()).collect())
            }
        };
        Ok((Tensor::new(shape, data)?, targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    #[serde(rename = "two-moons")]
    TwoMoons,
    #[serde(rename = "spirals")]
    Spirals,
    #[serde(rename = "gaussian-blobs")]
    GaussianBlobs,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-moons" | "moons" => Ok(Self::TwoMoons),
            "spirals" => Ok(Self::Spirals),
            "gaussian-blobs" | "blobs" => Ok(Self::GaussianBlobs),
            other => Err(Error::Config(format!("unknown dataset generator `{other}`"))),
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoMoons => "two-moons",
            Self::Spirals => "spirals",
            Self::GaussianBlobs => "gaussian-blobs",
        })
    }
}

/// Number of classes and centre radius of the blob generator.
pub const BLOB_CLASSES: usize = 3;
pub const BLOB_RADIUS: f64 = 4.0;

/// Generates a two-dimensional classification set and splits it 70/15/15.
///
/// * `two-moons`: class 0 on the upper unit arc `(cos t, sin t)`, class 1 on
///   the lower arc `(1 − cos t, 0.5 − sin t)`, `t` evenly spaced on `[0, π]`.
/// * `spirals`: two interleaved arms `r = t`, angle `3πt + cπ`, `t ∈ [0.1, 1]`.
/// * `gaussian-blobs`: three classes centred on a circle of radius 4.
///
/// Isotropic Gaussian noise of standard deviation `noise` is added to every
/// coordinate.
pub fn generate(kind: GeneratorKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::Config(format!("need n >= 4, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {noise}")));
    }
    let mut rng = RngStream::new(seed, streams::DATA).generator();
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let n_classes = match kind {
        GeneratorKind::TwoMoons => {
            let n0 = n / 2;
            let n1 = n - n0;
            for (class, count) in [(0usize, n0), (1, n1)] {
                for j in 0..count {
                    let t = if count > 1 { std::f64::consts::PI * j as f64 / (count - 1) as f64 } else { 0.0 };
                    let (x, y) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                    inputs.extend([x, y]);
                    labels.push(class);
                }
            }
            2
        }
        GeneratorKind::Spirals => {
            let n0 = n / 2;
            for (class, count) in [(0usize, n0), (1, n - n0)] {
                for j in 0..count {
                    let t = 0.1 + 0.9 * j as f64 / (count.max(2) - 1) as f64;
                    let angle = 3.0 * std::f64::consts::PI * t + class as f64 * std::f64::consts::PI;
                    inputs.extend([t * angle.cos(), t * angle.sin()]);
                    labels.push(class);
                }
            }
            2
        }
        GeneratorKind::GaussianBlobs => {
            for j in 0..n {
                let class = j % BLOB_CLASSES;
                let a = 2.0 * std::f64::consts::PI * class as f64 / BLOB_CLASSES as f64;
                inputs.extend([BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin()]);
                labels.push(class);
            }
            BLOB_CLASSES
        }
    };
    if noise > 0.0 {
        for v in &mut inputs {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise * z;
        }
    }
    let provenance = format!("{kind}(n={n}, noise={noise}, seed={seed})");
    Dataset::new(inputs, vec![2], Targets::Classes { labels, n_classes }, provenance)?
        .with_shuffled_split(seed, DEFAULT_SPLIT.0, DEFAULT_SPLIT.1)
}

/// Indices into one split of a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub split: Split,
    pub indices: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Fails if any index lies outside the batch's split.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::Empty("minibatch"));
        }
        for &i in &self.indices {
            if i >= data.len() || data.split_of(i) != self.split {
                return Err(Error::SplitLeak { index: i, split: self.split.name() });
            }
        }
        Ok(())
    }
}

/// One epoch of shuffled-without-replacement batches over `split`. The last
/// batch is short when the split size is not a multiple of `batch_size`.
pub fn sample_batches(data: &Dataset, split: Split, batch_size: usize, rng: &RngStream, epoch: usize) -> Result<Vec<Minibatch>> {
    let mut idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Empty("split"));
    }
    if batch_size == 0 || batch_size > idx.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in [1, {}] for the {split} split",
            idx.len()
        )));
    }
    idx.shuffle(&mut rng.derive(epoch as u64).generator());
    Ok(idx.chunks(batch_size).map(|c| Minibatch { split, indices: c.to_vec() }).collect())
}

/// Batches per epoch for a split of `split_len` examples.
pub fn batches_per_epoch(split_len: usize, batch_size: usize) -> usize {
    split_len.div_ceil(batch_size)
}
