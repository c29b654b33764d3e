//! What optimizers and landscape analyses run against.
//!
//! [`Objective`] is anything that can be evaluated at a parameter vector;
//! [`Trainable`] adds per-epoch batches and minibatch gradients. Two
//! implementations cover the crate: [`Supervised`] (a model on a dataset)
//! and [`Analytic`] (a closed-form loss with optional seeded gradient noise,
//! where one noise draw plays the role of a minibatch).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::data::{batches_per_epoch, sample_batches, Dataset, Minibatch, Split};
use crate::error::{Error, Result};
use crate::models::{AnalyticLoss, BatchNormState, Evaluation, Model};
use crate::params::{Gradient, Layout, ParameterVector};
use crate::rng::RngStream;

pub trait Objective: Sync {
    fn layout(&self) -> &Arc<Layout>;

    /// Full-pass loss and metric for each requested split, in order.
    fn evaluate(&self, params: &ParameterVector, splits: &[Split]) -> Result<Vec<Evaluation>>;

    fn evaluate_one(&self, params: &ParameterVector, split: Split) -> Result<Evaluation> {
        Ok(self.evaluate(params, &[split])?.remove(0))
    }
}

pub trait Trainable: Objective {
    type Batch: Send + Sync;

    /// The batches of one epoch, a pure function of `(rng, epoch)`.
    fn epoch_batches(&self, rng: &RngStream, epoch: usize) -> Result<Vec<Self::Batch>>;

    /// Batches per epoch (constant across epochs).
    fn iterations_per_epoch(&self) -> usize;

    fn gradient(&self, params: &ParameterVector, batch: &Self::Batch) -> Result<Gradient>;
}

/// A model trained on the training split of a dataset.
#[derive(Debug, Clone)]
pub struct Supervised {
    pub model: Model,
    pub data: Arc<Dataset>,
    pub batch_size: usize,
    /// Recompute batch-norm statistics on the training split before every
    /// evaluation. Only BN-free models may turn this off.
    pub recompute_bn: bool,
}

impl Supervised {
    pub fn new(model: Model, data: Arc<Dataset>, batch_size: usize) -> Result<Self> {
        let n_train = data.indices(Split::Train).len();
        if batch_size == 0 || batch_size > n_train {
            return Err(Error::Config(format!("batch size {batch_size} must be in [1, {n_train}]")));
        }
        Ok(Self { model, data, batch_size, recompute_bn: true })
    }

    pub fn without_bn_recompute(mut self) -> Result<Self> {
        if self.model.bn_layers() > 0 {
            return Err(Error::Config("batch-norm recomputation can only be disabled for BN-free models".into()));
        }
        self.recompute_bn = false;
        Ok(self)
    }

    pub fn bn_state(&self, params: &ParameterVector) -> Result<BatchNormState> {
        if self.recompute_bn {
            self.model.recompute_bn_stats(params, &self.data)
        } else {
            Ok(BatchNormState::default())
        }
    }
}

impl Objective for Supervised {
    fn layout(&self) -> &Arc<Layout> {
        self.model.layout()
    }

    fn evaluate(&self, params: &ParameterVector, splits: &[Split]) -> Result<Vec<Evaluation>> {
        let bn = self.bn_state(params)?;
        splits.iter().map(|&s| self.model.evaluate(params, &self.data, s, &bn)).collect()
    }
}

impl Trainable for Supervised {
    type Batch = Minibatch;

    fn epoch_batches(&self, rng: &RngStream, epoch: usize) -> Result<Vec<Minibatch>> {
        sample_batches(&self.data, Split::Train, self.batch_size, rng, epoch)
    }

    fn iterations_per_epoch(&self) -> usize {
        batches_per_epoch(self.data.indices(Split::Train).len(), self.batch_size)
    }

    fn gradient(&self, params: &ParameterVector, batch: &Minibatch) -> Result<Gradient> {
        self.model.gradient(params, &self.data, batch)
    }
}

/// A closed-form loss. Training adds `noise_sigma · ξ`, `ξ ~ N(0, I)`, to the
/// exact gradient; one `ξ` is drawn per iteration and shared by every
/// gradient evaluation of that iteration. Evaluation ignores the split.
#[derive(Debug, Clone)]
pub struct Analytic {
    pub loss: AnalyticLoss,
    pub noise_sigma: f64,
    pub iters_per_epoch: usize,
    layout: Arc<Layout>,
}

impl Analytic {
    pub fn new(loss: AnalyticLoss) -> Self {
        Self { layout: Arc::new(Layout::flat(loss.dim())), loss, noise_sigma: 0.0, iters_per_epoch: 1 }
    }

    pub fn with_noise(mut self, sigma: f64, iters_per_epoch: usize) -> Self {
        self.noise_sigma = sigma;
        self.iters_per_epoch = iters_per_epoch.max(1);
        self
    }

    pub fn point(&self, theta: Vec<f64>) -> Result<ParameterVector> {
        ParameterVector::new(theta, self.layout.clone())
    }
}

impl Objective for Analytic {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn evaluate(&self, params: &ParameterVector, splits: &[Split]) -> Result<Vec<Evaluation>> {
        params.check_layout(&self.layout)?;
        let loss = self.loss.value(params.values())?;
        Ok(splits.iter().map(|_| Evaluation { loss, metric: None }).collect())
    }
}

impl Trainable for Analytic {
    type Batch = Vec<f64>;

    fn epoch_batches(&self, rng: &RngStream, epoch: usize) -> Result<Vec<Vec<f64>>> {
        let d = self.loss.dim();
        let all = rng.derive(epoch as u64).standard_normals(d * self.iters_per_epoch);
        Ok(all.chunks(d).map(|c| c.to_vec()).collect())
    }

    fn iterations_per_epoch(&self) -> usize {
        self.iters_per_epoch
    }

    fn gradient(&self, params: &ParameterVector, noise: &Vec<f64>) -> Result<Gradient> {
        params.check_layout(&self.layout)?;
        let (_, mut g) = self.loss.eval(params.values())?;
        if self.noise_sigma > 0.0 {
            for (gi, xi) in g.iter_mut().zip(noise) {
                *gi += self.noise_sigma * xi;
            }
        }
        let grad = Gradient::new(g, self.layout.clone(), 1)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(grad)
    }
}

/// Wraps a [`Trainable`] and counts gradient and evaluation calls.
#[derive(Debug)]
pub struct Counting<T> {
    pub inner: T,
    gradients: AtomicU64,
    evaluations: AtomicU64,
}

impl<T> Counting<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, gradients: AtomicU64::new(0), evaluations: AtomicU64::new(0) }
    }

    pub fn gradient_calls(&self) -> u64 {
        self.gradients.load(Ordering::Relaxed)
    }

    pub fn evaluation_calls(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.gradients.store(0, Ordering::Relaxed);
        self.evaluations.store(0, Ordering::Relaxed);
    }
}

impl<T: Objective> Objective for Counting<T> {
    fn layout(&self) -> &Arc<Layout> {
        self.inner.layout()
    }

    fn evaluate(&self, params: &ParameterVector, splits: &[Split]) -> Result<Vec<Evaluation>> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(params, splits)
    }
}

impl<T: Trainable + Sync> Trainable for Counting<T> {
    type Batch = T::Batch;

    fn epoch_batches(&self, rng: &RngStream, epoch: usize) -> Result<Vec<Self::Batch>> {
        self.inner.epoch_batches(rng, epoch)
    }

    fn iterations_per_epoch(&self) -> usize {
        self.inner.iterations_per_epoch()
    }

    fn gradient(&self, params: &ParameterVector, batch: &Self::Batch) -> Result<Gradient> {
        self.gradients.fetch_add(1, Ordering::Relaxed);
        self.inner.gradient(params, batch)
    }
}
