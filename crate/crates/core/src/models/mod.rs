//! The model zoo: linear, MLP, MLP with batch norm, and a tiny convnet.
//!
//! Architectures are named by spec strings of the form
//! `name[int-int-...]`, e.g. `mlp[2-16-16-2]` or `tinyconv[4]`.

pub mod analytic;
mod metrics;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{BnMode, NodeId, Tape, Tensor};
use crate::data::{BatchTargets, Dataset, Minibatch, Split, Targets};
use crate::error::{Error, Result};
use crate::params::{Gradient, Layout, ParameterVector};
use crate::rng::RngStream;

pub use analytic::{AnalyticLoss, Well};
pub use metrics::{accuracy, f1_macro, MetricKind};

/// Variance stabilizer added inside every batch-norm layer.
pub const BN_EPS: f64 = 1e-5;

/// Convolution kernel size used by `tinyconv`.
pub const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    Mlp,
    MlpBn,
    TinyConv,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Self::Linear, Self::Mlp, Self::MlpBn, Self::TinyConv];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Mlp => "mlp",
            Self::MlpBn => "mlpbn",
            Self::TinyConv => "tinyconv",
        }
    }
}

/// Parsed architecture spec string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub arch: Architecture,
    pub dims: Vec<usize>,
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, dims) = match s.find('[') {
            Some(open) => {
                let inner = s[open + 1..]
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("missing `]` in architecture `{s}`")))?;
                let dims = inner
                    .split('-')
                    .map(|t| {
                        t.trim()
                            .parse::<i64>()
                            .map_err(|_| Error::Config(format!("bad width `{t}` in `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if let Some(bad) = dims.iter().find(|&&d| d <= 0) {
                    return Err(Error::Config(format!("non-positive width {bad} in `{s}`")));
                }
                (&s[..open], dims.into_iter().map(|d| d as usize).collect())
            }
            None => (s, Vec::new()),
        };
        let arch = Architecture::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::UnknownArchitecture(name.to_owned()))?;
        Ok(Self { arch, dims })
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.arch.name())?;
        if !self.dims.is_empty() {
            let dims: Vec<String> = self.dims.iter().map(ToString::to_string).collect();
            write!(f, "[{}]", dims.join("-"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    HalfSquaredError,
}

/// What a model must map from and to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskShape {
    pub feature_shape: Vec<usize>,
    pub outputs: usize,
    pub loss: LossKind,
}

impl TaskShape {
    pub fn of(data: &Dataset) -> Self {
        let (outputs, loss) = match data.targets() {
            Targets::Classes { n_classes, .. } => (*n_classes, LossKind::CrossEntropy),
            Targets::Values { dim, .. } => (*dim, LossKind::HalfSquaredError),
        };
        Self { feature_shape: data.feature_shape().to_vec(), outputs, loss }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Layer {
    Flatten,
    // No bias when batch norm follows: the mean subtraction cancels it.
    Dense { weight: usize, bias: Option<usize> },
    Conv { weight: usize, bias: Option<usize> },
    BatchNorm { gamma: usize, beta: usize },
    Tanh,
}

/// Per-layer batch-norm statistics used at evaluation time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchNormState {
    pub layers: Vec<BnStats>,
    /// Number of examples the statistics were accumulated over.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Where batch-norm layers take their statistics from.
#[derive(Debug, Clone, Copy)]
pub enum BnSource<'a> {
    Batch,
    State(&'a BatchNormState),
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchSpec,
    task: TaskShape,
    layers: Vec<Layer>,
    layout: Arc<Layout>,
    metric: MetricKind,
}

/// Per-example losses and raw model outputs for one batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub losses: Vec<f64>,
    pub predictions: Tensor,
}

/// Mean loss and task metric over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: Option<f64>,
}

impl Evaluation {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.metric.is_none_or(f64::is_finite)
    }
}

/// Builds a model for `task` and draws its initial parameters.
///
/// Weights are uniform on `±sqrt(6 / fan_in)`; biases and batch-norm shifts
/// start at 0 and batch-norm scales at 1. Draws follow segment order, so
/// the parameters are a pure function of `(spec, task, rng)`.
pub fn build_model(spec: &ArchSpec, task: &TaskShape, rng: &RngStream) -> Result<(Model, ParameterVector)> {
    let model = Model::new(spec.clone(), task.clone())?;
    let params = model.init_params(rng);
    Ok((model, params))
}

impl Model {
    pub fn new(spec: ArchSpec, task: TaskShape) -> Result<Self> {
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut layers = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| {
            shapes.push((name, shape));
            shapes.len() - 1
        };
        let d_in: usize = task.feature_shape.iter().product();
        if d_in == 0 || task.outputs == 0 {
            return Err(Error::Config("task needs at least one input feature and one output".into()));
        }
        let check_ends = |dims: &[usize]| -> Result<()> {
            if dims.len() < 2 {
                return Err(Error::Config(format!("`{spec}` needs at least input and output widths")));
            }
            if dims[0] != d_in || dims[dims.len() - 1] != task.outputs {
                return Err(Error::Shape(format!(
                    "`{spec}` maps {} -> {}, task has {d_in} features and {} outputs",
                    dims[0],
                    dims[dims.len() - 1],
                    task.outputs
                )));
            }
            Ok(())
        };
        match spec.arch {
            Architecture::Linear => {
                let dims = if spec.dims.is_empty() { vec![d_in, task.outputs] } else { spec.dims.clone() };
                check_ends(&dims)?;
                if dims.len() != 2 {
                    return Err(Error::Config(format!("`{spec}` must have exactly two widths")));
                }
                layers.push(Layer::Flatten);
                let weight = push("fc0.weight".into(), vec![dims[1], dims[0]]);
                let bias = push("fc0.bias".into(), vec![dims[1]]);
                layers.push(Layer::Dense { weight, bias: Some(bias) });
            }
            Architecture::Mlp | Architecture::MlpBn => {
                check_ends(&spec.dims)?;
                layers.push(Layer::Flatten);
                let n = spec.dims.len() - 1;
                for i in 0..n {
                    let (fan_in, fan_out) = (spec.dims[i], spec.dims[i + 1]);
                    let normed = spec.arch == Architecture::MlpBn && i + 1 < n;
                    let weight = push(format!("fc{i}.weight"), vec![fan_out, fan_in]);
                    let bias = (!normed).then(|| push(format!("fc{i}.bias"), vec![fan_out]));
                    layers.push(Layer::Dense { weight, bias });
                    if i + 1 < n {
                        if normed {
                            let gamma = push(format!("bn{i}.gamma"), vec![fan_out]);
                            let beta = push(format!("bn{i}.beta"), vec![fan_out]);
                            layers.push(Layer::BatchNorm { gamma, beta });
                        }
                        layers.push(Layer::Tanh);
                    }
                }
            }
            Architecture::TinyConv => {
                let [c_in, h, w] = task.feature_shape[..] else {
                    return Err(Error::Shape(format!(
                        "tinyconv needs [channels, height, width] inputs, got {:?}",
                        task.feature_shape
                    )));
                };
                if spec.dims.is_empty() {
                    return Err(Error::Config("tinyconv needs at least one channel count".into()));
                }
                let mut prev = c_in;
                for (i, &c) in spec.dims.iter().enumerate() {
                    let weight = push(format!("conv{i}.weight"), vec![c, prev, CONV_KERNEL, CONV_KERNEL]);
                    layers.push(Layer::Conv { weight, bias: None });
                    let gamma = push(format!("bn{i}.gamma"), vec![c]);
                    let beta = push(format!("bn{i}.beta"), vec![c]);
                    layers.push(Layer::BatchNorm { gamma, beta });
                    layers.push(Layer::Tanh);
                    prev = c;
                }
                layers.push(Layer::Flatten);
                let weight = push("fc.weight".into(), vec![task.outputs, prev * h * w]);
                let bias = push("fc.bias".into(), vec![task.outputs]);
                layers.push(Layer::Dense { weight, bias: Some(bias) });
            }
        }
        let layout = Arc::new(Layout::from_shapes(shapes));
        let metric = match task.loss {
            LossKind::CrossEntropy => MetricKind::Accuracy,
            LossKind::HalfSquaredError => MetricKind::None,
        };
        Ok(Self { spec, task, layers, layout, metric })
    }

    pub fn with_metric(mut self, metric: MetricKind) -> Self {
        self.metric = metric;
        self
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn task(&self) -> &TaskShape {
        &self.task
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    pub fn bn_layers(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::BatchNorm { .. })).count()
    }

    pub fn init_params(&self, rng: &RngStream) -> ParameterVector {
        let mut g = rng.generator();
        let mut values = vec![0.0; self.layout.len()];
        for seg in self.layout.segments() {
            let slot = &mut values[seg.range()];
            if seg.name.ends_with(".weight") {
                let fan_in: usize = seg.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in slot {
                    *v = g.random_range(-bound..bound);
                }
            } else if seg.name.ends_with(".gamma") {
                slot.fill(1.0);
            }
        }
        ParameterVector::new(values, self.layout.clone()).expect("layout length")
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if x.shape[1..] != self.task.feature_shape[..] {
            return Err(Error::Shape(format!(
                "inputs of shape {:?}, model expects {:?}",
                &x.shape[1..],
                self.task.feature_shape
            )));
        }
        Ok(())
    }

    /// Records the network on `tape`; returns the output node and the
    /// batch-norm nodes in layer order.
    fn build(&self, tape: &mut Tape, params: &ParameterVector, x: Tensor, bn: BnSource<'_>) -> Result<(NodeId, Vec<NodeId>)> {
        params.check_layout(&self.layout)?;
        self.check_input(&x)?;
        if let BnSource::State(state) = bn {
            if state.layers.len() != self.bn_layers() {
                return Err(Error::Shape(format!(
                    "batch-norm state has {} layers, model has {}",
                    state.layers.len(),
                    self.bn_layers()
                )));
            }
        }
        let segs = self.layout.segments();
        let mut h = tape.input(x);
        let mut bn_nodes = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Flatten => tape.flatten(h),
                Layer::Dense { weight, bias } => {
                    let w = tape.param(params, &segs[weight]);
                    let z = tape.matmul_t(h, w)?;
                    match bias {
                        Some(bias) => {
                            let b = tape.param(params, &segs[bias]);
                            tape.add_bias(z, b)?
                        }
                        None => z,
                    }
                }
                Layer::Conv { weight, bias } => {
                    let w = tape.param(params, &segs[weight]);
                    let z = tape.conv2d(h, w)?;
                    match bias {
                        Some(bias) => {
                            let b = tape.param(params, &segs[bias]);
                            tape.add_bias(z, b)?
                        }
                        None => z,
                    }
                }
                Layer::BatchNorm { gamma, beta } => {
                    let g = tape.param(params, &segs[gamma]);
                    let b = tape.param(params, &segs[beta]);
                    let mode = match bn {
                        BnSource::Batch => BnMode::Batch,
                        BnSource::State(state) => {
                            let s = &state.layers[bn_nodes.len()];
                            BnMode::Fixed { mean: &s.mean, var: &s.var }
                        }
                    };
                    let node = tape.batch_norm(h, g, b, mode, BN_EPS)?;
                    bn_nodes.push(node);
                    node
                }
                Layer::Tanh => tape.tanh(h),
            };
        }
        Ok((h, bn_nodes))
    }

    fn loss_node(&self, tape: &mut Tape, out: NodeId, targets: &BatchTargets) -> Result<NodeId> {
        match (self.task.loss, targets) {
            (LossKind::CrossEntropy, BatchTargets::Classes(labels)) => tape.softmax_cross_entropy(out, labels),
            (LossKind::HalfSquaredError, BatchTargets::Values(values)) => tape.half_squared_error(out, values),
            _ => Err(Error::Shape("target kind does not match the model's loss".into())),
        }
    }

    /// Per-example losses and outputs on raw inputs.
    pub fn forward_tensor(&self, params: &ParameterVector, x: Tensor, targets: &BatchTargets, bn: BnSource<'_>) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let (out, _) = self.build(&mut tape, params, x, bn)?;
        let losses = self.loss_node(&mut tape, out, targets)?;
        Ok(ForwardOutput { losses: tape.value(losses).data.clone(), predictions: tape.value(out).clone() })
    }

    /// Per-example losses `ℓ(x_i; θ)` and outputs for a minibatch.
    pub fn forward(&self, params: &ParameterVector, data: &Dataset, batch: &Minibatch, bn: BnSource<'_>) -> Result<ForwardOutput> {
        batch.validate(data)?;
        let (x, t) = data.gather(&batch.indices)?;
        self.forward_tensor(params, x, &t, bn)
    }

    /// `(1/|B|) Σ ∇ℓ(θ; x_i)`, with batch-norm layers in batch-statistics mode.
    pub fn gradient_tensor(&self, params: &ParameterVector, x: Tensor, targets: &BatchTargets) -> Result<Gradient> {
        let n = x.rows();
        let mut tape = Tape::new();
        let (out, _) = self.build(&mut tape, params, x, BnSource::Batch)?;
        let losses = self.loss_node(&mut tape, out, targets)?;
        let mean = tape.mean(losses);
        let values = tape.backward(mean, self.layout.len())?;
        Gradient::new(values, self.layout.clone(), n)
    }

    pub fn gradient(&self, params: &ParameterVector, data: &Dataset, batch: &Minibatch) -> Result<Gradient> {
        batch.validate(data)?;
        let (x, t) = data.gather(&batch.indices)?;
        self.gradient_tensor(params, x, &t)
    }

    /// Replaces batch-norm statistics by the exact mean and population
    /// variance of every layer's input over the whole training split.
    ///
    /// One batch-statistics pass over the full split computes these layer by
    /// layer: each layer's input is produced by earlier layers normalized
    /// with their own full-split statistics.
    pub fn recompute_bn_stats(&self, params: &ParameterVector, data: &Dataset) -> Result<BatchNormState> {
        let train = data.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if self.bn_layers() == 0 {
            return Ok(BatchNormState { layers: Vec::new(), count: train.len() });
        }
        let (x, _) = data.gather(&train)?;
        let mut tape = Tape::new();
        let (_, nodes) = self.build(&mut tape, params, x, BnSource::Batch)?;
        let layers = nodes
            .into_iter()
            .map(|id| {
                let (mean, var) = tape.bn_stats(id).expect("batch-norm node");
                BnStats { mean: mean.to_vec(), var: var.to_vec() }
            })
            .collect();
        Ok(BatchNormState { layers, count: train.len() })
    }

    /// Mean loss and metric over a split using fixed batch-norm statistics.
    /// Non-finite values are returned as-is for the caller to flag.
    pub fn evaluate(&self, params: &ParameterVector, data: &Dataset, split: Split, bn: &BatchNormState) -> Result<Evaluation> {
        let idx = data.indices(split);
        if idx.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let (x, t) = data.gather(&idx)?;
        let out = self.forward_tensor(params, x, &t, BnSource::State(bn))?;
        let loss = out.losses.iter().sum::<f64>() / out.losses.len() as f64;
        let metric = match (&t, self.metric) {
            (_, MetricKind::None) => None,
            (BatchTargets::Classes(labels), kind) => Some(kind.compute(&out.predictions, labels)),
            (BatchTargets::Values(_), _) => None,
        };
        Ok(Evaluation { loss, metric })
    }
}
