//! Base optimizers, SAM perturbation, iterate averaging and the training
//! loop that composes them.

mod average;
mod sam;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradient, ParameterVector};

pub use average::AveragedState;
pub use sam::{sam_perturbation, sam_step, SamStepRecord};
pub use train::{run_training, run_training_observed, EpochRecord, FlatMode, StepEvent, TrainingResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKind {
    Sgd,
    SgdMomentum,
    Adam,
}

impl BaseKind {
    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Sgd => "sgd",
            BaseKind::SgdMomentum => "sgd-momentum",
            BaseKind::Adam => "adam",
        }
    }
}

impl fmt::Display for BaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(BaseKind::Sgd),
            "sgd-momentum" | "momentum" => Ok(BaseKind::SgdMomentum),
            "adam" => Ok(BaseKind::Adam),
            _ => Err(Error::Config(format!("unknown base optimizer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::Config(format!("unknown schedule `{s}`"))),
        }
    }
}

impl Schedule {
    /// Learning rate at step `t` of `total` (t = 0..total).
    pub fn lr(self, peak: f64, t: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => peak,
            Schedule::Cosine => {
                let frac = t as f64 / total.max(1) as f64;
                peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Everything one training run needs besides the objective and the flat
/// mode. Serialized as the optimizer section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base: BaseKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// SAM neighborhood radius.
    pub rho: f64,
    /// Averaging starts at epoch `floor(swa_start_frac · epochs)`.
    pub swa_start_frac: f64,
    /// Iterations between averaging events; one epoch when absent.
    pub swa_freq: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base: BaseKind::Sgd,
            lr: 0.05,
            schedule: Schedule::Constant,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            rho: 0.05,
            swa_start_frac: 0.75,
            swa_freq: None,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("adam betas must be in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam epsilon must be positive, got {}", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be non-negative, got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.swa_start_frac) {
            return bad(format!("swa_start_frac must be in [0, 1], got {}", self.swa_start_frac));
        }
        if self.swa_freq == Some(0) {
            return bad("swa_freq must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// First averaging epoch (0-based).
    pub fn swa_start_epoch(&self) -> usize {
        (self.swa_start_frac * self.epochs as f64 + 1e-9).floor() as usize
    }
}

/// Per-run optimizer state: step counter and moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    total_steps: u64,
    step: u64,
    velocity: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, dim: usize, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let buf = |on: bool| if on { vec![0.0; dim] } else { Vec::new() };
        Ok(Self {
            config: config.clone(),
            total_steps,
            step: 0,
            velocity: buf(config.base == BaseKind::SgdMomentum),
            m: buf(config.base == BaseKind::Adam),
            v: buf(config.base == BaseKind::Adam),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr(self.config.lr, self.step, self.total_steps)
    }

    /// One base update of `params` with `grad`.
    pub fn step(&mut self, params: &mut ParameterVector, grad: &Gradient) -> Result<()> {
        if !crate::params::same_layout(params.layout(), &grad.layout) {
            return Err(Error::Layout("gradient layout differs from parameter layout".into()));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let lr = self.current_lr();
        let wd = self.config.weight_decay;
        let theta = params.values_mut();
        let g = |i: usize, th: f64| if wd == 0.0 { grad.values[i] } else { grad.values[i] + wd * th };
        match self.config.base {
            BaseKind::Sgd => {
                for i in 0..theta.len() {
                    theta[i] -= lr * g(i, theta[i]);
                }
            }
            BaseKind::SgdMomentum => {
                let mu = self.config.momentum;
                for i in 0..theta.len() {
                    let gi = g(i, theta[i]);
                    self.velocity[i] = if mu == 0.0 { gi } else { mu * self.velocity[i] + gi };
                    theta[i] -= lr * self.velocity[i];
                }
            }
            BaseKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.adam_eps);
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for i in 0..theta.len() {
                    let gi = g(i, theta[i]);
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        self.step += 1;
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(p: &ParameterVector, g: Vec<f64>) -> Gradient {
        Gradient::new(g, p.layout().clone(), 1).unwrap()
    }

    fn config(base: BaseKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig { base, lr, ..Default::default() }
    }

    #[test]
    fn sgd_step() {
        let mut p = ParameterVector::from_vec(vec![1.0]);
        let g = grad(&p, vec![2.0]);
        Optimizer::new(&config(BaseKind::Sgd, 0.1), 1, 10).unwrap().step(&mut p, &g).unwrap();
        assert_eq!(p.values(), &[0.8]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParameterVector::from_vec(vec![0.0]);
        let g = grad(&p, vec![1.0]);
        Optimizer::new(&config(BaseKind::Adam, 0.01), 1, 10).unwrap().step(&mut p, &g).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        assert!((p.values()[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn zero_momentum_matches_sgd_bitwise() {
        let mut a = ParameterVector::from_vec(vec![0.3, -1.7, 2.2]);
        let mut b = a.clone();
        let mut sgd = Optimizer::new(&config(BaseKind::Sgd, 0.07), 3, 100).unwrap();
        let mom_cfg = OptimizerConfig { momentum: 0.0, ..config(BaseKind::SgdMomentum, 0.07) };
        let mut mom = Optimizer::new(&mom_cfg, 3, 100).unwrap();
        for k in 0..50 {
            let gv: Vec<f64> = a.values().iter().map(|x| x * x.sin() + k as f64 * 1e-3).collect();
            let ga = grad(&a, gv);
            let gb = Gradient::new(ga.values.clone(), b.layout().clone(), 1).unwrap();
            sgd.step(&mut a, &ga).unwrap();
            mom.step(&mut b, &gb).unwrap();
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = ParameterVector::from_vec(vec![0.0]);
        let g = grad(&p, vec![1.0]);
        let cfg = OptimizerConfig { momentum: 0.5, ..config(BaseKind::SgdMomentum, 1.0) };
        let mut opt = Optimizer::new(&cfg, 1, 10).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p.values(), &[-2.5]);
    }

    #[test]
    fn coupled_weight_decay() {
        let mut p = ParameterVector::from_vec(vec![2.0]);
        let g = grad(&p, vec![0.0]);
        let cfg = OptimizerConfig { weight_decay: 0.5, ..config(BaseKind::Sgd, 0.1) };
        Optimizer::new(&cfg, 1, 10).unwrap().step(&mut p, &g).unwrap();
        assert_eq!(p.values(), &[1.9]);
    }

    #[test]
    fn cosine_is_positive_and_non_increasing() {
        let total = 37;
        let lrs: Vec<f64> = (0..total).map(|t| Schedule::Cosine.lr(0.3, t, total)).collect();
        assert_eq!(lrs[0], 0.3);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| l > 0.0));
        assert!((Schedule::Cosine.lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = ParameterVector::from_vec(vec![1.0]);
        let g = grad(&p, vec![f64::NAN]);
        let err = Optimizer::new(&config(BaseKind::Sgd, 0.1), 1, 1).unwrap().step(&mut p, &g).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p.values(), &[1.0]);
    }

    #[test]
    fn start_epoch_and_validation() {
        let c = OptimizerConfig { epochs: 20, swa_start_frac: 0.75, ..Default::default() };
        assert_eq!(c.swa_start_epoch(), 15);
        let c = OptimizerConfig { epochs: 10, swa_start_frac: 0.6, ..Default::default() };
        assert_eq!(c.swa_start_epoch(), 6);
        assert!(OptimizerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { rho: -0.1, ..Default::default() }.validate().is_err());
        assert!("adagrad".parse::<BaseKind>().is_err());
    }
}
