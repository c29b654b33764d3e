use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::models::Evaluation;
use crate::objective::Trainable;
use crate::params::ParameterVector;
use crate::rng::RngStream;

use super::{sam_step, AveragedState, Optimizer, OptimizerConfig, SamStepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlatMode {
    #[serde(rename = "baseline", alias = "none")]
    None,
    Swa,
    Sam,
    Wasam,
}

impl FlatMode {
    pub const ALL: [FlatMode; 4] = [FlatMode::None, FlatMode::Swa, FlatMode::Sam, FlatMode::Wasam];

    pub fn name(self) -> &'static str {
        match self {
            FlatMode::None => "baseline",
            FlatMode::Swa => "swa",
            FlatMode::Sam => "sam",
            FlatMode::Wasam => "wasam",
        }
    }

    pub fn perturbs(self) -> bool {
        matches!(self, FlatMode::Sam | FlatMode::Wasam)
    }

    pub fn averages(self) -> bool {
        matches!(self, FlatMode::Swa | FlatMode::Wasam)
    }
}

impl fmt::Display for FlatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(FlatMode::None),
            "swa" => Ok(FlatMode::Swa),
            "sam" => Ok(FlatMode::Sam),
            "wasam" => Ok(FlatMode::Wasam),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Evaluation,
    pub val: Evaluation,
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub mode: FlatMode,
    pub final_params: ParameterVector,
    pub averaged: Option<AveragedState>,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
}

impl TrainingResult {
    /// The averaged solution when the mode averages, else the last iterate.
    pub fn solution(&self) -> &ParameterVector {
        self.averaged.as_ref().and_then(|a| a.params.as_ref()).unwrap_or(&self.final_params)
    }
}

/// Reported after every optimizer step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    /// Completed steps so far, 1-based.
    pub iteration: u64,
    pub params: &'a ParameterVector,
    pub sam: Option<&'a SamStepRecord>,
    pub averaged: bool,
}

/// Per-epoch train and validation evaluation can be skipped for runs whose
/// history is not needed.
pub fn run_training<T: Trainable>(
    objective: &T,
    config: &OptimizerConfig,
    mode: FlatMode,
    init: &ParameterVector,
    rng: &RngStream,
) -> Result<TrainingResult> {
    run_training_observed(objective, config, mode, init, rng, true, |_| {})
}

pub fn run_training_observed<T, F>(
    objective: &T,
    config: &OptimizerConfig,
    mode: FlatMode,
    init: &ParameterVector,
    rng: &RngStream,
    track_epochs: bool,
    mut observe: F,
) -> Result<TrainingResult>
where
    T: Trainable,
    F: FnMut(&StepEvent<'_>),
{
    config.validate()?;
    init.check_layout(objective.layout())?;
    let iters = objective.iterations_per_epoch();
    let total = (config.epochs * iters) as u64;
    let mut averaged = if mode.averages() {
        let start = config.swa_start_epoch();
        if start >= config.epochs {
            return Err(Error::Config(format!(
                "averaging starts at epoch {start} but training has only {} epochs",
                config.epochs
            )));
        }
        Some(AveragedState::new(start, config.swa_freq.unwrap_or(iters)))
    } else {
        None
    };
    let mut opt = Optimizer::new(config, init.len(), total)?;
    let mut params = init.clone();
    let mut history = Vec::new();
    let mut iteration = 0u64;

    for epoch in 0..config.epochs {
        let batches = objective.epoch_batches(rng, epoch)?;
        for batch in &batches {
            let last_finite = params.clone();
            let diverged = |_| Error::Diverged { epoch, iteration: iteration + 1, last_finite: Box::new(last_finite.clone()) };
            let record = if mode.perturbs() {
                Some(sam_step(objective, &mut opt, &mut params, batch, config.rho).map_err(nonfinite_or(diverged))?)
            } else {
                let g = objective.gradient(&params, batch).map_err(nonfinite_or(diverged))?;
                opt.step(&mut params, &g).map_err(nonfinite_or(diverged))?;
                None
            };
            iteration += 1;
            let did_average = averaged.as_mut().is_some_and(|a| a.average_update(&params, epoch, iteration));
            observe(&StepEvent { epoch, iteration, params: &params, sam: record.as_ref(), averaged: did_average });
        }
        if track_epochs {
            let ev = objective.evaluate(&params, &[Split::Train, Split::Val])?;
            if !ev[0].loss.is_finite() {
                return Err(Error::Diverged { epoch, iteration, last_finite: Box::new(params) });
            }
            log::debug!("{mode} epoch {epoch}: train loss {:.6}, val loss {:.6}", ev[0].loss, ev[1].loss);
            history.push(EpochRecord { epoch, train: ev[0], val: ev[1] });
        }
    }

    Ok(TrainingResult { mode, final_params: params, averaged, epochs: history, steps: iteration })
}

fn nonfinite_or<F: Fn(()) -> Error>(diverged: F) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => diverged(()),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::AnalyticLoss;
    use crate::objective::{Analytic, Counting};
    use crate::optim::BaseKind;

    fn noisy_quadratic() -> Analytic {
        Analytic::new(AnalyticLoss::quadratic(3)).with_noise(0.3, 7)
    }

    fn cfg() -> OptimizerConfig {
        OptimizerConfig { lr: 0.05, epochs: 8, rho: 0.1, swa_start_frac: 0.5, ..Default::default() }
    }

    #[test]
    fn wasam_iterates_match_sam() {
        let obj = noisy_quadratic();
        let init = obj.point(vec![1.0, -2.0, 0.5]).unwrap();
        let rng = RngStream::new(9, 2);
        let sam = run_training(&obj, &cfg(), FlatMode::Sam, &init, &rng).unwrap();
        let wasam = run_training(&obj, &cfg(), FlatMode::Wasam, &init, &rng).unwrap();
        assert_eq!(sam.final_params, wasam.final_params);
        let avg = wasam.averaged.unwrap();
        assert_eq!(avg.count, 4);
        assert!(sam.averaged.is_none());
    }

    #[test]
    fn gradient_evaluation_counts() {
        let obj = Counting::new(noisy_quadratic());
        let init = obj.inner.point(vec![1.0, -2.0, 0.5]).unwrap();
        for (mode, per_step) in [(FlatMode::None, 1), (FlatMode::Swa, 1), (FlatMode::Sam, 2), (FlatMode::Wasam, 2)] {
            obj.reset();
            let r = run_training(&obj, &cfg(), mode, &init, &RngStream::new(1, 2)).unwrap();
            assert_eq!(r.steps, 56);
            assert_eq!(obj.gradient_calls(), per_step * 56, "{mode}");
        }
    }

    #[test]
    fn empty_averaging_window_is_a_config_error() {
        let obj = noisy_quadratic();
        let init = obj.point(vec![0.0; 3]).unwrap();
        let c = OptimizerConfig { swa_start_frac: 1.0, ..cfg() };
        let err = run_training(&obj, &c, FlatMode::Wasam, &init, &RngStream::new(0, 2)).unwrap_err();
        assert!(err.is_config());
        assert!(run_training(&obj, &c, FlatMode::Sam, &init, &RngStream::new(0, 2)).is_ok());
    }

    #[test]
    fn divergence_reports_last_finite_point() {
        let obj = Analytic::new(AnalyticLoss::quadratic(1));
        let init = obj.point(vec![1.0]).unwrap();
        // lr 3 on curvature 1 multiplies θ by −2 each step.
        let c = OptimizerConfig { lr: 3.0, epochs: 2000, base: BaseKind::Sgd, ..Default::default() };
        match run_training(&obj, &c, FlatMode::None, &init, &RngStream::new(0, 2)) {
            Err(Error::Diverged { last_finite, .. }) => assert!(last_finite.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn history_has_one_record_per_epoch() {
        let obj = noisy_quadratic();
        let init = obj.point(vec![1.0, 1.0, 1.0]).unwrap();
        let r = run_training(&obj, &cfg(), FlatMode::None, &init, &RngStream::new(3, 2)).unwrap();
        assert_eq!(r.epochs.len(), 8);
        assert!(r.epochs.last().unwrap().train.loss < r.epochs[0].train.loss * 10.0);
    }
}
