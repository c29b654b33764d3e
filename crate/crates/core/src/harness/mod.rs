//! Experiment driver: multi-seed sweeps over ρ and averaging start,
//! validation-based selection, result tables and landscape exports.
//!
//! An experiment directory holds `config.json`, `results.csv` (one row per
//! run on the validation split, plus test rows for the selected settings),
//! `summary.csv`, `summary.txt` and `checkpoints/{mode}_seed{s}.fltl`.

mod config;
mod table;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::landscape::{interpolate, sample_plane, surface, BarrierReport, Crop, InterpolationSpec, LandscapeGrid, Normalization, SurfaceSpec};
use crate::models::Evaluation;
use crate::objective::{Objective, Supervised};
use crate::optim::{run_training, run_training_observed, FlatMode, OptimizerConfig, TrainingResult};
use crate::params::ParameterVector;
use crate::rng::{streams, RngStream};

pub use config::{DataConfig, ExperimentConfig, SCHEMA_VERSION};
pub use table::{mean_stderr, read_results, report, write_results, ResultTable, RunRecord, TableRow, RESULTS_HEADER, SUMMARY_HEADER};

/// One point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunKey {
    pub mode: FlatMode,
    pub rho: Option<f64>,
    pub swa_start_frac: Option<f64>,
    pub seed: u64,
}

impl RunKey {
    fn optimizer(&self, base: &OptimizerConfig) -> OptimizerConfig {
        OptimizerConfig {
            rho: self.rho.unwrap_or(0.0),
            swa_start_frac: self.swa_start_frac.unwrap_or(base.swa_start_frac),
            seed: self.seed,
            ..base.clone()
        }
    }

    fn setting(&self) -> (FlatMode, Option<f64>, Option<f64>) {
        (self.mode, self.rho, self.swa_start_frac)
    }
}

/// Every run of the sweep in output order: modes as configured, then
/// ρ, then start fraction, then seed.
pub fn sweep_runs(config: &ExperimentConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &mode in &config.modes {
        let rhos: Vec<Option<f64>> = if mode.perturbs() { config.rho_grid.iter().map(|&r| Some(r)).collect() } else { vec![None] };
        let starts: Vec<Option<f64>> =
            if mode.averages() { config.swa_start_grid.iter().map(|&e| Some(e)).collect() } else { vec![None] };
        for &rho in &rhos {
            for &swa_start_frac in &starts {
                for &seed in &config.seeds {
                    keys.push(RunKey { mode, rho, swa_start_frac, seed });
                }
            }
        }
    }
    keys
}

struct RunOutcome {
    key: RunKey,
    val: Option<Evaluation>,
    solution: Option<ParameterVector>,
}

fn run_one(objective: &Supervised, config: &ExperimentConfig, key: RunKey) -> Result<RunOutcome> {
    let init = config.init_params(objective, key.seed);
    let rng = RngStream::new(key.seed, streams::BATCHES);
    let opt = key.optimizer(&config.optimizer);
    match run_training_observed(objective, &opt, key.mode, &init, &rng, false, |_| {}) {
        Ok(run) => {
            let solution = run.solution().clone();
            let val = objective.evaluate_one(&solution, Split::Val)?;
            if !val.is_finite() {
                log::warn!("{key:?}: non-finite validation result, counted as diverged");
                return Ok(RunOutcome { key, val: None, solution: None });
            }
            Ok(RunOutcome { key, val: Some(val), solution: Some(solution) })
        }
        Err(Error::Diverged { epoch, iteration, .. }) => {
            log::warn!("{key:?} diverged at epoch {epoch}, iteration {iteration}");
            Ok(RunOutcome { key, val: None, solution: None })
        }
        Err(e) => Err(e),
    }
}

fn score(ev: &Evaluation) -> f64 {
    ev.metric.unwrap_or(-ev.loss)
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub table: ResultTable,
    pub runs: usize,
    pub diverged: usize,
}

impl ExperimentOutcome {
    pub fn all_diverged(&self) -> bool {
        self.runs > 0 && self.diverged == self.runs
    }
}

/// Runs the full sweep and writes the experiment directory.
///
/// Every mode starts from the same seed-dependent initialization. For each
/// mode the setting with the best mean validation score is selected; only
/// that setting is evaluated on the test split.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let objective = config.objective()?;
    let exec = Exec::from_workers(config.workers);
    let keys = sweep_runs(config);
    log::info!("running {} training runs", keys.len());
    let outcomes = exec.map(&keys, |&k| run_one(&objective, config, k)).into_iter().collect::<Result<Vec<_>>>()?;

    let mut records: Vec<RunRecord> = outcomes
        .iter()
        .map(|o| RunRecord {
            mode: o.key.mode,
            rho: o.key.rho,
            swa_start_frac: o.key.swa_start_frac,
            seed: o.key.seed,
            split: Split::Val,
            metric: o.val.and_then(|v| v.metric),
            loss: o.val.map(|v| v.loss),
            diverged: o.val.is_none(),
        })
        .collect();

    let dir = config.out_dir.clone();
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    for &mode in &config.modes {
        let Some(selected) = select_setting(&outcomes, mode) else {
            log::warn!("every run of mode {mode} diverged");
            continue;
        };
        for o in outcomes.iter().filter(|o| o.key.setting() == selected) {
            let Some(solution) = &o.solution else { continue };
            let test = objective.evaluate_one(solution, Split::Test)?;
            records.push(RunRecord { split: Split::Test, metric: test.metric, loss: Some(test.loss), diverged: false, ..records_key(&o.key) });
            checkpoint::save(solution, ckpt_dir.join(format!("{mode}_seed{}.fltl", o.key.seed)))?;
        }
    }

    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, config.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;
    write_results(&dir.join("results.csv"), &records)?;
    let diverged = outcomes.iter().filter(|o| o.val.is_none()).count();
    let table = report(&dir)?;
    Ok(ExperimentOutcome { dir, table, runs: outcomes.len(), diverged })
}

fn records_key(key: &RunKey) -> RunRecord {
    RunRecord {
        mode: key.mode,
        rho: key.rho,
        swa_start_frac: key.swa_start_frac,
        seed: key.seed,
        split: Split::Val,
        metric: None,
        loss: None,
        diverged: false,
    }
}

/// The setting of `mode` with the highest mean validation score over its
/// finished seeds; ties go to the earliest setting in sweep order.
fn select_setting(outcomes: &[RunOutcome], mode: FlatMode) -> Option<(FlatMode, Option<f64>, Option<f64>)> {
    let mut settings: Vec<(FlatMode, Option<f64>, Option<f64>)> = Vec::new();
    for o in outcomes.iter().filter(|o| o.key.mode == mode) {
        if !settings.contains(&o.key.setting()) {
            settings.push(o.key.setting());
        }
    }
    let mut best: Option<(f64, (FlatMode, Option<f64>, Option<f64>))> = None;
    for s in settings {
        let scores: Vec<f64> = outcomes.iter().filter(|o| o.key.setting() == s).filter_map(|o| o.val.as_ref().map(score)).collect();
        if scores.is_empty() {
            continue;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if best.is_none_or(|(b, _)| mean > b) {
            best = Some((mean, s));
        }
    }
    best.map(|(_, s)| s)
}

/// A single training run with its per-epoch history, written to `dir` as
/// `history.csv` plus a checkpoint of the returned solution.
pub fn train_single(config: &ExperimentConfig, mode: FlatMode, dir: &Path) -> Result<(TrainingResult, Evaluation)> {
    config.optimizer.validate()?;
    let objective = config.objective()?;
    let seed = config.optimizer.seed;
    let init = config.init_params(&objective, seed);
    let run = run_training(&objective, &config.optimizer, mode, &init, &RngStream::new(seed, streams::BATCHES))?;
    let test = objective.evaluate_one(run.solution(), Split::Test)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut hist = String::from("epoch,split,loss,metric\n");
    for e in &run.epochs {
        for (split, ev) in [(Split::Train, e.train), (Split::Val, e.val)] {
            let metric = ev.metric.map(|m| m.to_string()).unwrap_or_default();
            hist.push_str(&format!("{},{split},{},{metric}\n", e.epoch, ev.loss));
        }
    }
    let path = dir.join("history.csv");
    fs::write(&path, hist).map_err(|e| Error::io(&path, e))?;
    checkpoint::save(run.solution(), dir.join(format!("{mode}_seed{seed}.fltl")))?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, config.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok((run, test))
}

fn load_for(objective: &Supervised, path: &Path) -> Result<ParameterVector> {
    let p = checkpoint::load(path)?;
    p.check_layout(objective.layout()).map_err(|e| Error::Layout(format!("{}: {e}", path.display())))?;
    // Rebind to the model's layout so evaluation needs no structural checks.
    ParameterVector::new(p.into_values(), objective.layout().clone())
}

fn write_grid(grid: &LandscapeGrid, path: &Path, crop: Option<&Crop>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    grid.write_csv(&mut w, crop).map_err(|e| Error::io(path, e))
}

/// Interpolates between two checkpoints of the configured model; writes
/// `interpolation.csv` and `barrier.csv` into `dir`.
pub fn interpolate_checkpoints(
    config: &ExperimentConfig,
    a: &Path,
    b: &Path,
    spec: &InterpolationSpec,
    crop: Option<&Crop>,
    dir: &Path,
) -> Result<(LandscapeGrid, BarrierReport)> {
    let objective = config.objective()?;
    let (theta, theta_prime) = (load_for(&objective, a)?, load_for(&objective, b)?);
    let (grid, barrier) = interpolate(spec, &theta, &theta_prime, &objective, Exec::from_workers(config.workers))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_grid(&grid, &dir.join("interpolation.csv"), crop)?;
    let path = dir.join("barrier.csv");
    let mut buf = Vec::new();
    barrier.write_csv(&mut buf).map_err(|e| Error::io(&path, e))?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok((grid, barrier))
}

/// Evaluates a surface around a checkpoint in a random plane drawn from
/// `direction_seed`; writes `surface.csv` and `surface_annotations.csv`.
pub fn surface_checkpoint(
    config: &ExperimentConfig,
    center: &Path,
    spec: &SurfaceSpec,
    normalization: Normalization,
    direction_seed: u64,
    crop: Option<&Crop>,
    dir: &Path,
) -> Result<LandscapeGrid> {
    let objective = config.objective()?;
    let theta = load_for(&objective, center)?;
    let pair = sample_plane(&theta, &RngStream::new(direction_seed, streams::DIRECTIONS), normalization)?;
    let grid = surface(&theta, &pair, spec, &objective, Exec::from_workers(config.workers))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_grid(&grid, &dir.join("surface.csv"), crop)?;
    let ann = grid.annotations();
    let mut text = String::from("annotation,alpha,beta\n");
    for (name, idx) in [("train_loss_min", ann.train_loss_min), ("train_loss_max", ann.train_loss_max), ("test_metric_max", ann.test_metric_max)] {
        if let Some(i) = idx {
            let c = &grid.cells[i];
            text.push_str(&format!("{name},{},{}\n", c.alpha, c.beta.unwrap_or(0.0)));
        }
    }
    let path = dir.join("surface_annotations.csv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            model: "mlp[2-4-2]".into(),
            seeds: vec![0, 1],
            rho_grid: vec![0.0, 0.05],
            swa_start_grid: vec![0.5],
            ..Default::default()
        };
        c.data.n = 80;
        c.optimizer.epochs = 4;
        c.optimizer.batch_size = 16;
        c
    }

    #[test]
    fn sweep_enumerates_full_grids() {
        let c = tiny();
        let keys = sweep_runs(&c);
        // baseline 1, swa 1, sam 2, wasam 2·1; times two seeds
        assert_eq!(keys.len(), 12);
        assert_eq!(keys.iter().filter(|k| k.mode == FlatMode::Wasam).count(), 4);
    }

    #[test]
    fn experiment_writes_directory_and_reports_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let c = ExperimentConfig { out_dir: tmp.path().to_path_buf(), ..tiny() };
        let out = run_experiment(&c).unwrap();
        assert_eq!(out.runs, 12);
        assert_eq!(out.table.rows.len(), 4);
        let records = read_results(&tmp.path().join("results.csv")).unwrap();
        let tests = records.iter().filter(|r| r.split == Split::Test).count();
        assert_eq!(tests, 8);
        for mode in FlatMode::ALL {
            for seed in [0, 1] {
                assert!(tmp.path().join(format!("checkpoints/{mode}_seed{seed}.fltl")).exists());
            }
        }
        let before = fs::read(tmp.path().join("summary.txt")).unwrap();
        let csv_before = fs::read(tmp.path().join("summary.csv")).unwrap();
        report(tmp.path()).unwrap();
        assert_eq!(fs::read(tmp.path().join("summary.txt")).unwrap(), before);
        assert_eq!(fs::read(tmp.path().join("summary.csv")).unwrap(), csv_before);
    }

    #[test]
    fn modes_share_initialization() {
        let c = tiny();
        let obj = c.objective().unwrap();
        assert_eq!(c.init_params(&obj, 7), c.init_params(&obj, 7));
        assert_ne!(c.init_params(&obj, 7), c.init_params(&obj, 8));
    }

    #[test]
    fn interpolating_a_checkpoint_with_itself_is_flat() {
        let tmp = tempfile::tempdir().unwrap();
        let c = tiny();
        let (_, _) = train_single(&c, FlatMode::Sam, tmp.path()).unwrap();
        let ck = tmp.path().join("sam_seed0.fltl");
        let spec = InterpolationSpec::default();
        let (grid, barrier) = interpolate_checkpoints(&c, &ck, &ck, &spec, None, tmp.path()).unwrap();
        assert_eq!(barrier.barrier_height, 0.0);
        for &a in &[-1.0, 0.0, 1.0, 1.5] {
            assert!(grid.alphas.contains(&a));
        }
        let text = fs::read_to_string(tmp.path().join("barrier.csv")).unwrap();
        assert!(text.starts_with("alpha_star,barrier_height"));
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let c = tiny();
        train_single(&c, FlatMode::None, tmp.path()).unwrap();
        let other = ExperimentConfig { model: "mlp[2-5-2]".into(), ..tiny() };
        let ck = tmp.path().join("baseline_seed0.fltl");
        let err = interpolate_checkpoints(&other, &ck, &ck, &InterpolationSpec::default(), None, tmp.path()).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }
}
