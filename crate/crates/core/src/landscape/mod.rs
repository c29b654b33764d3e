//! Loss landscapes: straight-line interpolation between two solutions,
//! 2D surfaces in a random plane, and a Monte-Carlo sharpness probe.
//!
//! Every evaluated point goes through [`Objective::evaluate`], so models with
//! batch norm get fresh statistics at each point. Grid cells are independent
//! and evaluated through [`Exec`]; output order is always row-major.

mod directions;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::models::Evaluation;
use crate::objective::Objective;
use crate::params::ParameterVector;
use crate::rng::RngStream;

pub use directions::{prepare_directions, sample_plane, DirectionPair, Normalization, MAX_DRAWS};

pub const GRID_HEADER: &str = "alpha,beta,split,loss,metric,flag_nonfinite";
pub const BARRIER_HEADER: &str = "alpha_star,barrier_height,loss_theta,loss_theta_prime,max_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpolationSpec {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub steps: usize,
    pub splits: Vec<Split>,
    /// Split whose loss defines the barrier.
    pub barrier_split: Split,
}

impl Default for InterpolationSpec {
    fn default() -> Self {
        Self { alpha_min: -1.0, alpha_max: 1.5, steps: 26, splits: vec![Split::Train, Split::Test], barrier_split: Split::Train }
    }
}

/// Evenly spaced values on `[lo, hi]`, endpoints exact.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    let last = (steps - 1) as f64;
    (0..steps)
        .map(|i| if i + 1 == steps { hi } else { lo + (hi - lo) * (i as f64 / last) })
        .collect()
}

/// An α axis that contains 0 and 1 exactly: grid points within a
/// millionth of a step of either are snapped, otherwise the value is
/// inserted in order.
pub fn alpha_grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if !(lo <= 0.0 && hi >= 1.0) || steps < 2 {
        return Err(Error::Config(format!(
            "interpolation range [{lo}, {hi}] with {steps} steps must contain [0, 1] and have at least 2 steps"
        )));
    }
    let mut grid = linspace(lo, hi, steps);
    let tol = 1e-6 * (hi - lo) / (steps - 1) as f64;
    for target in [0.0, 1.0] {
        match grid.iter().position(|a| (a - target).abs() <= tol) {
            Some(i) => grid[i] = target,
            None => {
                let at = grid.partition_point(|&a| a < target);
                grid.insert(at, target);
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub alpha: f64,
    pub beta: Option<f64>,
    /// One entry per split of the grid, in order.
    pub evals: Vec<Evaluation>,
}

impl Cell {
    pub fn is_finite(&self) -> bool {
        self.evals.iter().all(Evaluation::is_finite)
    }
}

/// Cell indices of the annotated extremes, over finite cells only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Annotations {
    pub train_loss_min: Option<usize>,
    pub train_loss_max: Option<usize>,
    pub test_metric_max: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    /// Present for 2D surfaces.
    pub betas: Option<Vec<f64>>,
    pub splits: Vec<Split>,
    /// Row-major: for surfaces, index `i_alpha · betas.len() + i_beta`.
    pub cells: Vec<Cell>,
}

fn arg_extreme(values: impl Iterator<Item = (usize, f64)>, better: impl Fn(f64, f64) -> bool) -> Option<usize> {
    values
        .filter(|(_, v)| v.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if !better(v, b) => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

impl LandscapeGrid {
    pub fn split_index(&self, split: Split) -> Option<usize> {
        self.splits.iter().position(|&s| s == split)
    }

    /// Values of one split across cells; `metric` selects the metric
    /// instead of the loss (NaN where absent).
    pub fn series(&self, split: Split, metric: bool) -> Option<Vec<f64>> {
        let k = self.split_index(split)?;
        Some(
            self.cells
                .iter()
                .map(|c| if metric { c.evals[k].metric.unwrap_or(f64::NAN) } else { c.evals[k].loss })
                .collect(),
        )
    }

    pub fn annotations(&self) -> Annotations {
        let loss = self.series(Split::Train, false).unwrap_or_default();
        let metric = self.series(Split::Test, true).unwrap_or_default();
        Annotations {
            train_loss_min: arg_extreme(loss.iter().copied().enumerate(), |a, b| a < b),
            train_loss_max: arg_extreme(loss.iter().copied().enumerate(), |a, b| a > b),
            test_metric_max: arg_extreme(metric.iter().copied().enumerate(), |a, b| a > b),
        }
    }

    /// Writes the grid as CSV, one row per cell and split. `crop` keeps
    /// only cells inside the given α (and β) ranges.
    pub fn write_csv<W: Write>(&self, out: &mut W, crop: Option<&Crop>) -> std::io::Result<()> {
        writeln!(out, "{GRID_HEADER}")?;
        for cell in &self.cells {
            if crop.is_some_and(|c| !c.contains(cell)) {
                continue;
            }
            let beta = cell.beta.map(|b| b.to_string()).unwrap_or_default();
            for (split, ev) in self.splits.iter().zip(&cell.evals) {
                let metric = ev.metric.map(|m| m.to_string()).unwrap_or_default();
                let flag = u8::from(!ev.is_finite());
                writeln!(out, "{},{beta},{split},{},{metric},{flag}", cell.alpha, ev.loss)?;
            }
        }
        Ok(())
    }
}

/// Output-stage crop window. Evaluation is never affected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub alpha: (f64, f64),
    pub beta: Option<(f64, f64)>,
}

impl Crop {
    fn contains(&self, cell: &Cell) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        inside(cell.alpha, self.alpha)
            && match (cell.beta, self.beta) {
                (Some(b), Some(r)) => inside(b, r),
                _ => true,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierReport {
    pub alpha_star: f64,
    pub barrier_height: f64,
    pub loss_theta: f64,
    pub loss_theta_prime: f64,
    pub max_loss: f64,
}

impl BarrierReport {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{BARRIER_HEADER}")?;
        writeln!(
            out,
            "{},{},{},{},{}",
            self.alpha_star, self.barrier_height, self.loss_theta, self.loss_theta_prime, self.max_loss
        )
    }
}

/// Evaluates, mapping a non-finite failure to a flagged (NaN) record.
fn evaluate_point<O: Objective>(objective: &O, p: &ParameterVector, splits: &[Split]) -> Result<Vec<Evaluation>> {
    match objective.evaluate(p, splits) {
        Err(Error::NonFinite(_)) => Ok(vec![Evaluation { loss: f64::NAN, metric: None }; splits.len()]),
        other => other,
    }
}

/// `θ(α) = (1−α)θ + αθ′` on the α axis, plus the barrier over `α ∈ [0, 1]`.
/// The endpoints are the inputs themselves, so their records are exactly
/// those of standalone evaluations.
pub fn interpolate<O: Objective>(
    spec: &InterpolationSpec,
    theta: &ParameterVector,
    theta_prime: &ParameterVector,
    objective: &O,
    exec: Exec,
) -> Result<(LandscapeGrid, BarrierReport)> {
    theta.check_layout(theta_prime.layout())?;
    theta.check_layout(objective.layout())?;
    if spec.splits.is_empty() {
        return Err(Error::Empty("list of evaluation splits"));
    }
    let mut splits = spec.splits.clone();
    if !splits.contains(&spec.barrier_split) {
        splits.push(spec.barrier_split);
    }
    let alphas = alpha_grid(spec.alpha_min, spec.alpha_max, spec.steps)?;
    // θ + α(θ′ − θ) is exactly θ everywhere when θ′ = θ.
    let diff = ParameterVector::linear_combination(1.0, theta_prime, -1.0, theta)?;
    let evals = exec.map(&alphas, |&a| {
        let point = if a == 0.0 {
            theta.clone()
        } else if a == 1.0 {
            theta_prime.clone()
        } else {
            theta.axpy(a, &diff)?
        };
        evaluate_point(objective, &point, &splits)
    });
    let cells = alphas
        .iter()
        .zip(evals)
        .map(|(&alpha, ev)| Ok(Cell { alpha, beta: None, evals: ev? }))
        .collect::<Result<Vec<_>>>()?;
    let grid = LandscapeGrid { alphas, betas: None, splits, cells };
    let report = barrier(&grid, spec.barrier_split)?;
    Ok((grid, report))
}

/// Barrier over the cells with `α ∈ [0, 1]`: the maximum loss there minus
/// the larger endpoint loss. Non-finite cells make the maximum infinite.
pub fn barrier(grid: &LandscapeGrid, split: Split) -> Result<BarrierReport> {
    let k = grid.split_index(split).ok_or(Error::Empty("barrier split in grid"))?;
    let at = |alpha: f64| grid.cells.iter().find(|c| c.alpha == alpha && c.beta.is_none()).map(|c| c.evals[k].loss);
    let (Some(l0), Some(l1)) = (at(0.0), at(1.0)) else {
        return Err(Error::Config("barrier needs a 1D grid containing α = 0 and α = 1".into()));
    };
    let mut alpha_star = 0.0;
    let mut max_loss = f64::NEG_INFINITY;
    for c in grid.cells.iter().filter(|c| (0.0..=1.0).contains(&c.alpha)) {
        let l = c.evals[k].loss;
        let l = if l.is_finite() { l } else { f64::INFINITY };
        if l > max_loss {
            max_loss = l;
            alpha_star = c.alpha;
        }
    }
    Ok(BarrierReport { alpha_star, barrier_height: max_loss - l0.max(l1), loss_theta: l0, loss_theta_prime: l1, max_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceSpec {
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub alpha_steps: usize,
    pub beta_steps: usize,
    pub splits: Vec<Split>,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            alpha_range: (-1.0, 1.0),
            beta_range: (-1.0, 1.0),
            alpha_steps: 20,
            beta_steps: 20,
            splits: vec![Split::Train, Split::Test],
        }
    }
}

/// `f(α, β) = L(θ + αδ + βη_dir)` on a rectangular grid.
pub fn surface<O: Objective>(
    center: &ParameterVector,
    pair: &DirectionPair,
    spec: &SurfaceSpec,
    objective: &O,
    exec: Exec,
) -> Result<LandscapeGrid> {
    if spec.alpha_steps < 2 || spec.beta_steps < 2 {
        return Err(Error::Config(format!(
            "surface needs at least 2 steps per axis, got {}×{}",
            spec.alpha_steps, spec.beta_steps
        )));
    }
    if spec.splits.is_empty() {
        return Err(Error::Empty("list of evaluation splits"));
    }
    center.check_layout(objective.layout())?;
    center.check_layout(pair.delta.layout())?;
    center.check_layout(pair.eta_dir.layout())?;
    let alphas = linspace(spec.alpha_range.0, spec.alpha_range.1, spec.alpha_steps);
    let betas = linspace(spec.beta_range.0, spec.beta_range.1, spec.beta_steps);
    let nb = betas.len();
    let evals = exec.map_range(alphas.len() * nb, |idx| {
        let (a, b) = (alphas[idx / nb], betas[idx % nb]);
        let values = center
            .values()
            .iter()
            .zip(pair.delta.values().iter().zip(pair.eta_dir.values()))
            .map(|(c, (d, e))| c + a * d + b * e)
            .collect();
        let point = ParameterVector::new(values, center.layout().clone())?;
        evaluate_point(objective, &point, &spec.splits)
    });
    let cells = evals
        .into_iter()
        .enumerate()
        .map(|(idx, ev)| Ok(Cell { alpha: alphas[idx / nb], beta: Some(betas[idx % nb]), evals: ev? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid { alphas, betas: Some(betas), splits: spec.splits.clone(), cells })
}

/// Largest train-loss increase over `n_samples` points at distance
/// `radius` from `center` along uniformly random unit directions.
pub fn sharpness_probe<O: Objective>(
    center: &ParameterVector,
    objective: &O,
    radius: f64,
    n_samples: usize,
    rng: &RngStream,
    exec: Exec,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config("sharpness probe needs at least one sample".into()));
    }
    if !(radius >= 0.0) {
        return Err(Error::Config(format!("probe radius must be non-negative, got {radius}")));
    }
    if radius == 0.0 {
        return Ok(0.0);
    }
    let base = objective.evaluate_one(center, Split::Train)?.loss;
    let rises = exec.map_range(n_samples, |k| {
        let mut u = rng.derive(k as u64).standard_normals(center.len());
        let n = crate::params::l2_norm(&u);
        if n == 0.0 {
            return Err(Error::Degenerate("probe direction".into()));
        }
        u.iter_mut().for_each(|x| *x *= radius / n);
        let p = center.add(&ParameterVector::new(u, center.layout().clone())?)?;
        Ok(objective.evaluate_one(&p, Split::Train)?.loss - base)
    });
    rises.into_iter().try_fold(f64::NEG_INFINITY, |m, r| r.map(|r| m.max(r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::AnalyticLoss;
    use crate::objective::Analytic;

    #[test]
    fn alpha_axis_contains_endpoints() {
        let g = alpha_grid(-1.0, 1.5, 26).unwrap();
        assert_eq!(g.len(), 26);
        assert!(g.contains(&0.0) && g.contains(&1.0));
        let g = alpha_grid(-0.33, 1.21, 4).unwrap();
        assert_eq!(g.len(), 6);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(alpha_grid(0.2, 1.0, 5).is_err());
    }

    #[test]
    fn barrier_between_bimodal_minima() {
        let loss = AnalyticLoss::sharp_flat_bimodal();
        let obj = Analytic::new(loss);
        let (a, b) = (obj.point(vec![-1.0]).unwrap(), obj.point(vec![1.0]).unwrap());
        let spec = InterpolationSpec { steps: 251, ..Default::default() };
        let (grid, rep) = interpolate(&spec, &a, &b, &obj, Exec::Sequential).unwrap();
        // Brute-force scan on the same axis.
        let mut best = (f64::NEG_INFINITY, 0.0);
        for &al in &grid.alphas {
            if (0.0..=1.0).contains(&al) {
                let v = loss.value(&[(1.0 - al) * -1.0 + al * 1.0]).unwrap();
                if v > best.0 {
                    best = (v, al);
                }
            }
        }
        let ends = loss.value(&[-1.0]).unwrap().max(loss.value(&[1.0]).unwrap());
        assert!((rep.barrier_height - (best.0 - ends)).abs() < 1e-10);
        assert_eq!(rep.alpha_star, best.1);
        assert!(rep.barrier_height > 0.0);
        let ridge = loss.ridge().unwrap();
        assert!(((2.0 * rep.alpha_star - 1.0) - ridge).abs() < 0.02);
    }

    #[test]
    fn identical_endpoints_have_no_barrier() {
        let obj = Analytic::new(AnalyticLoss::rosenbrock());
        let p = obj.point(vec![0.3, -0.2]).unwrap();
        let (grid, rep) = interpolate(&InterpolationSpec::default(), &p, &p, &obj, Exec::Sequential).unwrap();
        assert_eq!(rep.barrier_height, 0.0);
        let l = grid.series(Split::Train, false).unwrap();
        assert!(l.iter().all(|&v| v == l[0]));
    }

    #[test]
    fn quadratic_surface_minimum_at_center() {
        let obj = Analytic::new(AnalyticLoss::quadratic(2));
        let c = obj.point(vec![0.0, 0.0]).unwrap();
        let pair = prepare_directions(&c, vec![1.0, 0.0], vec![0.0, 1.0], Normalization::None).unwrap();
        let spec = SurfaceSpec { alpha_steps: 21, beta_steps: 21, ..Default::default() };
        let grid = surface(&c, &pair, &spec, &obj, Exec::Parallel).unwrap();
        assert_eq!(grid.cells.len(), 441);
        let ann = grid.annotations();
        let m = &grid.cells[ann.train_loss_min.unwrap()];
        assert_eq!((m.alpha, m.beta), (0.0, Some(0.0)));
        assert_eq!(ann.test_metric_max, None);
    }

    #[test]
    fn probe_examples() {
        let obj = Analytic::new(AnalyticLoss::Quadratic { curvature: 4.0, dim: 1 });
        let c = obj.point(vec![0.0]).unwrap();
        let rng = RngStream::new(0, 7);
        assert_eq!(sharpness_probe(&c, &obj, 0.0, 5, &rng, Exec::Sequential).unwrap(), 0.0);
        let v = sharpness_probe(&c, &obj, 0.3, 5, &rng, Exec::Sequential).unwrap();
        assert_eq!(v, 0.5 * 4.0 * 0.3 * 0.3);

        let bimodal = Analytic::new(AnalyticLoss::sharp_flat_bimodal());
        let sharp = bimodal.point(vec![bimodal.loss.critical_point_near(-1.0).unwrap()]).unwrap();
        let flat = bimodal.point(vec![bimodal.loss.critical_point_near(1.0).unwrap()]).unwrap();
        let ps = sharpness_probe(&sharp, &bimodal, 0.1, 8, &rng, Exec::Sequential).unwrap();
        let pf = sharpness_probe(&flat, &bimodal, 0.1, 8, &rng, Exec::Sequential).unwrap();
        assert!(ps > pf);
    }

    #[test]
    fn csv_layout() {
        let obj = Analytic::new(AnalyticLoss::quadratic(1));
        let (a, b) = (obj.point(vec![-1.0]).unwrap(), obj.point(vec![1.0]).unwrap());
        let spec = InterpolationSpec { alpha_min: 0.0, alpha_max: 1.0, steps: 3, ..Default::default() };
        let (grid, rep) = interpolate(&spec, &a, &b, &obj, Exec::Sequential).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], GRID_HEADER);
        assert_eq!(lines[1], "0,,train,0.5,,0");
        assert_eq!(lines[3], "0.5,,train,0,,0");
        assert_eq!(lines.len(), 7);
        let mut buf = Vec::new();
        grid.write_csv(&mut buf, Some(&Crop { alpha: (0.25, 0.75), beta: None })).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
        assert_eq!(rep.barrier_height, 0.0);
        assert_eq!(rep.alpha_star, 0.0);
    }
}
