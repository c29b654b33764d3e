use std::fmt::Write as _;
use std::path::Path;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::optim::FlatMode;

pub const RESULTS_HEADER: &str = "mode,rho,swa_start_frac,seed,split,metric,loss,diverged";
pub const SUMMARY_HEADER: &str = "mode,rho,swa_start_frac,n_seeds,n_diverged,mean,stderr,delta,best,values";

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub mode: FlatMode,
    pub rho: Option<f64>,
    pub swa_start_frac: Option<f64>,
    pub seed: u64,
    pub split: Split,
    pub metric: Option<f64>,
    pub loss: Option<f64>,
    pub diverged: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn setting(&self) -> (FlatMode, Option<f64>, Option<f64>) {
        (self.mode, self.rho, self.swa_start_frac)
    }

    /// Value compared across runs: the metric, or the loss for tasks
    /// without one.
    pub fn value(&self) -> Option<f64> {
        if self.diverged {
            None
        } else {
            self.metric.or(self.loss)
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mode,
            opt(self.rho),
            opt(self.swa_start_frac),
            self.seed,
            self.split,
            opt(self.metric),
            opt(self.loss),
            u8::from(self.diverged)
        )
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(format!("expected 8 fields, found {}", f.len()));
        }
        let num = |s: &str| -> std::result::Result<Option<f64>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| format!("bad number `{s}`"))
            }
        };
        Ok(Self {
            mode: f[0].parse().map_err(|e: Error| e.to_string())?,
            rho: num(f[1])?,
            swa_start_frac: num(f[2])?,
            seed: f[3].parse().map_err(|_| format!("bad seed `{}`", f[3]))?,
            split: f[4].parse().map_err(|e: Error| e.to_string())?,
            metric: num(f[5])?,
            loss: num(f[6])?,
            diverged: match f[7] {
                "0" => false,
                "1" => true,
                other => return Err(format!("bad divergence flag `{other}`")),
            },
        })
    }
}

pub fn write_results(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::format(path, "missing or wrong header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| RunRecord::parse(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2))))
        .collect()
}

/// Mean and standard error (sample standard deviation over √n; 0 for a
/// single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub mode: FlatMode,
    pub rho: Option<f64>,
    pub swa_start_frac: Option<f64>,
    /// Test values of the selected setting, in seed order.
    pub values: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    /// `mean − baseline mean`, when a baseline ran.
    pub delta: Option<f64>,
    pub best: bool,
    /// Diverged runs of this mode over every setting tried.
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<TableRow>,
    /// Whether larger values are better (metrics) or smaller (losses).
    pub higher_is_better: bool,
    pub quantity: String,
}

impl ResultTable {
    /// Aggregates the test records of `records`; validation records only
    /// contribute divergence counts.
    pub fn from_records(records: &[RunRecord]) -> Result<Self> {
        let mut modes: Vec<FlatMode> = records.iter().map(|r| r.mode).collect();
        modes.sort();
        modes.dedup();
        if modes.is_empty() {
            return Err(Error::Empty("result set"));
        }
        let higher_is_better = records.iter().any(|r| r.metric.is_some());
        let mut rows = Vec::new();
        for mode in modes {
            let diverged = records.iter().filter(|r| r.mode == mode && r.split == Split::Val && r.diverged).count();
            let tests: Vec<&RunRecord> = records.iter().filter(|r| r.mode == mode && r.split == Split::Test).collect();
            let (rho, swa) = tests.first().map(|r| (r.rho, r.swa_start_frac)).unwrap_or((None, None));
            if tests.iter().any(|r| (r.rho, r.swa_start_frac) != (rho, swa)) {
                return Err(Error::Config(format!("mode {mode} has test results for more than one setting")));
            }
            let values: Vec<f64> = tests.iter().filter_map(|r| r.value()).collect();
            if values.len() == 1 {
                log::warn!("mode {mode} has a single seed; standard error reported as 0");
            }
            let (mean, stderr) = mean_stderr(&values);
            rows.push(TableRow { mode, rho, swa_start_frac: swa, values, mean, stderr, delta: None, best: false, diverged });
        }
        let baseline = rows.iter().find(|r| r.mode == FlatMode::None).map(|r| r.mean);
        let sign = if higher_is_better { 1.0 } else { -1.0 };
        let top = rows.iter().map(|r| sign * r.mean).filter(|m| m.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        for r in &mut rows {
            r.delta = baseline.filter(|b| b.is_finite()).map(|b| r.mean - b);
            r.best = r.mean.is_finite() && sign * r.mean + r.stderr >= top;
        }
        let quantity = if higher_is_better { "test metric" } else { "test loss" }.to_string();
        Ok(Self { rows, higher_is_better, quantity })
    }

    pub fn row(&self, mode: FlatMode) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            let values: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.mode,
                opt(r.rho),
                opt(r.swa_start_frac),
                r.values.len(),
                r.diverged,
                r.mean,
                r.stderr,
                opt(r.delta),
                u8::from(r.best),
                values.join(";")
            );
        }
        out
    }

    /// Plain-text table: the baseline in absolute terms, other modes as
    /// deltas against it. `*` marks best-flagged rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} (validation-selected settings)\n", self.quantity);
        let _ = writeln!(out, "{:<9} {:>6} {:>6} {:>3} {:>4}  result", "mode", "rho", "E", "n", "div");
        let baseline = self.row(FlatMode::None).map(|r| r.mean).filter(|m| m.is_finite());
        for r in &self.rows {
            let dash = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
            let result = if !r.mean.is_finite() {
                "no finite runs".to_string()
            } else if r.mode == FlatMode::None || baseline.is_none() {
                format!("{:.4} ± {:.4}", r.mean, r.stderr)
            } else {
                format!("{:+.4} ± {:.4}", r.delta.unwrap_or(f64::NAN), r.stderr)
            };
            let star = if r.best { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:<9} {:>6} {:>6} {:>3} {:>4}  {result}{star}",
                r.mode.name(),
                dash(r.rho),
                dash(r.swa_start_frac),
                r.values.len(),
                r.diverged
            );
        }
        out
    }
}

/// Regenerates `summary.csv` and `summary.txt` from `results.csv` in `dir`.
pub fn report(dir: impl AsRef<Path>) -> Result<ResultTable> {
    let dir = dir.as_ref();
    let records = read_results(&dir.join("results.csv"))?;
    let table = ResultTable::from_records(&records)?;
    let csv = dir.join("summary.csv");
    std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = dir.join("summary.txt");
    std::fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(mode: FlatMode, seed: u64, split: Split, metric: f64) -> RunRecord {
        RunRecord { mode, rho: None, swa_start_frac: None, seed, split, metric: Some(metric), loss: Some(0.1), diverged: false }
    }

    #[test]
    fn stderr_of_three_values() {
        let (m, s) = mean_stderr(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-15);
        assert!((s - 0.1 / 3f64.sqrt()).abs() < 1e-15);
        assert!((s - 0.05774).abs() < 1e-5);
        assert_eq!(mean_stderr(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn single_seed_baseline() {
        let t = ResultTable::from_records(&[rec(FlatMode::None, 1, Split::Test, 0.75)]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].stderr, 0.0);
        assert!(t.rows[0].best);
        assert_eq!(t.rows[0].delta, Some(0.0));
    }

    #[test]
    fn overlap_rule() {
        // 0.90 ± 0.02 against 0.915 ± 0.01: both best.
        let mut rs = Vec::new();
        for (s, v) in [0.90 - 0.02 * 3f64.sqrt(), 0.90, 0.90 + 0.02 * 3f64.sqrt()].into_iter().enumerate() {
            rs.push(rec(FlatMode::Sam, s as u64, Split::Test, v));
        }
        for (s, v) in [0.915 - 0.01 * 3f64.sqrt(), 0.915, 0.915 + 0.01 * 3f64.sqrt()].into_iter().enumerate() {
            rs.push(rec(FlatMode::Wasam, s as u64, Split::Test, v));
        }
        for (s, v) in [0.5, 0.5, 0.5].into_iter().enumerate() {
            rs.push(rec(FlatMode::None, s as u64, Split::Test, v));
        }
        let t = ResultTable::from_records(&rs).unwrap();
        let sam = t.row(FlatMode::Sam).unwrap();
        assert!((sam.stderr - 0.02).abs() < 1e-12);
        assert!(sam.best && t.row(FlatMode::Wasam).unwrap().best);
        assert!(!t.row(FlatMode::None).unwrap().best);
        for r in &t.rows {
            assert!((0.5 + r.delta.unwrap() - r.mean).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_results_are_an_error() {
        assert!(ResultTable::from_records(&[]).is_err());
    }

    #[test]
    fn records_round_trip() {
        let r = RunRecord {
            mode: FlatMode::Wasam,
            rho: Some(0.05),
            swa_start_frac: Some(0.75),
            seed: 3,
            split: Split::Val,
            metric: Some(0.9133333333333333),
            loss: Some(0.21),
            diverged: false,
        };
        assert_eq!(RunRecord::parse(&r.to_csv()).unwrap(), r);
        let d = RunRecord { metric: None, loss: None, diverged: true, ..r };
        assert_eq!(d.to_csv(), "wasam,0.05,0.75,3,val,,,1");
        assert_eq!(RunRecord::parse(&d.to_csv()).unwrap(), d);
        assert!(RunRecord::parse("sam,,,1,val,0.5,0.5").is_err());
    }
}
