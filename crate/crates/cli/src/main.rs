use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flatlab::data::{GeneratorKind, Split};
use flatlab::harness::{self, ExperimentConfig};
use flatlab::landscape::{Crop, InterpolationSpec, Normalization, SurfaceSpec};
use flatlab::optim::FlatMode;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "flatlab", version, about = "Train with SAM/SWA/WASAM and inspect loss landscapes")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its history and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// baseline, swa, sam or wasam.
        #[arg(long, default_value = "baseline")]
        mode: FlatMode,
    },
    /// Run every mode over seeds and hyperparameter grids.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate the straight line between two checkpoints.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
        alpha_min: f64,
        #[arg(long, default_value_t = 1.5)]
        alpha_max: f64,
        #[arg(long, default_value_t = 26)]
        steps: usize,
        /// Only write α values in LO:HI.
        #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
        crop_alpha: Option<(f64, f64)>,
    },
    /// Evaluate a 2D surface around a checkpoint in a random plane.
    Surface {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        center: PathBuf,
        /// Steps per axis.
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Axis range LO:HI, shared by α and β.
        #[arg(long, value_parser = parse_range, default_value = "-1:1", allow_hyphen_values = true)]
        range: (f64, f64),
        #[arg(long, default_value = "filter-wise")]
        normalization: Normalization,
        #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
        crop_alpha: Option<(f64, f64)>,
        #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
        crop_beta: Option<(f64, f64)>,
    },
    /// Regenerate summary.csv and summary.txt from results.csv.
    Report {
        /// Experiment directory.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed (restricts a sweep to this seed; picks the plane for surfaces).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Override a config key, e.g. `--set lr=0.1 --set data.n=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Generator: two-moons, spirals or gaussian-blobs.
    #[arg(long)]
    data: Option<GeneratorKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad number `{lo}`"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad number `{hi}`"))?;
    if lo > hi {
        return Err(format!("empty range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn load_config(common: &Common, data: &DataArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(flatlab::Error::Config(format!("override `{kv}` is not KEY=VALUE")).into());
        };
        config.set(k.trim(), v.trim())?;
    }
    if let Some(kind) = data.data {
        config.data.kind = kind;
    }
    if let Some(n) = data.n {
        config.data.n = n;
    }
    if let Some(noise) = data.noise {
        config.data.noise = noise;
    }
    if let Some(s) = data.data_seed {
        config.data.seed = s;
    }
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
        config.optimizer.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if common.workers.is_some() {
        config.workers = common.workers;
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { common, data, mode } => {
            let config = load_config(&common, &data)?;
            let dir = config.out_dir.clone();
            let (run, test) = harness::train_single(&config, mode, &dir)?;
            let metric = test.metric.map(|m| format!(", test metric {m:.4}")).unwrap_or_default();
            println!("{mode}: {} steps, test loss {:.6}{metric}", run.steps, test.loss);
            println!("wrote {}", dir.display());
        }
        Command::Sweep { common, data } => {
            let config = load_config(&common, &data)?;
            let outcome = harness::run_experiment(&config)?;
            print!("{}", outcome.table.to_text());
            if outcome.diverged > 0 {
                eprintln!("{} of {} runs diverged", outcome.diverged, outcome.runs);
            }
            println!("wrote {}", outcome.dir.display());
            if outcome.all_diverged() {
                return Ok(ExitCode::from(EXIT_DIVERGED));
            }
        }
        Command::Interpolate { common, data, a, b, alpha_min, alpha_max, steps, crop_alpha } => {
            let config = load_config(&common, &data)?;
            let spec = InterpolationSpec { alpha_min, alpha_max, steps, splits: vec![Split::Train, Split::Test], barrier_split: Split::Train };
            let crop = crop_alpha.map(|alpha| Crop { alpha, beta: None });
            let (_, barrier) = harness::interpolate_checkpoints(&config, &a, &b, &spec, crop.as_ref(), &config.out_dir)?;
            println!(
                "barrier {:.6} at alpha {} (endpoint losses {:.6}, {:.6})",
                barrier.barrier_height, barrier.alpha_star, barrier.loss_theta, barrier.loss_theta_prime
            );
            println!("wrote {}", config.out_dir.display());
        }
        Command::Surface { common, data, center, steps, range, normalization, crop_alpha, crop_beta } => {
            let config = load_config(&common, &data)?;
            let spec = SurfaceSpec { alpha_range: range, beta_range: range, alpha_steps: steps, beta_steps: steps, splits: vec![Split::Train, Split::Test] };
            let crop = match (crop_alpha, crop_beta) {
                (None, None) => None,
                (a, b) => Some(Crop { alpha: a.unwrap_or((f64::NEG_INFINITY, f64::INFINITY)), beta: b }),
            };
            let seed = common.seed.unwrap_or(0);
            let grid = harness::surface_checkpoint(&config, &center, &spec, normalization, seed, crop.as_ref(), &config.out_dir)?;
            println!("{} cells evaluated; wrote {}", grid.cells.len(), config.out_dir.display());
        }
        Command::Report { dir } => {
            print!("{}", harness::report(&dir)?.to_text());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<flatlab::Error>() {
                Some(e) if e.is_config() => ExitCode::from(EXIT_CONFIG),
                Some(flatlab::Error::Diverged { .. }) => ExitCode::from(EXIT_DIVERGED),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
