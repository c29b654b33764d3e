//! Flat-minima optimization on small models: a reverse-mode autodiff tape,
//! MLP and small convolutional models, SGD/momentum/Adam with SAM
//! perturbation and iterate averaging, and loss-landscape analysis.
//!
//! ```
//! use flatlab::models::AnalyticLoss;
//! use flatlab::objective::Analytic;
//! use flatlab::optim::{run_training, FlatMode, OptimizerConfig};
//! use flatlab::rng::RngStream;
//!
//! let obj = Analytic::new(AnalyticLoss::quadratic(2)).with_noise(0.1, 10);
//! let init = obj.point(vec![1.0, -1.0]).unwrap();
//! let config = OptimizerConfig { lr: 0.1, epochs: 5, rho: 0.05, ..Default::default() };
//! let run = run_training(&obj, &config, FlatMode::Wasam, &init, &RngStream::new(0, 2)).unwrap();
//! assert!(run.solution().norm() < init.norm());
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod landscape;
pub mod models;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Exec;
pub use params::{Gradient, Layout, ParameterVector, Segment};
