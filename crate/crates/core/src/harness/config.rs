use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{generate, load_idx, Dataset, GeneratorKind};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, MetricKind, Model, TaskShape};
use crate::objective::Supervised;
use crate::optim::{FlatMode, OptimizerConfig};
use crate::params::ParameterVector;
use crate::rng::{streams, RngStream};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: GeneratorKind,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    /// IDX image and label files; when both are set they replace the
    /// generator and `seed` drives the split.
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: GeneratorKind::TwoMoons, n: 500, noise: 0.2, seed: 0, idx_images: None, idx_labels: None }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match (&self.idx_images, &self.idx_labels) {
            (Some(images), Some(labels)) => load_idx(images, labels, self.seed),
            (None, None) => generate(self.kind, self.n, self.noise, self.seed),
            _ => Err(Error::Config("idx_images and idx_labels must be given together".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: String,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub modes: Vec<FlatMode>,
    pub seeds: Vec<u64>,
    pub rho_grid: Vec<f64>,
    pub swa_start_grid: Vec<f64>,
    pub out_dir: PathBuf,
    pub workers: Option<usize>,
    pub bn_recompute: bool,
    pub metric: Option<MetricKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: "mlp[2-16-16-2]".into(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            modes: FlatMode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            rho_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            swa_start_grid: vec![0.5, 0.6, 0.75, 0.9],
            out_dir: PathBuf::from("runs/experiment"),
            workers: None,
            bn_recompute: true,
            metric: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Overrides one scalar key. Keys are dotted paths (`optimizer.lr`,
    /// `data.n`); a bare key is looked up at the top level, then in the
    /// optimizer and data sections. Values are parsed as JSON, falling back
    /// to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let path: Vec<&str> = if key.contains('.') {
            key.split('.').collect()
        } else {
            ["", "optimizer", "data"]
                .iter()
                .map(|section| if section.is_empty() { vec![key] } else { vec![*section, key] })
                .find(|p| lookup(&tree, p).is_some())
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?
        };
        let slot = lookup_mut(&mut tree, &path).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        self.model.parse()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.arch()?;
        self.optimizer.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no modes selected".into()));
        }
        let mut seen = self.modes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modes.len() {
            return Err(Error::Config("modes must not repeat".into()));
        }
        let perturbs = self.modes.iter().any(|m| m.perturbs());
        let averages = self.modes.iter().any(|m| m.averages());
        if perturbs && self.rho_grid.is_empty() {
            return Err(Error::Config("rho_grid is empty but sam or wasam is selected".into()));
        }
        if averages && self.swa_start_grid.is_empty() {
            return Err(Error::Config("swa_start_grid is empty but swa or wasam is selected".into()));
        }
        if perturbs {
            for &rho in &self.rho_grid {
                OptimizerConfig { rho, ..self.optimizer.clone() }.validate()?;
            }
        }
        if averages {
            for &frac in &self.swa_start_grid {
                let c = OptimizerConfig { swa_start_frac: frac, ..self.optimizer.clone() };
                c.validate()?;
                if c.swa_start_epoch() >= c.epochs {
                    return Err(Error::Config(format!(
                        "swa start {frac} of {} epochs leaves no averaging window",
                        c.epochs
                    )));
                }
            }
        }
        Ok(())
    }

    /// The dataset and training objective this config describes.
    pub fn objective(&self) -> Result<Supervised> {
        let data = Arc::new(self.data.load()?);
        let mut model = Model::new(self.arch()?, TaskShape::of(&data))?;
        if let Some(metric) = self.metric {
            model = model.with_metric(metric);
        }
        let obj = Supervised::new(model, data, self.optimizer.batch_size)?;
        if self.bn_recompute {
            Ok(obj)
        } else {
            obj.without_bn_recompute()
        }
    }

    /// Initial parameters shared by every mode for `seed`.
    pub fn init_params(&self, objective: &Supervised, seed: u64) -> ParameterVector {
        objective.model.init_params(&RngStream::new(seed, streams::INIT))
    }
}

fn lookup<'a>(tree: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(tree, |node, k| node.as_object()?.get(*k))
}

fn lookup_mut<'a>(tree: &'a mut Value, path: &[&str]) -> Option<&'a mut Value> {
    path.iter().try_fold(tree, |node, k| node.as_object_mut()?.get_mut(*k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.set("lr", "0.2").unwrap();
        c.set("data.n", "64").unwrap();
        c.set("noise", "0.05").unwrap();
        c.set("model", "mlpbn[2-4-2]").unwrap();
        c.set("optimizer.base", "adam").unwrap();
        c.set("seeds", "[4,5]").unwrap();
        assert_eq!(c.optimizer.lr, 0.2);
        assert_eq!(c.data.n, 64);
        assert_eq!(c.data.noise, 0.05);
        assert_eq!(c.model, "mlpbn[2-4-2]");
        assert_eq!(c.seeds, vec![4, 5]);
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("lr", "fast").is_err());
    }

    #[test]
    fn validation_errors() {
        let bad = [
            ExperimentConfig { seeds: vec![], ..Default::default() },
            ExperimentConfig { rho_grid: vec![], ..Default::default() },
            ExperimentConfig { swa_start_grid: vec![1.0], ..Default::default() },
            ExperimentConfig { model: "transformer[2-2]".into(), ..Default::default() },
            ExperimentConfig { schema_version: 9, ..Default::default() },
            ExperimentConfig { modes: vec![FlatMode::Sam, FlatMode::Sam], ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().unwrap_err().is_config(), "{c:?}");
        }
        let ok = ExperimentConfig { modes: vec![FlatMode::None], rho_grid: vec![], swa_start_grid: vec![], ..Default::default() };
        ok.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"optimizer": {"learning_rate": 1}}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"modes": ["baseline", "wasam"]}"#).unwrap();
        assert_eq!(c.modes, vec![FlatMode::None, FlatMode::Wasam]);
    }
}
