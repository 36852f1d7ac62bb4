//! Resolved command settings: defaults, overlaid by a JSON config file,
//! overlaid by explicit flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use introspect_core::cluster::{log_grid, DEFAULT_MIN_PTS};
use introspect_core::dataset::{BridgeSpec, Dataset, SyntheticConfig};
use introspect_core::experiment::{DatasetSource, EpsChoice, ExperimentConfig};
use introspect_core::explain::{Method, ReferenceMode};
use introspect_core::introspect::FlagThresholds;
use introspect_core::model::TrainConfig;
use introspect_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    /// Train followed by test.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub bridge: Option<[u16; 2]>,
    pub split: Split,
    pub subset: Option<usize>,
    pub test_fraction: f64,
    pub synthetic_classes: usize,
    pub synthetic_dims: usize,
    pub synthetic_per_class: usize,
    pub centroid_scale: f32,
    pub noise_sigma: f32,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub method: Method,
    pub reference: ReferenceMode,
    pub pca_k: usize,
    pub eps: Option<f64>,
    pub eps_min: f64,
    pub eps_max: f64,
    pub eps_steps: usize,
    pub min_pts: usize,
    pub winsorize: bool,
    pub min_ratio: f64,
    pub min_second: usize,
    pub jobs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        let exp = ExperimentConfig::default();
        let thresholds = FlagThresholds::default();
        Settings {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            bridge: None,
            split: Split::Test,
            subset: None,
            test_fraction: 0.2,
            synthetic_classes: syn.num_classes,
            synthetic_dims: syn.dims,
            synthetic_per_class: syn.per_class_count,
            centroid_scale: syn.centroid_scale,
            noise_sigma: syn.noise_sigma,
            seed: 0,
            hidden: exp.hidden_layers,
            epochs: exp.train.epochs,
            batch: exp.train.batch_size,
            lr: exp.train.learning_rate,
            momentum: exp.train.momentum,
            method: exp.method,
            reference: exp.reference,
            pca_k: exp.pca_k,
            eps: None,
            eps_min: 1e-3,
            eps_max: 1e3,
            eps_steps: 61,
            min_pts: DEFAULT_MIN_PTS,
            winsorize: exp.winsorize,
            min_ratio: thresholds.min_ratio,
            min_second: thresholds.min_second,
            jobs: 1,
        }
    }
}

/// Merges `defaults <- config file <- flags`, key by key.
pub fn resolve(config: Option<&Path>, flags: Map<String, Value>) -> Result<Settings> {
    let mut merged = match serde_json::to_value(Settings::default())? {
        Value::Object(m) => m,
        _ => unreachable!("settings serialize to an object"),
    };
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(Error::invalid(format!("config {} must hold a JSON object", path.display())));
        };
        merged.extend(file);
    }
    merged.extend(flags);
    let s: Settings = serde_json::from_value(Value::Object(merged)).map_err(|e| Error::invalid(e.to_string()))?;
    s.validate()?;
    Ok(s)
}

impl Settings {
    fn validate(&self) -> Result<()> {
        if let Some(eps) = self.eps {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::invalid(format!("--eps must be a positive number, got {eps}")));
            }
        }
        if !(self.eps_min > 0.0 && self.eps_max >= self.eps_min && self.eps_max.is_finite()) {
            return Err(Error::invalid("epsilon grid needs 0 < eps_min <= eps_max"));
        }
        if self.eps_steps == 0 {
            return Err(Error::invalid("eps_steps must be at least 1"));
        }
        if self.min_pts == 0 {
            return Err(Error::invalid("min_pts must be at least 1"));
        }
        if self.pca_k == 0 {
            return Err(Error::invalid("pca_k must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must be in (0, 1)"));
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs must be at least 1"));
        }
        if let Some([a, b]) = self.bridge {
            if a == b {
                return Err(Error::invalid("bridge needs two distinct labels"));
            }
        }
        self.train_config().validate()
    }

    pub fn bridge_spec(&self) -> Option<BridgeSpec> {
        self.bridge.map(|[a, b]| BridgeSpec::new(a, b))
    }

    pub fn source(&self) -> Result<DatasetSource> {
        match self.dataset {
            DatasetKind::Mnist => {
                let dir = self
                    .data_dir
                    .clone()
                    .ok_or_else(|| Error::invalid("--data-dir is required for --dataset mnist"))?;
                Ok(DatasetSource::Mnist { dir })
            }
            DatasetKind::Synthetic => {
                let config = SyntheticConfig {
                    num_classes: self.synthetic_classes,
                    dims: self.synthetic_dims,
                    per_class_count: self.synthetic_per_class,
                    centroid_scale: self.centroid_scale,
                    noise_sigma: self.noise_sigma,
                    seed: self.seed,
                };
                config.validate()?;
                Ok(DatasetSource::Synthetic {
                    config,
                    test_fraction: self.test_fraction,
                })
            }
        }
    }

    /// Train and test splits, unbridged.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        self.source()?.load()
    }

    /// The split under analysis, after the optional seeded subset.
    pub fn pick(&self, train: &Dataset, test: &Dataset) -> Result<Dataset> {
        let ds = match self.split {
            Split::Train => train.clone(),
            Split::Test => test.clone(),
            Split::All => train.concat(test, format!("{}+{}", train.name, test.name))?,
        };
        Ok(match self.subset {
            Some(n) if n < ds.len() => ds.sample(n, self.seed),
            _ => ds,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            shuffle: true,
        }
    }

    pub fn eps_grid(&self) -> Vec<f64> {
        log_grid(self.eps_min, self.eps_max, self.eps_steps)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            hidden_layers: self.hidden.clone(),
            model_seed: self.seed,
            train: self.train_config(),
            method: self.method,
            reference: self.reference,
            pca_k: self.pca_k,
            eps: match self.eps {
                Some(e) => EpsChoice::Fixed(e),
                None => EpsChoice::Sweep(self.eps_grid()),
            },
            min_pts: self.min_pts,
            winsorize: self.winsorize,
            thresholds: FlagThresholds {
                min_ratio: self.min_ratio,
                min_second: self.min_second,
            },
        }
    }
}
