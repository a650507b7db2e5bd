use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{builtin_schema, named_dataset, SplitConfig, SynthConfig};
use crate::dp::DpConfig;
use crate::encoder::feature_dim_for_ratio;
use crate::error::{Error, Result};

/// Where the rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    /// A CSV with a schema file, or a built-in schema when `schema` is the
    /// name of a shipped dataset.
    Csv {
        path: PathBuf,
        schema: String,
    },
}

/// All knobs of one experiment; archived beside its results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    pub split: SplitConfig,
    /// Number of edge devices `K`.
    pub devices: usize,
    pub participation_rate: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `m = ⌈ratio · d⌉`.
    pub feature_ratio: f64,
    pub heads: usize,
    pub batch_as_sequence: bool,
    pub scorer_hidden: Vec<usize>,
    /// Alert threshold on anomaly scores.
    pub tau: f64,
    pub dp: DpConfig,
    /// Label skew of the labeled-anomaly shards; `None` is IID.
    pub dirichlet_alpha: Option<f64>,
    pub max_rounds: u32,
    pub eval_every: u32,
    /// Stop once the loss stops improving (see `convergence_window`).
    pub early_stop: bool,
    pub convergence_window: u32,
    pub convergence_tol: f64,
    /// Extra checkpoints every this many rounds; 0 keeps only the final one.
    pub checkpoint_every: u32,
    pub seed: u64,
    /// Run device-local work on the thread pool.
    pub parallel: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DataSource::Synthetic(SynthConfig::default()),
            split: SplitConfig::default(),
            devices: 3,
            participation_rate: 1.0,
            batch_size: 32,
            learning_rate: 1e-4,
            feature_ratio: 0.5,
            heads: 2,
            batch_as_sequence: false,
            scorer_hidden: vec![64, 32],
            tau: 0.5,
            dp: DpConfig::default(),
            dirichlet_alpha: None,
            max_rounds: 500,
            eval_every: 10,
            early_stop: true,
            convergence_window: 50,
            convergence_tol: 1e-5,
            checkpoint_every: 0,
            seed: 0,
            parallel: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Benchmark dataset at `path` with its published defaults
    /// (heads, labeled-anomaly count) and the shipped schema.
    pub fn named(name: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let info = named_dataset(name).ok_or_else(|| Error::Config(format!("unknown dataset '{name}'")))?;
        Ok(ExperimentConfig {
            dataset: DataSource::Csv {
                path: path.into(),
                schema: info.name.to_string(),
            },
            heads: info.heads,
            split: SplitConfig {
                labeled_anomalies: info.labeled_anomalies,
                ..SplitConfig::default()
            },
            ..Self::default()
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn dataset_name(&self) -> String {
        match &self.dataset {
            DataSource::Synthetic(_) => "synthetic".into(),
            DataSource::Csv { schema, .. } => builtin_schema(schema).map_or_else(
                || {
                    Path::new(schema)
                        .file_stem()
                        .map_or_else(|| schema.clone(), |s| s.to_string_lossy().into_owned())
                },
                |s| s.name,
            ),
        }
    }

    pub fn feature_dim(&self, input_dim: usize) -> usize {
        feature_dim_for_ratio(input_dim, self.feature_ratio)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch size must be even and positive, got {}", self.batch_size));
        }
        if self.devices == 0 {
            return bad("at least one device is required".into());
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return bad(format!(
                "participation rate must be in (0, 1], got {}",
                self.participation_rate
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.feature_ratio > 0.0 && self.feature_ratio <= 1.0) {
            return bad(format!("feature ratio must be in (0, 1], got {}", self.feature_ratio));
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.convergence_window == 0 || !(self.convergence_tol >= 0.0) {
            return bad("convergence window must be positive and tolerance non-negative".into());
        }
        if self.scorer_hidden.contains(&0) {
            return bad("scorer hidden widths must be positive".into());
        }
        if let Some(a) = self.dirichlet_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("Dirichlet alpha must be > 0, got {a}"));
            }
        }
        self.split.validate()?;
        self.dp.validate()?;
        if self.dp.enabled {
            self.dp.sigma()?;
        }
        Ok(())
    }

    /// Checks that depend on the input dimension.
    pub fn validate_for_dim(&self, input_dim: usize) -> Result<()> {
        self.validate()?;
        if !input_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide input dimension {input_dim}",
                self.heads
            )));
        }
        Ok(())
    }
}
