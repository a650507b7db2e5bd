//! Federated weakly supervised anomaly detection with split learning.
//!
//! Edge devices encode local tabular data with a one-block Transformer and
//! a compression layer, optionally privatise the features with the Gaussian
//! mechanism, and upload them; a cloud coordinator scores them with an MLP
//! and returns feature gradients so every device can train its encoder.
//!
//! ```no_run
//! use fedanomaly_core::{run_experiment, ExperimentConfig};
//!
//! let cfg = ExperimentConfig { max_rounds: 200, ..ExperimentConfig::default() };
//! let result = run_experiment(&cfg)?;
//! println!("AUC-ROC {:.3}", result.final_metrics.auc_roc);
//! # Ok::<(), fedanomaly_core::Error>(())
//! ```

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod dp;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod numerics;
pub mod protocol;
pub mod scorer;

pub use checkpoint::Checkpoint;
pub use config::{DataSource, ExperimentConfig};
pub use data::{
    load_csv, make_split, shard, BatchSampler, Dataset, DeviceShard, Schema, SplitConfig, SplitManifest, SynthConfig,
    WeakSupervisionSplit,
};
pub use diagnostics::{model_grad_check, GradCheckSetup, ModelGradCheck};
pub use dp::{add_gaussian_noise, clip_rows, compute_sigma, ClippedFeatures, DpConfig};
pub use encoder::{
    encoder_backward, encoder_forward, multi_head_attention, EncoderConfig, EncoderTape, FeatureLearner,
};
pub use error::{Error, Result};
pub use experiment::{
    build_federation, compare_overhead, evaluate, evaluate_run_dir, load_dataset, prepare, run_experiment,
    run_experiment_on, sweep, ExperimentResult, Federation, OverheadRow, Prepared, RunSummary, SweepCell, SweepGrid,
};
pub use metrics::{auc_pr, auc_roc, MetricsRecord};
pub use numerics::{grad_check, AdamConfig, AdamState, Gradients, Matrix, Parameterized, Rng, Stream};
pub use protocol::{
    aggregate_losses, detect, run_round, Coordinator, EdgeDevice, ProtocolMessage, RoundOptions, RoundRecord,
};
pub use scorer::{bce_loss, pseudo_label, score_forward, MlpScorer, ScoreBatch, ScorerConfig};
