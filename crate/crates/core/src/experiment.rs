//! Experiment orchestration: data preparation, training, periodic
//! evaluation, sweeps and run-directory artifacts.
//!
//! A run directory contains:
//!
//! | file | format |
//! |------|--------|
//! | `config.json` | the [`ExperimentConfig`] |
//! | `manifest.json` | the [`SplitManifest`] (all index sets + seed) |
//! | `metrics.jsonl` | one [`MetricsRecord`] per evaluation |
//! | `rounds.jsonl` | one [`RoundRecord`] per round |
//! | `curve.csv` | `round,auc_roc,auc_pr,global_loss` |
//! | `run.json` | [`RunSummary`] |
//! | `checkpoints/final.ckpt` | named-matrix checkpoint |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    builtin_schema, load_csv, make_split, shard, synth, Dataset, DeviceShard, Schema, SplitManifest,
    WeakSupervisionSplit,
};
use crate::encoder::{EncoderConfig, FeatureLearner};
use crate::error::{Error, Result};
use crate::metrics::{auc_pr, auc_roc, MetricsRecord};
use crate::numerics::{AdamConfig, Matrix, Rng, Stream};
use crate::protocol::{run_round, Coordinator, EdgeDevice, RoundOptions, RoundRecord};
use crate::scorer::{MlpScorer, ScorerConfig};

pub fn resolve_schema(name_or_path: &str) -> Result<Schema> {
    match builtin_schema(name_or_path) {
        Some(s) => Ok(s),
        None => Schema::from_json_file(Path::new(name_or_path)),
    }
}

/// Loads the raw (unnormalised) dataset.
pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(cfg) => synth::generate(cfg),
        DataSource::Csv { path, schema } => load_csv(path, &resolve_schema(schema)?),
    }
}

/// Normalised data and its partition.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Arc<Dataset>,
    pub split: WeakSupervisionSplit,
    pub shards: Vec<DeviceShard>,
}

impl Prepared {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            version: SplitManifest::VERSION,
            dataset: self.data.name.clone(),
            seed: self.split.seed,
            rows: self.data.len(),
            dim: self.data.dim(),
            split: self.split.clone(),
            shards: self.shards.clone(),
            normalization: self.data.normalization.clone(),
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig, raw: &Dataset) -> Result<Prepared> {
    cfg.validate_for_dim(raw.dim())?;
    let split = make_split(raw, &cfg.split, cfg.seed)?;
    let data = raw.normalized(&split.train_rows())?;
    let shards = shard(&split, cfg.devices, cfg.seed, cfg.dirichlet_alpha)?;
    Ok(Prepared {
        data: Arc::new(data),
        split,
        shards,
    })
}

#[derive(Debug)]
pub struct Federation {
    pub devices: Vec<EdgeDevice>,
    pub coordinator: Coordinator,
}

pub fn encoder_config(cfg: &ExperimentConfig, input_dim: usize) -> EncoderConfig {
    EncoderConfig {
        batch_as_sequence: cfg.batch_as_sequence,
        ..EncoderConfig::new(input_dim, cfg.heads, cfg.feature_dim(input_dim))
    }
}

/// Devices share one initial encoder; the scorer has its own init stream.
pub fn build_federation(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Federation> {
    let d = prepared.data.dim();
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let learner = FeatureLearner::new(encoder_config(cfg, d), &mut Rng::derive(cfg.seed, Stream::Init, &[1]))?;
    let scorer = MlpScorer::new(
        ScorerConfig {
            input_dim: cfg.feature_dim(d),
            hidden: cfg.scorer_hidden.clone(),
        },
        &mut Rng::derive(cfg.seed, Stream::Init, &[0]),
    )?;
    let devices = prepared
        .shards
        .iter()
        .map(|s| {
            EdgeDevice::new(
                s.clone(),
                Arc::clone(&prepared.data),
                learner.clone(),
                cfg.dp,
                adam,
                cfg.batch_size,
                cfg.seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let counts = devices.iter().map(EdgeDevice::sample_count).collect();
    Ok(Federation {
        devices,
        coordinator: Coordinator::new(scorer, adam, counts)?,
    })
}

/// Scores of all held-out rows (device order) with their true labels.
pub fn test_scores(fed: &Federation) -> Result<(Vec<f64>, Vec<u8>)> {
    let tag = fed.coordinator.round();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for d in &fed.devices {
        let features = d.extract_test_features(tag)?;
        scores.extend(fed.coordinator.score_features(&features)?);
        labels.extend(d.shard().test.iter().map(|&i| d.data().labels[i]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence("non-finite test scores".into()));
    }
    Ok((scores, labels))
}

/// `(AUC-ROC, AUC-PR)` on the held-out rows.
pub fn evaluate(fed: &Federation) -> Result<(f64, f64)> {
    let (scores, labels) = test_scores(fed)?;
    Ok((auc_roc(&scores, &labels)?, auc_pr(&scores, &labels)?))
}

/// First number of completed rounds `t ≥ 2w` at which the mean loss of the
/// last `w` rounds improved on the `w` before it by less than `tol`.
pub fn converged_round(losses: &[f64], window: usize, tol: f64) -> Option<usize> {
    if window == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (2 * window..=losses.len())
        .find(|&t| mean(&losses[t - 2 * window..t - window]) - mean(&losses[t - window..t]) < tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: u32,
    pub dataset: String,
    pub rows: usize,
    pub dim: usize,
    pub feature_dim: usize,
    pub rounds_run: u32,
    pub converged_round: Option<u32>,
    /// Noise standard deviation when DP is on.
    pub sigma: Option<f64>,
    pub sampling_rate: f64,
    pub final_metrics: MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub final_metrics: MetricsRecord,
    pub history: Vec<MetricsRecord>,
    pub rounds: Vec<RoundRecord>,
    pub converged_round: Option<u32>,
    pub rounds_run: u32,
    pub sigma: Option<f64>,
    pub feature_dim: usize,
}

struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    rounds: BufWriter<File>,
    curve: BufWriter<File>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

impl RunWriter {
    fn create(dir: &Path, cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        write_json(&dir.join("config.json"), cfg)?;
        write_json(&dir.join("manifest.json"), &prepared.manifest())?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        let mut curve = open("curve.csv")?;
        writeln!(curve, "round,auc_roc,auc_pr,global_loss")?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics: open("metrics.jsonl")?,
            rounds: open("rounds.jsonl")?,
            curve,
        })
    }

    fn metrics(&mut self, m: &MetricsRecord) -> Result<()> {
        writeln!(self.metrics, "{}", serde_json::to_string(m)?)?;
        let loss = m.global_loss.map_or(String::new(), |l| format!("{l}"));
        writeln!(self.curve, "{},{},{},{}", m.round, m.auc_roc, m.auc_pr, loss)?;
        Ok(())
    }

    fn round(&mut self, r: &RoundRecord) -> Result<()> {
        writeln!(self.rounds, "{}", serde_json::to_string(r)?)?;
        Ok(())
    }

    fn checkpoint(&self, name: &str, fed: &Federation) -> Result<()> {
        federation_checkpoint(fed).save(&self.dir.join("checkpoints").join(name))
    }

    fn finish(mut self, summary: &RunSummary) -> Result<()> {
        self.metrics.flush()?;
        self.rounds.flush()?;
        self.curve.flush()?;
        write_json(&self.dir.join("run.json"), summary)
    }
}

/// Scorer under `scorer/`, device `k` under `device{k}/`, the round
/// counter as `meta/round`.
pub fn federation_checkpoint(fed: &Federation) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push(
        "meta/round",
        Matrix::from_vec(1, 1, vec![f64::from(fed.coordinator.round())]).expect("1x1"),
    );
    c.push_model("scorer", fed.coordinator.scorer());
    for d in &fed.devices {
        c.push_model(&format!("device{}", d.id()), d.learner());
    }
    c
}

pub fn restore_federation(fed: &mut Federation, ckpt: &Checkpoint) -> Result<()> {
    ckpt.load_model("scorer", fed.coordinator.scorer_mut())?;
    for d in &mut fed.devices {
        let prefix = format!("device{}", d.id());
        ckpt.load_model(&prefix, d.learner_mut())?;
    }
    if let Some(r) = ckpt.get("meta/round") {
        fed.coordinator.set_round(r.data()[0] as u32);
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let raw = load_dataset(&cfg.dataset)?;
    run_experiment_on(cfg, &raw)
}

/// Runs on an already loaded raw dataset (shared between sweep cells).
pub fn run_experiment_on(cfg: &ExperimentConfig, raw: &Dataset) -> Result<ExperimentResult> {
    let prepared = prepare(cfg, raw)?;
    let mut fed = build_federation(cfg, &prepared)?;
    let mut writer = match &cfg.output_dir {
        Some(dir) => Some(RunWriter::create(dir, cfg, &prepared)?),
        None => None,
    };
    let opts = RoundOptions {
        participation_rate: cfg.participation_rate,
        parallel: cfg.parallel,
        seed: cfg.seed,
    };
    let dataset = prepared.data.name.clone();
    let record = |fed: &Federation, round: u32, loss: Option<f64>| -> Result<MetricsRecord> {
        let (roc, pr) = evaluate(fed)?;
        Ok(MetricsRecord {
            round,
            auc_roc: roc,
            auc_pr: pr,
            global_loss: loss,
            dataset: dataset.clone(),
            devices: cfg.devices,
        })
    };

    let mut history = vec![record(&fed, 0, None)?];
    if let Some(w) = writer.as_mut() {
        w.metrics(&history[0])?;
    }
    let mut rounds = Vec::new();
    let mut losses = Vec::new();
    let mut last_loss = None;
    let mut converged = None;
    for r in 1..=cfg.max_rounds {
        let rec = run_round(&mut fed.devices, &mut fed.coordinator, &opts)?;
        if let Some(l) = rec.global_loss {
            losses.push(l);
            last_loss = Some(l);
            if converged.is_none() {
                let w = cfg.convergence_window as usize;
                let t = losses.len();
                if t >= 2 * w && converged_round(&losses[t - 2 * w..], w, cfg.convergence_tol).is_some() {
                    converged = Some(r);
                }
            }
        }
        if let Some(w) = writer.as_mut() {
            w.round(&rec)?;
        }
        rounds.push(rec);
        let stop = cfg.early_stop && converged.is_some();
        if r % cfg.eval_every == 0 || r == cfg.max_rounds || stop {
            let m = record(&fed, r, last_loss)?;
            if let Some(w) = writer.as_mut() {
                w.metrics(&m)?;
            }
            history.push(m);
        }
        if cfg.checkpoint_every > 0 && r % cfg.checkpoint_every == 0 {
            if let Some(w) = writer.as_ref() {
                w.checkpoint(&format!("round_{r}.ckpt"), &fed)?;
            }
        }
        if stop {
            break;
        }
    }

    let final_metrics = history.last().cloned().expect("initial evaluation present");
    let sigma = if cfg.dp.enabled { Some(cfg.dp.sigma()?) } else { None };
    let result = ExperimentResult {
        final_metrics: final_metrics.clone(),
        history,
        rounds_run: fed.coordinator.round(),
        rounds,
        converged_round: converged,
        sigma,
        feature_dim: cfg.feature_dim(prepared.data.dim()),
    };
    if let Some(w) = writer {
        w.checkpoint("final.ckpt", &fed)?;
        w.finish(&RunSummary {
            version: 1,
            dataset: prepared.data.name.clone(),
            rows: prepared.data.len(),
            dim: prepared.data.dim(),
            feature_dim: result.feature_dim,
            rounds_run: result.rounds_run,
            converged_round: result.converged_round,
            sigma,
            sampling_rate: cfg.dp.sampling_rate,
            final_metrics,
        })?;
    }
    Ok(result)
}

/// Re-evaluates a finished run from its archived config and a checkpoint
/// (default `checkpoints/final.ckpt`).
pub fn evaluate_run_dir(dir: &Path, checkpoint: Option<&Path>) -> Result<MetricsRecord> {
    let cfg = ExperimentConfig::from_json_file(&dir.join("config.json"))?;
    let raw = load_dataset(&cfg.dataset)?;
    let prepared = prepare(&cfg, &raw)?;
    let mut fed = build_federation(&cfg, &prepared)?;
    let default = dir.join("checkpoints").join("final.ckpt");
    let ckpt = Checkpoint::load(checkpoint.unwrap_or(&default))?;
    restore_federation(&mut fed, &ckpt)?;
    let (roc, pr) = evaluate(&fed)?;
    Ok(MetricsRecord {
        round: fed.coordinator.round(),
        auc_roc: roc,
        auc_pr: pr,
        global_loss: None,
        dataset: prepared.data.name.clone(),
        devices: cfg.devices,
    })
}

/// Axes of a sweep; every combination is one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub devices: Vec<usize>,
    pub ratios: Vec<f64>,
    pub dp: Vec<bool>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub devices: usize,
    pub ratio: f64,
    pub dp: bool,
    pub seed: u64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub rounds_run: u32,
    pub converged_round: Option<u32>,
}

impl SweepGrid {
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &k in &self.devices {
            for &ratio in &self.ratios {
                for &dp in &self.dp {
                    for &seed in &self.seeds {
                        let mut cfg = base.clone();
                        cfg.devices = k;
                        cfg.feature_ratio = ratio;
                        cfg.dp.enabled = dp;
                        cfg.seed = seed;
                        cfg.output_dir = base
                            .output_dir
                            .as_ref()
                            .map(|d| d.join(format!("k{k}_r{ratio}_dp{}_s{seed}", u8::from(dp))));
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

/// Runs every cell on the shared dataset, in parallel across cells.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, raw: &Dataset) -> Result<Vec<SweepCell>> {
    let cells = grid.cells(base);
    cells
        .par_iter()
        .map(|cfg| {
            let r = run_experiment_on(cfg, raw)?;
            Ok(SweepCell {
                devices: cfg.devices,
                ratio: cfg.feature_ratio,
                dp: cfg.dp.enabled,
                seed: cfg.seed,
                auc_roc: r.final_metrics.auc_roc,
                auc_pr: r.final_metrics.auc_pr,
                rounds_run: r.rounds_run,
                converged_round: r.converged_round,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub ratio: f64,
    pub feature_dim: usize,
    /// FeatureBatch payload bytes per participating device per round.
    pub feature_payload_bytes: u64,
    /// `feature_payload_bytes` relative to ratio 1.0.
    pub normalized_payload: f64,
    /// All uploaded frame bytes per participating device per round.
    pub upload_bytes: u64,
    pub converged_round: Option<u32>,
    pub auc_roc: f64,
}

/// Trains once per ratio (1.0 is always included) and reports per-round
/// upload volume relative to full-dimension features.
pub fn compare_overhead(base: &ExperimentConfig, ratios: &[f64], raw: &Dataset) -> Result<Vec<OverheadRow>> {
    if ratios.len() < 2 {
        return Err(Error::Config("compare at least two feature ratios".into()));
    }
    let mut all: Vec<f64> = ratios.to_vec();
    if !all.contains(&1.0) {
        all.push(1.0);
    }
    let runs = all
        .par_iter()
        .map(|&ratio| {
            let cfg = ExperimentConfig {
                feature_ratio: ratio,
                output_dir: base.output_dir.as_ref().map(|d| d.join(format!("ratio_{ratio}"))),
                ..base.clone()
            };
            let r = run_experiment_on(&cfg, raw)?;
            let first = r
                .rounds
                .iter()
                .find(|rec| !rec.device_losses.is_empty())
                .ok_or_else(|| Error::Config("no round with participating devices".into()))?;
            let n = first.device_losses.len() as u64;
            Ok((
                ratio,
                r.feature_dim,
                first.feature_payload_bytes / n,
                first.bytes_uploaded / n,
                r,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let full = runs
        .iter()
        .find(|r| r.0 == 1.0)
        .map(|r| r.2 as f64)
        .expect("ratio 1.0 included");
    Ok(runs
        .into_iter()
        .filter(|r| ratios.contains(&r.0))
        .map(|(ratio, m, payload, upload, r)| OverheadRow {
            ratio,
            feature_dim: m,
            feature_payload_bytes: payload,
            normalized_payload: payload as f64 / full,
            upload_bytes: upload,
            converged_round: r.converged_round,
            auc_roc: r.final_metrics.auc_roc,
        })
        .collect())
}
