use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{transmit, Coordinator, EdgeDevice, ProtocolMessage};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Stream};
use crate::scorer::pseudo_label;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOptions {
    /// Probability that a device takes part in a round.
    pub participation_rate: f64,
    /// Run device-local steps on the rayon pool.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for RoundOptions {
    fn default() -> Self {
        RoundOptions {
            participation_rate: 1.0,
            parallel: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceLoss {
    pub device: u16,
    pub loss: f64,
    pub samples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// `None` when no device participated.
    pub global_loss: Option<f64>,
    pub device_losses: Vec<DeviceLoss>,
    /// Frame bytes sent device → coordinator, all devices.
    pub bytes_uploaded: u64,
    /// Frame bytes sent coordinator → device, all devices.
    pub bytes_downloaded: u64,
    /// Payload bytes of FeatureBatch messages only (`8·b·m` per device).
    pub feature_payload_bytes: u64,
    pub wall_time_ms: f64,
}

/// FedAvg: `Σ p_k L_k` with `p_k = n_k / Σ n_j` over the given reports.
pub fn aggregate_losses(reports: &[ProtocolMessage]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(reports.len());
    for r in reports {
        match r {
            ProtocolMessage::LossReport { loss, samples, .. } => pairs.push((*loss, *samples)),
            other => return Err(Error::Protocol(format!("expected LossReport, got {}", other.kind()))),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Protocol("no loss reports to aggregate".into()));
    }
    let total: u64 = pairs.iter().map(|p| p.1).sum();
    if total == 0 {
        return Err(Error::Protocol("loss reports carry zero samples".into()));
    }
    Ok(pairs.iter().map(|&(l, n)| l * (n as f64 / total as f64)).sum())
}

/// Applies `f` to each device, concurrently if requested. Results are
/// returned in input order; the first error by position wins.
fn each<T, F>(devices: &mut [&mut EdgeDevice], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut EdgeDevice) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = if parallel {
        devices.par_iter_mut().map(|d| f(d)).collect()
    } else {
        devices.iter_mut().map(|d| f(d)).collect()
    };
    results.into_iter().collect()
}

fn participants(n: usize, round: u32, opts: &RoundOptions) -> Vec<bool> {
    if opts.participation_rate >= 1.0 {
        return vec![true; n];
    }
    let mut rng = Rng::derive(opts.seed, Stream::Participation, &[u64::from(round)]);
    (0..n).map(|_| rng.bernoulli(opts.participation_rate)).collect()
}

/// One training round. Devices must be sorted by id.
pub fn run_round(devices: &mut [EdgeDevice], coord: &mut Coordinator, opts: &RoundOptions) -> Result<RoundRecord> {
    let start = Instant::now();
    let round = coord.round();
    if devices.windows(2).any(|w| w[0].id() >= w[1].id()) {
        return Err(Error::Protocol("devices must be in ascending id order".into()));
    }
    let take = participants(devices.len(), round, opts);
    let mut active: Vec<&mut EdgeDevice> = devices
        .iter_mut()
        .zip(&take)
        .filter_map(|(d, &t)| t.then_some(d))
        .collect();
    let mut record = RoundRecord {
        round,
        global_loss: None,
        device_losses: Vec::new(),
        bytes_uploaded: 0,
        bytes_downloaded: 0,
        feature_payload_bytes: 0,
        wall_time_ms: 0.0,
    };
    if active.is_empty() {
        coord.advance_round();
        record.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok(record);
    }

    // (1)–(3) encode, privatise, upload.
    let uploads = each(&mut active, opts.parallel, |d| transmit(&d.upload_features(round)?))?;

    // (4) score in device-id order.
    let mut tapes = Vec::with_capacity(uploads.len());
    let mut score_msgs = Vec::with_capacity(uploads.len());
    for (msg, bytes) in &uploads {
        record.bytes_uploaded += *bytes as u64;
        record.feature_payload_bytes += 8 * msg.payload_len() as u64;
        let (reply, tape) = coord.score(msg)?;
        let (reply, bytes) = transmit(&reply)?;
        record.bytes_downloaded += bytes as u64;
        tapes.push(tape);
        score_msgs.push(reply);
    }

    // (5) local losses and score gradients.
    let replies: Vec<(ProtocolMessage, ProtocolMessage)> = active
        .iter_mut()
        .zip(&score_msgs)
        .map(|(d, m)| d.receive_scores(m))
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(replies.len());
    let mut score_grads = Vec::with_capacity(replies.len());
    for (report, grad) in &replies {
        let (report, b1) = transmit(report)?;
        let (grad, b2) = transmit(grad)?;
        record.bytes_uploaded += (b1 + b2) as u64;
        if let ProtocolMessage::LossReport {
            device, loss, samples, ..
        } = report
        {
            record.device_losses.push(DeviceLoss { device, loss, samples });
        }
        reports.push(report);
        score_grads.push(grad);
    }

    // (6) aggregate, update the scorer, return gradients.
    let global = aggregate_losses(&reports)?;
    if !global.is_finite() {
        return Err(Error::Divergence(format!("global loss is {global} in round {round}")));
    }
    record.global_loss = Some(global);
    let mut backward = Vec::with_capacity(tapes.len());
    for (tape, grad) in tapes.iter().zip(&score_grads) {
        backward.push(coord.backward(tape, grad)?);
    }
    let mut downlinks = Vec::with_capacity(backward.len());
    for (grads, feature_grad) in backward {
        coord.apply(&grads)?;
        let device = feature_grad.device();
        let (g, b1) = transmit(&ProtocolMessage::GlobalLoss {
            device,
            round,
            loss: global,
        })?;
        let (f, b2) = transmit(&feature_grad)?;
        record.bytes_downloaded += (b1 + b2) as u64;
        downlinks.push((g, f));
    }

    // (7) edge updates.
    let mut paired: Vec<(&mut EdgeDevice, (ProtocolMessage, ProtocolMessage))> =
        active.into_iter().zip(downlinks).collect();
    let results: Vec<Result<()>> = if opts.parallel {
        paired
            .par_iter_mut()
            .map(|(d, (g, f))| {
                d.receive_global_loss(g)?;
                d.receive_feature_grad(f)
            })
            .collect()
    } else {
        paired
            .iter_mut()
            .map(|(d, (g, f))| {
                d.receive_global_loss(g)?;
                d.receive_feature_grad(f)
            })
            .collect()
    };
    results.into_iter().collect::<Result<()>>()?;

    coord.advance_round();
    record.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub device: u16,
    pub row: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub device: u16,
    /// Dataset rows of the device's held-out partition.
    pub rows: Vec<usize>,
    pub scores: Vec<f64>,
    /// `1` where `score >= tau`.
    pub pseudo_labels: Vec<u8>,
    /// One per row with `score > tau`.
    pub alerts: Vec<Alert>,
}

/// Scores every device's held-out rows and raises alerts above `tau`.
pub fn detect(devices: &[EdgeDevice], coord: &Coordinator, tau: f64) -> Result<Vec<Detection>> {
    devices
        .iter()
        .map(|d| {
            let rows = d.shard().test.clone();
            let features = d.extract_test_features(coord.round())?;
            let scores = coord.score_features(&features)?;
            let alerts = rows
                .iter()
                .zip(&scores)
                .filter(|(_, &s)| s > tau)
                .map(|(&row, &score)| Alert {
                    device: d.id(),
                    row,
                    score,
                })
                .collect();
            Ok(Detection {
                device: d.id(),
                pseudo_labels: pseudo_label(&scores, tau),
                rows,
                scores,
                alerts,
            })
        })
        .collect()
}
