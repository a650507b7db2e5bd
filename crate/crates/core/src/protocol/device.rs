use std::sync::Arc;

use super::ProtocolMessage;
use crate::data::{BatchSampler, Dataset, DeviceShard};
use crate::dp::{add_gaussian_noise, clip_rows, ClippedFeatures, DpConfig};
use crate::encoder::{EncoderTape, FeatureLearner};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Matrix, Parameterized, Rng, Stream};
use crate::scorer::{bce_loss, bce_score_grad};

/// State held between the upload and the gradient return of one round.
#[derive(Debug)]
struct Pending {
    round: u32,
    labels: Vec<u8>,
    tape: EncoderTape,
    clipped: Option<ClippedFeatures>,
    shape: (usize, usize),
}

/// A simulated edge device. Owns its data partition, encoder and
/// optimiser; only features, losses, counts and score gradients leave it.
#[derive(Debug)]
pub struct EdgeDevice {
    id: u16,
    data: Arc<Dataset>,
    shard: DeviceShard,
    learner: FeatureLearner,
    dp: DpConfig,
    adam: AdamState,
    sampler: BatchSampler,
    seed: u64,
    last_round: Option<u32>,
    pending: Option<Pending>,
    last_global_loss: Option<f64>,
}

/// Sampling stream of device `id`.
pub fn sampling_rng(seed: u64, id: u16) -> Rng {
    Rng::derive(seed, Stream::Sampling, &[u64::from(id)])
}

/// Noise stream of device `id` for a training round.
pub fn noise_rng(seed: u64, id: u16, round: u32) -> Rng {
    Rng::derive(seed, Stream::Noise, &[u64::from(id), u64::from(round)])
}

impl EdgeDevice {
    pub fn new(
        shard: DeviceShard,
        data: Arc<Dataset>,
        learner: FeatureLearner,
        dp: DpConfig,
        adam: AdamConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if learner.config().input_dim != data.dim() {
            return Err(Error::Config(format!(
                "encoder expects {} inputs but the dataset has {} columns",
                learner.config().input_dim,
                data.dim()
            )));
        }
        if dp.enabled {
            dp.sigma()?;
        }
        let sampler = BatchSampler::new(&shard, batch_size, sampling_rng(seed, shard.device))?;
        Ok(EdgeDevice {
            id: shard.device,
            adam: AdamState::new(adam, &learner.param_shapes()),
            data,
            shard,
            learner,
            dp,
            sampler,
            seed,
            last_round: None,
            pending: None,
            last_global_loss: None,
        })
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn shard(&self) -> &DeviceShard {
        &self.shard
    }

    pub fn learner(&self) -> &FeatureLearner {
        &self.learner
    }

    pub fn learner_mut(&mut self) -> &mut FeatureLearner {
        &mut self.learner
    }

    pub fn dp(&self) -> &DpConfig {
        &self.dp
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// `n_k`, the local training sample count.
    pub fn sample_count(&self) -> u64 {
        self.shard.train_len() as u64
    }

    pub fn last_global_loss(&self) -> Option<f64> {
        self.last_global_loss
    }

    /// Encodes rows and applies the upload transform (clip and noise when
    /// DP is enabled).
    fn privatize(&self, features: &Matrix, rng: &mut Rng) -> Result<(Matrix, Option<ClippedFeatures>)> {
        if !self.dp.enabled {
            return Ok((features.clone(), None));
        }
        let clipped = clip_rows(features, self.dp.clip_norm);
        let noisy = add_gaussian_noise(&clipped, &self.dp, rng)?;
        Ok((noisy, Some(clipped)))
    }

    /// Steps (1)–(3): sample a batch, encode, privatise, upload.
    pub fn upload_features(&mut self, round: u32) -> Result<ProtocolMessage> {
        if self.last_round.is_some_and(|r| round < r) {
            return Err(Error::Protocol(format!(
                "device {} asked for round {round} after round {}",
                self.id,
                self.last_round.unwrap_or(0)
            )));
        }
        self.last_round = Some(round);
        let (batch, labels) = self.sampler.next_batch(&self.data);
        let (features, tape) = self.learner.forward(&batch)?;
        let (upload, clipped) = self.privatize(&features, &mut noise_rng(self.seed, self.id, round))?;
        self.pending = Some(Pending {
            round,
            labels,
            tape,
            clipped,
            shape: upload.shape(),
        });
        Ok(ProtocolMessage::FeatureBatch {
            device: self.id,
            round,
            features: upload,
        })
    }

    fn pending(&self, round: u32, kind: &str) -> Result<&Pending> {
        match &self.pending {
            Some(p) if p.round == round => Ok(p),
            _ => Err(Error::Protocol(format!(
                "device {} received {kind} for round {round} without a matching upload",
                self.id
            ))),
        }
    }

    /// Step (5): local loss and `dL_k/dS` from the returned scores.
    /// Returns `(LossReport, ScoreGrad)`.
    pub fn receive_scores(&mut self, msg: &ProtocolMessage) -> Result<(ProtocolMessage, ProtocolMessage)> {
        let ProtocolMessage::ScoreBatch { device, round, scores } = msg else {
            return Err(Error::Protocol(format!(
                "device {} expected ScoreBatch, got {}",
                self.id,
                msg.kind()
            )));
        };
        if *device != self.id {
            return Err(Error::Protocol(format!(
                "device {} received scores for device {device}",
                self.id
            )));
        }
        let p = self.pending(*round, "ScoreBatch")?;
        if scores.len() != p.labels.len() {
            return Err(Error::Protocol(format!(
                "device {} sent {} rows but got {} scores",
                self.id,
                p.labels.len(),
                scores.len()
            )));
        }
        let loss = bce_loss(scores, &p.labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "device {} loss is {loss} in round {round}",
                self.id
            )));
        }
        let grad = bce_score_grad(scores, &p.labels)?;
        Ok((
            ProtocolMessage::LossReport {
                device: self.id,
                round: *round,
                loss,
                samples: self.sample_count(),
            },
            ProtocolMessage::ScoreGrad {
                device: self.id,
                round: *round,
                grad,
            },
        ))
    }

    /// Records the broadcast global loss.
    pub fn receive_global_loss(&mut self, msg: &ProtocolMessage) -> Result<()> {
        match msg {
            ProtocolMessage::GlobalLoss { loss, .. } => {
                self.last_global_loss = Some(*loss);
                Ok(())
            }
            other => Err(Error::Protocol(format!(
                "device {} expected GlobalLoss, got {}",
                self.id,
                other.kind()
            ))),
        }
    }

    /// Step (7): backpropagate the returned feature gradient through the
    /// privacy transform and the encoder, then apply Adam.
    pub fn receive_feature_grad(&mut self, msg: &ProtocolMessage) -> Result<()> {
        let ProtocolMessage::FeatureGrad { round, grad, .. } = msg else {
            return Err(Error::Protocol(format!(
                "device {} expected FeatureGrad, got {}",
                self.id,
                msg.kind()
            )));
        };
        let p = self.pending(*round, "FeatureGrad")?;
        if grad.shape() != p.shape {
            return Err(Error::Protocol(format!(
                "device {} uploaded {:?} features but got a {:?} gradient",
                self.id,
                p.shape,
                grad.shape()
            )));
        }
        let grad = match &p.clipped {
            // Noise is additive, so its Jacobian is the identity.
            Some(c) => c.backward(grad)?,
            None => grad.clone(),
        };
        let grads = self.learner.backward(&p.tape, &grad)?;
        if !grads.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite encoder gradient on device {}",
                self.id
            )));
        }
        self.adam.update(self.learner.params_mut(), &grads.0)?;
        self.pending = None;
        Ok(())
    }

    /// Features of this device's test rows as they would be uploaded for
    /// detection, using the evaluation noise stream for `tag`.
    pub fn extract_test_features(&self, tag: u32) -> Result<Matrix> {
        self.extract_features(&self.shard.test, tag)
    }

    pub fn extract_features(&self, rows: &[usize], tag: u32) -> Result<Matrix> {
        let batch = self.data.features.select_rows(rows);
        let (features, _) = self.learner.forward(&batch)?;
        let mut rng = Rng::derive(self.seed, Stream::EvalNoise, &[u64::from(self.id), u64::from(tag)]);
        Ok(self.privatize(&features, &mut rng)?.0)
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }
}
