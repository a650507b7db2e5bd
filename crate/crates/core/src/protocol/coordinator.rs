use super::ProtocolMessage;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Gradients, Matrix, Parameterized};
use crate::scorer::{MlpScorer, ScorerTape};

/// Cloud side: owns the scorer, its optimiser and the FedAvg weights.
#[derive(Debug)]
pub struct Coordinator {
    scorer: MlpScorer,
    adam: AdamState,
    sample_counts: Vec<u64>,
    round: u32,
}

/// `p_k = n_k / Σ n_j`.
pub fn fedavg_weights(sample_counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = sample_counts.iter().sum();
    if total == 0 {
        return Err(Error::Protocol(
            "aggregation weights need a positive total sample count".into(),
        ));
    }
    Ok(sample_counts.iter().map(|&n| n as f64 / total as f64).collect())
}

impl Coordinator {
    /// `sample_counts[k]` is `n_k` of device `k`.
    pub fn new(scorer: MlpScorer, adam: AdamConfig, sample_counts: Vec<u64>) -> Result<Self> {
        fedavg_weights(&sample_counts)?;
        Ok(Coordinator {
            adam: AdamState::new(adam, &scorer.param_shapes()),
            scorer,
            sample_counts,
            round: 0,
        })
    }

    pub fn scorer(&self) -> &MlpScorer {
        &self.scorer
    }

    pub fn scorer_mut(&mut self) -> &mut MlpScorer {
        &mut self.scorer
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// FedAvg weights over all registered devices.
    pub fn weights(&self) -> Vec<f64> {
        fedavg_weights(&self.sample_counts).expect("validated at construction")
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Restores the round counter, e.g. after loading a checkpoint.
    pub fn set_round(&mut self, round: u32) {
        self.round = round;
    }

    pub(crate) fn advance_round(&mut self) {
        self.round += 1;
    }

    /// Step (4): scores an uploaded batch.
    pub fn score(&self, msg: &ProtocolMessage) -> Result<(ProtocolMessage, ScorerTape)> {
        let ProtocolMessage::FeatureBatch {
            device,
            round,
            features,
        } = msg
        else {
            return Err(Error::Protocol(format!(
                "coordinator expected FeatureBatch, got {}",
                msg.kind()
            )));
        };
        if features.cols() != self.scorer.config().input_dim {
            return Err(Error::Protocol(format!(
                "device {device} uploaded {} feature columns, scorer expects {}",
                features.cols(),
                self.scorer.config().input_dim
            )));
        }
        if !features.is_finite() {
            return Err(Error::Divergence(format!(
                "device {device} uploaded non-finite features"
            )));
        }
        let (scores, tape) = self.scorer.forward(features)?;
        Ok((
            ProtocolMessage::ScoreBatch {
                device: *device,
                round: *round,
                scores,
            },
            tape,
        ))
    }

    /// Scores a feature matrix without protocol framing (evaluation).
    pub fn score_features(&self, features: &Matrix) -> Result<Vec<f64>> {
        Ok(self.scorer.forward(features)?.0)
    }

    /// Step (6a): scorer gradients and the `FeatureGrad` reply for one device.
    pub fn backward(&self, tape: &ScorerTape, msg: &ProtocolMessage) -> Result<(Gradients, ProtocolMessage)> {
        let ProtocolMessage::ScoreGrad { device, round, grad } = msg else {
            return Err(Error::Protocol(format!(
                "coordinator expected ScoreGrad, got {}",
                msg.kind()
            )));
        };
        if grad.len() != tape.batch_size() {
            return Err(Error::Protocol(format!(
                "device {device} sent {} score gradients for {} scores",
                grad.len(),
                tape.batch_size()
            )));
        }
        let (grads, feature_grad) = self.scorer.backward(tape, grad)?;
        Ok((
            grads,
            ProtocolMessage::FeatureGrad {
                device: *device,
                round: *round,
                grad: feature_grad,
            },
        ))
    }

    /// Step (6b): one Adam step on the scorer.
    pub fn apply(&mut self, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite scorer gradient".into()));
        }
        self.adam.update(self.scorer.params_mut(), &grads.0)
    }
}
