//! End-to-end gradient verification of the encoder + scorer stack.

use serde::Serialize;

use crate::encoder::{feature_dim_for_ratio, EncoderConfig, FeatureLearner};
use crate::error::{Error, Result};
use crate::numerics::{grad_check_params, GradCheckReport, Matrix, Parameterized, Rng, Stream};
use crate::scorer::{bce_loss, MlpScorer, ScorerConfig};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSetup {
    pub input_dim: usize,
    pub heads: usize,
    pub feature_ratio: f64,
    pub batch: usize,
    pub batch_as_sequence: bool,
    pub seed: u64,
    pub tol: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            input_dim: 12,
            heads: 3,
            feature_ratio: 0.5,
            batch: 4,
            batch_as_sequence: false,
            seed: 0,
            tol: 1e-4,
        }
    }
}

/// Minimum `|z|` at every ReLU for a batch to be checked. Ten times the
/// largest finite-difference step, so no stencil straddles a kink.
pub const KINK_MARGIN: f64 = 1e-4;

const MAX_DRAWS: usize = 1000;

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub seed: u64,
    /// Batches rejected for a ReLU pre-activation within [`KINK_MARGIN`] of zero.
    pub redraws: usize,
    pub encoder: GradCheckReport,
    pub scorer: GradCheckReport,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.encoder.passed() && self.scorer.passed()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.encoder.max_rel_error().max(self.scorer.max_rel_error())
    }
}

/// Checks every parameter of a freshly initialised encoder and scorer
/// against finite differences of the mean BCE on a random batch.
///
/// The objective is only piecewise smooth, so batches that put a ReLU
/// pre-activation within [`KINK_MARGIN`] of zero are redrawn from the same
/// stream.
pub fn model_grad_check(setup: &GradCheckSetup) -> Result<ModelGradCheck> {
    let d = setup.input_dim;
    let m = feature_dim_for_ratio(d, setup.feature_ratio);
    let mut rng = Rng::derive(setup.seed, Stream::Test, &[0x6c]);
    let cfg = EncoderConfig {
        batch_as_sequence: setup.batch_as_sequence,
        ..EncoderConfig::new(d, setup.heads, m)
    };
    let learner = FeatureLearner::new(cfg, &mut rng)?;
    let scorer = MlpScorer::new(ScorerConfig::new(m), &mut rng)?;
    let labels: Vec<u8> = (0..setup.batch).map(|i| (i % 2) as u8).collect();

    let mut redraws = 0;
    let (x, features, etape, stape) = loop {
        let mut x = Matrix::zeros(setup.batch, d);
        for v in x.data_mut() {
            *v = rng.uniform();
        }
        let (features, etape) = learner.forward(&x)?;
        let (_, stape) = scorer.forward(&features)?;
        if etape.relu_margin().min(stape.relu_margin()) >= KINK_MARGIN {
            break (x, features, etape, stape);
        }
        redraws += 1;
        if redraws == MAX_DRAWS {
            return Err(Error::GradCheck(format!(
                "no batch with all ReLU pre-activations at least {KINK_MARGIN:e} from zero in {MAX_DRAWS} draws"
            )));
        }
    };
    let (sgrads, feature_grad) = scorer.backward_bce(&stape, &labels)?;
    let egrads = learner.backward(&etape, &feature_grad)?;

    let mut enc_params: Vec<Matrix> = learner.params().into_iter().cloned().collect();
    let encoder = grad_check_params(&learner.param_names(), &mut enc_params, &egrads.0, setup.tol, |p| {
        let mut l = learner.clone();
        for (dst, src) in l.params_mut().into_iter().zip(p) {
            dst.clone_from(src);
        }
        let f = l.forward(&x).map(|r| r.0);
        f.and_then(|f| scorer.forward(&f))
            .and_then(|(s, _)| bce_loss(&s, &labels))
            .unwrap_or(f64::NAN)
    })?;

    let mut sc_params: Vec<Matrix> = scorer.params().into_iter().cloned().collect();
    let scorer_report = grad_check_params(&scorer.param_names(), &mut sc_params, &sgrads.0, setup.tol, |p| {
        let mut s = scorer.clone();
        for (dst, src) in s.params_mut().into_iter().zip(p) {
            dst.clone_from(src);
        }
        s.forward(&features)
            .and_then(|(s, _)| bce_loss(&s, &labels))
            .unwrap_or(f64::NAN)
    })?;

    Ok(ModelGradCheck {
        seed: setup.seed,
        redraws,
        encoder,
        scorer: scorer_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_seeds_pass_and_batches_avoid_kinks() {
        for seed in 0..5 {
            let r = model_grad_check(&GradCheckSetup {
                seed,
                ..GradCheckSetup::default()
            })
            .unwrap();
            assert!(r.passed(), "seed {seed}: {:e}", r.max_rel_error());
        }
    }

    #[test]
    fn batch_as_sequence_passes() {
        let r = model_grad_check(&GradCheckSetup {
            batch_as_sequence: true,
            seed: 11,
            ..GradCheckSetup::default()
        })
        .unwrap();
        assert!(r.passed(), "{:e}", r.max_rel_error());
    }
}
