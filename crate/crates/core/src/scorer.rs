//! Cloud-side anomaly scorer: an MLP with ReLU hidden layers and a sigmoid
//! output, trained with mean binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Gradients, Matrix, Parameterized, Rng};

/// Scores are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const SCORE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl ScorerConfig {
    /// `m → 64 → 32 → 1`.
    pub fn new(input_dim: usize) -> Self {
        ScorerConfig {
            input_dim,
            hidden: vec![64, 32],
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

#[derive(Clone, Debug)]
pub struct MlpScorer {
    config: ScorerConfig,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
    names: Vec<&'static str>,
    version: u64,
}

/// Scores for one uploaded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBatch {
    pub device: u16,
    pub round: u32,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ScorerTape {
    version: u64,
    /// Layer inputs: `inputs[0]` is the feature batch.
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Matrix>,
    scores: Vec<f64>,
}

impl ScorerTape {
    pub fn batch_size(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Smallest `|z|` over all hidden ReLU pre-activations.
    pub fn relu_margin(&self) -> f64 {
        self.pre
            .iter()
            .flat_map(|m| m.data())
            .fold(f64::INFINITY, |a, v| a.min(v.abs()))
    }
}

fn layer_name(i: usize, weight: bool) -> &'static str {
    const W: [&str; 8] = ["l0.w", "l1.w", "l2.w", "l3.w", "l4.w", "l5.w", "l6.w", "l7.w"];
    const B: [&str; 8] = ["l0.b", "l1.b", "l2.b", "l3.b", "l4.b", "l5.b", "l6.b", "l7.b"];
    if weight {
        W[i]
    } else {
        B[i]
    }
}

impl MlpScorer {
    pub fn new(config: ScorerConfig, rng: &mut Rng) -> Result<Self> {
        let widths = config.widths();
        if widths.contains(&0) {
            return Err(Error::Config("scorer layer widths must be positive".into()));
        }
        if widths.len() - 1 > 8 {
            return Err(Error::Config("scorer supports at most 7 hidden layers".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut names = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let bound = (1.0 / pair[0] as f64).sqrt();
            let mut w = Matrix::zeros(pair[0], pair[1]);
            for v in w.data_mut() {
                *v = rng.uniform_range(-bound, bound);
            }
            weights.push(w);
            biases.push(Matrix::zeros(1, pair[1]));
            names.push(layer_name(i, true));
            names.push(layer_name(i, false));
        }
        Ok(MlpScorer {
            config,
            weights,
            biases,
            names,
            version: 0,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        self.version += 1;
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Matrix {
        self.version += 1;
        &mut self.biases[layer]
    }

    /// `scores = sigmoid(MLP(features))`, with the tape for the backward pass.
    pub fn forward(&self, features: &Matrix) -> Result<(Vec<f64>, ScorerTape)> {
        if features.cols() != self.config.input_dim {
            return Err(Error::shape(
                "score_forward",
                features.shape(),
                (features.rows(), self.config.input_dim),
            ));
        }
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = features.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.matmul(w)?.add_row_broadcast(b)?;
            inputs.push(h);
            if i == last {
                h = z;
            } else {
                h = z.map(|v| v.max(0.0));
                pre.push(z);
            }
        }
        let scores: Vec<f64> = h.data().iter().map(|&z| sigmoid(z)).collect();
        Ok((
            scores.clone(),
            ScorerTape {
                version: self.version,
                inputs,
                pre,
                scores,
            },
        ))
    }

    /// Backward pass given `dL/dscore` per sample. Returns parameter
    /// gradients and `dL/dfeatures` (the gradient returned to the edge).
    pub fn backward(&self, tape: &ScorerTape, score_grad: &[f64]) -> Result<(Gradients, Matrix)> {
        if tape.version != self.version {
            return Err(Error::Tape(format!(
                "scorer tape recorded at version {} but scorer is at {}",
                tape.version, self.version
            )));
        }
        if score_grad.len() != tape.scores.len() {
            return Err(Error::Tape(format!(
                "score gradient has {} entries for a batch of {}",
                score_grad.len(),
                tape.scores.len()
            )));
        }
        let logit_grad: Vec<f64> = tape
            .scores
            .iter()
            .zip(score_grad)
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        self.backward_from_logits(tape, &logit_grad)
    }

    /// Backward pass of mean BCE against `labels` (the fused, single-party path).
    pub fn backward_bce(&self, tape: &ScorerTape, labels: &[u8]) -> Result<(Gradients, Matrix)> {
        let g = bce_score_grad(&tape.scores, labels)?;
        self.backward(tape, &g)
    }

    fn backward_from_logits(&self, tape: &ScorerTape, logit_grad: &[f64]) -> Result<(Gradients, Matrix)> {
        let layers = self.weights.len();
        let mut dw = vec![Matrix::zeros(0, 0); layers];
        let mut db = vec![Matrix::zeros(0, 0); layers];
        let mut dz = Matrix::column_vector(logit_grad);
        for i in (0..layers).rev() {
            dw[i] = tape.inputs[i].t_matmul(&dz)?;
            db[i] = dz.sum_rows();
            let mut dh = dz.matmul_t(&self.weights[i])?;
            if i > 0 {
                for (g, &z) in dh.data_mut().iter_mut().zip(tape.pre[i - 1].data()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            dz = dh;
        }
        let mut grads = Vec::with_capacity(2 * layers);
        for (w, b) in dw.into_iter().zip(db) {
            grads.push(w);
            grads.push(b);
        }
        Ok((Gradients(grads), dz))
    }
}

impl Parameterized for MlpScorer {
    fn param_names(&self) -> Vec<&'static str> {
        self.names.clone()
    }

    fn params(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.version += 1;
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// Scores a batch and tags it with its origin.
pub fn score_forward(
    features: &Matrix,
    scorer: &MlpScorer,
    device: u16,
    round: u32,
) -> Result<(ScoreBatch, ScorerTape)> {
    let (scores, tape) = scorer.forward(features)?;
    Ok((ScoreBatch { device, round, scores }, tape))
}

/// `1` where `score >= tau`, else `0`.
pub fn pseudo_label(scores: &[f64], tau: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= tau)).collect()
}

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("bce", (scores.len(), 1), (labels.len(), 1)));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy with scores clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores, labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let x = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
            if y == 1 {
                -x.ln()
            } else {
                -(1.0 - x).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// `d bce_loss / d score`; zero where the clamp is active.
pub fn bce_score_grad(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    check_labels(scores, labels)?;
    let n = scores.len() as f64;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            if !(SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&s) {
                return 0.0;
            }
            if y == 1 {
                -1.0 / (s * n)
            } else {
                1.0 / ((1.0 - s) * n)
            }
        })
        .collect())
}
