//! Edge-side feature learner: one Transformer block followed by a
//! fully-connected compression layer, with an explicit reverse pass.
//!
//! Forward, per batch `X` (`b x d`):
//!
//! ```text
//! X0 = X + PE
//! A  = MultiHead(X0)                 heads concatenated, then · W_o
//! H1 = LayerNorm1(X0 + A)
//! H2 = LayerNorm2(H1 + ReLU(H1 W1 + b1) W2 + b2)
//! F  = H2 Wc + bc                    b x m features
//! ```
//!
//! By default every sample is its own length-1 sequence at position 0, so
//! each attention weight is exactly 1 and samples never interact. With
//! `batch_as_sequence` the rows of a batch form one sequence at positions
//! `0..b` and attend to each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{layer_norm_backward, layer_norm_forward, softmax_in_place, LayerNormCache};
use crate::numerics::{Gradients, Matrix, Parameterized, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Raw feature dimension `d` (also the model dimension).
    pub input_dim: usize,
    pub heads: usize,
    /// Uploaded feature dimension `m`.
    pub feature_dim: usize,
    pub ff_dim: usize,
    pub layer_norm_eps: f64,
    pub batch_as_sequence: bool,
}

impl EncoderConfig {
    /// Defaults: feed-forward width `2d`, layer-norm eps `1e-5`, one token per sample.
    pub fn new(input_dim: usize, heads: usize, feature_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            heads,
            feature_dim,
            ff_dim: 2 * input_dim,
            layer_norm_eps: 1e-5,
            batch_as_sequence: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.input_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim;
        if d == 0 || self.heads == 0 || self.ff_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide input dimension {d}",
                self.heads
            )));
        }
        if self.feature_dim > d {
            return Err(Error::Config(format!(
                "feature dimension {} exceeds input dimension {d}",
                self.feature_dim
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer-norm eps must be positive".into()));
        }
        Ok(())
    }
}

/// `m = ⌈ratio · d⌉`, at least 1.
pub fn feature_dim_for_ratio(input_dim: usize, ratio: f64) -> usize {
    ((ratio * input_dim as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Sinusoidal position table, `seq_len x dim`:
/// `PE(p, 2i) = sin(p·ω)`, `PE(p, 2i+1) = cos(p·ω)` with `ω = 10000^(-2i/dim)`.
pub fn positional_encoding(seq_len: usize, dim: usize) -> Matrix {
    let mut pe = Matrix::zeros(seq_len, dim);
    for p in 0..seq_len {
        for j in 0..dim {
            let two_i = (j - j % 2) as f64;
            let omega = 1.0 / 10000f64.powf(two_i / dim as f64);
            let angle = p as f64 * omega;
            pe[(p, j)] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Clone, Debug)]
pub struct FeatureLearner {
    config: EncoderConfig,
    /// Query projection; column block `h` is head `h`'s `d x d_h` matrix.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ff_w1: Matrix,
    pub ff_b1: Matrix,
    pub ff_w2: Matrix,
    pub ff_b2: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub comp_w: Matrix,
    pub comp_b: Matrix,
    version: u64,
}

const PARAM_NAMES: [&str; 14] = [
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "ln1.gain",
    "ln1.bias",
    "ff.w1",
    "ff.b1",
    "ff.w2",
    "ff.b2",
    "ln2.gain",
    "ln2.bias",
    "compress.w",
    "compress.b",
];

fn uniform_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (1.0 / rows as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.uniform_range(-bound, bound);
    }
    m
}

impl FeatureLearner {
    /// Weights `U(-√(1/fan_in), √(1/fan_in))`, zero biases, unit layer-norm gains.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let f = config.ff_dim;
        let m = config.feature_dim;
        Ok(FeatureLearner {
            w_q: uniform_init(d, d, rng),
            w_k: uniform_init(d, d, rng),
            w_v: uniform_init(d, d, rng),
            w_o: uniform_init(d, d, rng),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ff_w1: uniform_init(d, f, rng),
            ff_b1: Matrix::zeros(1, f),
            ff_w2: uniform_init(f, d, rng),
            ff_b2: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            comp_w: uniform_init(d, m, rng),
            comp_b: Matrix::zeros(1, m),
            config,
            version: 0,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Incremented by every mutable parameter access; tapes remember it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, EncoderTape)> {
        encoder_forward(batch, self)
    }

    pub fn backward(&self, tape: &EncoderTape, feature_grad: &Matrix) -> Result<Gradients> {
        encoder_backward(tape, feature_grad, self)
    }

    /// Row ranges that form one attention sequence each.
    fn groups(&self, rows: usize) -> Vec<(usize, usize)> {
        if self.config.batch_as_sequence {
            vec![(0, rows)]
        } else {
            (0..rows).map(|r| (r, r + 1)).collect()
        }
    }
}

impl Parameterized for FeatureLearner {
    fn param_names(&self) -> Vec<&'static str> {
        PARAM_NAMES.to_vec()
    }

    fn params(&self) -> Vec<&Matrix> {
        vec![
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.comp_w,
            &self.comp_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.version += 1;
        vec![
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.comp_w,
            &mut self.comp_b,
        ]
    }
}

/// Intermediates of one attention call.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    groups: Vec<(usize, usize)>,
    /// Softmax weights, one `len x len` matrix per (group, head), group-major.
    weights: Vec<Matrix>,
    concat: Matrix,
}

impl AttentionCache {
    /// Attention weights of group `g`, head `h`.
    pub fn weights(&self, group: usize, head: usize, heads: usize) -> &Matrix {
        &self.weights[group * heads + head]
    }

    pub fn all_weights(&self) -> &[Matrix] {
        &self.weights
    }
}

/// Forward intermediates needed by [`encoder_backward`].
#[derive(Clone, Debug)]
pub struct EncoderTape {
    version: u64,
    batch: usize,
    attention: AttentionCache,
    ln1: LayerNormCache,
    h1: Matrix,
    f1: Matrix,
    a1: Matrix,
    ln2: LayerNormCache,
    h2: Matrix,
}

impl EncoderTape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn attention(&self) -> &AttentionCache {
        &self.attention
    }

    /// Smallest `|z|` over the feed-forward ReLU pre-activations.
    pub fn relu_margin(&self) -> f64 {
        self.f1.data().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
    }
}

/// Scaled dot-product attention per head over each row group, heads
/// concatenated and projected by `W_o`.
pub fn multi_head_attention(x: &Matrix, learner: &FeatureLearner) -> Result<(Matrix, AttentionCache)> {
    let cfg = &learner.config;
    let d = cfg.input_dim;
    if x.cols() != d {
        return Err(Error::shape("multi_head_attention", x.shape(), (x.rows(), d)));
    }
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.matmul(&learner.w_q)?;
    let k = x.matmul(&learner.w_k)?;
    let v = x.matmul(&learner.w_v)?;
    let groups = learner.groups(x.rows());
    let mut concat = Matrix::zeros(x.rows(), d);
    let mut weights = Vec::with_capacity(groups.len() * heads);
    for &(s, e) in &groups {
        let len = e - s;
        for h in 0..heads {
            let c0 = h * dh;
            let mut w = Matrix::zeros(len, len);
            for i in 0..len {
                let qi = &q.row(s + i)[c0..c0 + dh];
                let wrow = w.row_mut(i);
                for (j, wv) in wrow.iter_mut().enumerate() {
                    let kj = &k.row(s + j)[c0..c0 + dh];
                    *wv = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(wrow);
            }
            for i in 0..len {
                let out = &mut concat.row_mut(s + i)[c0..c0 + dh];
                for j in 0..len {
                    let a = w[(i, j)];
                    let vj = &v.row(s + j)[c0..c0 + dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
            weights.push(w);
        }
    }
    let out = concat.matmul(&learner.w_o)?;
    Ok((
        out,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            groups,
            weights,
            concat,
        },
    ))
}

fn positional_rows(learner: &FeatureLearner, rows: usize) -> Matrix {
    let d = learner.config.input_dim;
    if learner.config.batch_as_sequence {
        positional_encoding(rows, d)
    } else {
        let p0 = positional_encoding(1, d);
        let mut pe = Matrix::zeros(rows, d);
        for r in 0..rows {
            pe.row_mut(r).copy_from_slice(p0.row(0));
        }
        pe
    }
}

pub fn encoder_forward(batch: &Matrix, learner: &FeatureLearner) -> Result<(Matrix, EncoderTape)> {
    let cfg = &learner.config;
    if batch.cols() != cfg.input_dim {
        return Err(Error::shape(
            "encoder_forward",
            batch.shape(),
            (batch.rows(), cfg.input_dim),
        ));
    }
    if !batch.is_finite() {
        return Err(Error::Input("encoder input contains non-finite values".into()));
    }
    let x0 = batch.add(&positional_rows(learner, batch.rows()))?;
    let (attn_out, attention) = multi_head_attention(&x0, learner)?;
    let r1 = x0.add(&attn_out)?;
    let (h1, ln1) = layer_norm_forward(&r1, &learner.ln1_gain, &learner.ln1_bias, cfg.layer_norm_eps)?;
    let f1 = h1.matmul(&learner.ff_w1)?.add_row_broadcast(&learner.ff_b1)?;
    let a1 = f1.map(|v| v.max(0.0));
    let f2 = a1.matmul(&learner.ff_w2)?.add_row_broadcast(&learner.ff_b2)?;
    let r2 = h1.add(&f2)?;
    let (h2, ln2) = layer_norm_forward(&r2, &learner.ln2_gain, &learner.ln2_bias, cfg.layer_norm_eps)?;
    let features = h2.matmul(&learner.comp_w)?.add_row_broadcast(&learner.comp_b)?;
    Ok((
        features,
        EncoderTape {
            version: learner.version,
            batch: batch.rows(),
            attention,
            ln1,
            h1,
            f1,
            a1,
            ln2,
            h2,
        },
    ))
}

/// Reverse pass of [`encoder_forward`]: gradients for every parameter, in
/// [`Parameterized`] order, given `dL/dfeatures`.
pub fn encoder_backward(tape: &EncoderTape, feature_grad: &Matrix, learner: &FeatureLearner) -> Result<Gradients> {
    let cfg = &learner.config;
    if tape.version != learner.version {
        return Err(Error::Tape(format!(
            "tape recorded at parameter version {} but learner is at {}",
            tape.version, learner.version
        )));
    }
    if feature_grad.shape() != (tape.batch, cfg.feature_dim) {
        return Err(Error::Tape(format!(
            "feature gradient {:?} does not match taped batch {:?}",
            feature_grad.shape(),
            (tape.batch, cfg.feature_dim)
        )));
    }

    // Compression layer.
    let d_comp_w = tape.h2.t_matmul(feature_grad)?;
    let d_comp_b = feature_grad.sum_rows();
    let d_h2 = feature_grad.matmul_t(&learner.comp_w)?;

    // Second residual + layer norm.
    let (d_r2, d_ln2_gain, d_ln2_bias) = layer_norm_backward(&tape.ln2, &learner.ln2_gain, &d_h2)?;
    let d_ff_w2 = tape.a1.t_matmul(&d_r2)?;
    let d_ff_b2 = d_r2.sum_rows();
    let d_a1 = d_r2.matmul_t(&learner.ff_w2)?;
    let mut d_f1 = d_a1;
    for (g, &pre) in d_f1.data_mut().iter_mut().zip(tape.f1.data()) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    let d_ff_w1 = tape.h1.t_matmul(&d_f1)?;
    let d_ff_b1 = d_f1.sum_rows();
    let mut d_h1 = d_f1.matmul_t(&learner.ff_w1)?;
    d_h1.add_assign(&d_r2)?;

    // First residual + layer norm; the residual branch into X0 carries no
    // parameters, so only the attention branch is followed.
    let (d_r1, d_ln1_gain, d_ln1_bias) = layer_norm_backward(&tape.ln1, &learner.ln1_gain, &d_h1)?;
    let att = &tape.attention;
    let d_w_o = att.concat.t_matmul(&d_r1)?;
    let d_concat = d_r1.matmul_t(&learner.w_o)?;

    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = tape.batch;
    let d = cfg.input_dim;
    let mut d_q = Matrix::zeros(rows, d);
    let mut d_k = Matrix::zeros(rows, d);
    let mut d_v = Matrix::zeros(rows, d);
    for (gi, &(s, e)) in att.groups.iter().enumerate() {
        let len = e - s;
        for h in 0..heads {
            let c0 = h * dh;
            let w = &att.weights[gi * heads + h];
            // dW[i][j] = dO_i · V_j ; dV_j += Σ_i W[i][j] dO_i
            let mut d_w = Matrix::zeros(len, len);
            for i in 0..len {
                let d_oi = &d_concat.row(s + i)[c0..c0 + dh];
                for j in 0..len {
                    let vj = &att.v.row(s + j)[c0..c0 + dh];
                    d_w[(i, j)] = d_oi.iter().zip(vj).map(|(a, b)| a * b).sum();
                }
            }
            for j in 0..len {
                for i in 0..len {
                    let a = w[(i, j)];
                    let d_oi = d_concat.row(s + i)[c0..c0 + dh].to_vec();
                    let dvj = &mut d_v.row_mut(s + j)[c0..c0 + dh];
                    for (o, g) in dvj.iter_mut().zip(d_oi) {
                        *o += a * g;
                    }
                }
            }
            // Softmax backward, then the 1/√d_h scaling.
            for i in 0..len {
                let dot: f64 = (0..len).map(|j| w[(i, j)] * d_w[(i, j)]).sum();
                for j in 0..len {
                    let ds = w[(i, j)] * (d_w[(i, j)] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = att.k.row(s + j)[c0..c0 + dh].to_vec();
                    let qi = att.q.row(s + i)[c0..c0 + dh].to_vec();
                    for (o, kv) in d_q.row_mut(s + i)[c0..c0 + dh].iter_mut().zip(&kj) {
                        *o += ds * kv;
                    }
                    for (o, qv) in d_k.row_mut(s + j)[c0..c0 + dh].iter_mut().zip(&qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    let d_w_q = att.x.t_matmul(&d_q)?;
    let d_w_k = att.x.t_matmul(&d_k)?;
    let d_w_v = att.x.t_matmul(&d_v)?;

    Ok(Gradients(vec![
        d_w_q, d_w_k, d_w_v, d_w_o, d_ln1_gain, d_ln1_bias, d_ff_w1, d_ff_b1, d_ff_w2, d_ff_b2, d_ln2_gain, d_ln2_bias,
        d_comp_w, d_comp_b,
    ]))
}
