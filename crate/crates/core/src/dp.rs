//! Gaussian mechanism for uploaded features.
//!
//! Rows are first clipped to L2 norm `C`, which bounds the sensitivity of
//! the released batch at `Δf = C`; then every entry receives independent
//! `N(0, σ²)` noise with `σ = Δf·√(2 ln(1.25/δ))/ε`. Only a
//! [`ClippedFeatures`] value can be noised, so the order clip → noise is
//! fixed by the types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    /// Per-row L2 bound, used as the sensitivity Δf.
    pub clip_norm: f64,
    /// Recorded in run metadata only; no subsampling is performed.
    pub sampling_rate: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            enabled: false,
            epsilon: 10.0,
            delta: 1e-3,
            clip_norm: 1.0,
            sampling_rate: 0.01,
        }
    }
}

impl DpConfig {
    pub fn enabled(epsilon: f64, delta: f64) -> Self {
        DpConfig {
            enabled: true,
            epsilon,
            delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta must be in [0, 1), got {}", self.delta)));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sampling rate must be in (0, 1], got {}",
                self.sampling_rate
            )));
        }
        Ok(())
    }

    pub fn sigma(&self) -> Result<f64> {
        compute_sigma(self)
    }
}

/// `σ = C·√(2 ln(1.25/δ)) / ε`.
pub fn compute_sigma(cfg: &DpConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.delta == 0.0 {
        return Err(Error::Domain("the Gaussian mechanism needs delta > 0".into()));
    }
    Ok(cfg.clip_norm * (2.0 * (1.25 / cfg.delta).ln()).sqrt() / cfg.epsilon)
}

/// A feature batch whose rows all have L2 norm at most the clip bound.
#[derive(Clone, Debug)]
pub struct ClippedFeatures {
    features: Matrix,
    /// Original row norms, kept for the backward pass.
    norms: Vec<f64>,
    clip_norm: f64,
}

impl ClippedFeatures {
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn clip_norm(&self) -> f64 {
        self.clip_norm
    }

    /// Maps `dL/d(clipped)` to `dL/d(original)`.
    ///
    /// Unclipped rows pass through; a clipped row `y = C·x/‖x‖` has
    /// Jacobian `(C/‖x‖)(I − x̂x̂ᵀ)`.
    pub fn backward(&self, grad: &Matrix) -> Result<Matrix> {
        if grad.shape() != self.features.shape() {
            return Err(Error::shape("clip backward", self.features.shape(), grad.shape()));
        }
        let mut out = grad.clone();
        for (r, &norm) in self.norms.iter().enumerate() {
            if norm <= self.clip_norm {
                continue;
            }
            // clipped row = C · x̂, so x̂ = y / C
            let unit: Vec<f64> = self.features.row(r).iter().map(|v| v / self.clip_norm).collect();
            let g = grad.row(r);
            let dot: f64 = g.iter().zip(&unit).map(|(a, b)| a * b).sum();
            let k = self.clip_norm / norm;
            for ((o, &gv), &u) in out.row_mut(r).iter_mut().zip(g).zip(&unit) {
                *o = k * (gv - dot * u);
            }
        }
        Ok(out)
    }
}

/// Scales each row `r` by `min(1, C/‖r‖₂)`.
pub fn clip_rows(features: &Matrix, clip_norm: f64) -> ClippedFeatures {
    let mut out = features.clone();
    let mut norms = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        let norm = features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        if norm > clip_norm {
            let k = clip_norm / norm;
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
    }
    ClippedFeatures {
        features: out,
        norms,
        clip_norm,
    }
}

/// Adds `N(0, σ²)` to every entry, `σ = compute_sigma(cfg)`. Identity when
/// `cfg.enabled` is false.
pub fn add_gaussian_noise(clipped: &ClippedFeatures, cfg: &DpConfig, rng: &mut Rng) -> Result<Matrix> {
    if !cfg.enabled {
        return Ok(clipped.features.clone());
    }
    let sigma = compute_sigma(cfg)?;
    Ok(add_noise_with_sigma(&clipped.features, sigma, rng))
}

/// Noise injection with an explicit σ; σ = 0 is the identity.
pub fn add_noise_with_sigma(features: &Matrix, sigma: f64, rng: &mut Rng) -> Matrix {
    let mut out = features.clone();
    if sigma == 0.0 {
        return out;
    }
    for v in out.data_mut() {
        *v += sigma * rng.standard_normal();
    }
    out
}
