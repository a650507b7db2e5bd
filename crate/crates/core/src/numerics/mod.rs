//! Dense linear algebra, activations, Adam, deterministic RNG streams and
//! finite-difference gradient checking.

mod adam;
pub mod gradcheck;
mod matrix;
pub mod ops;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, ParamCheck};
pub use matrix::{matmul, Matrix};
pub use ops::{layer_norm, relu, sigmoid, softmax_rows};
pub use rng::{Rng, Stream};

/// A model whose trainable state is an ordered list of named matrices.
///
/// The order is fixed per type and shared by gradients, optimiser state
/// and the checkpoint format.
pub trait Parameterized {
    fn param_names(&self) -> Vec<&'static str>;
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|m| m.shape()).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }
}

/// Gradients in the parameter order of the model that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

impl Gradients {
    pub fn scale(&self, k: f64) -> Gradients {
        Gradients(self.0.iter().map(|g| g.scale(k)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        if self.0.len() != other.0.len() {
            return f64::INFINITY;
        }
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max(a.max_abs_diff(b)))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Matrix::is_finite)
    }
}

/// Largest absolute parameter difference between two snapshots of a model.
pub fn max_param_diff<P: Parameterized>(a: &P, b: &P) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .fold(0.0, |m, (x, y)| m.max(x.max_abs_diff(y)))
}
