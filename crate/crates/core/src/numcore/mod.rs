//! Dense linear algebra and a small reverse-mode differentiation tape.

pub mod graph;
pub mod linalg;
pub mod matrix;
pub mod tape;

pub use graph::{Eager, Graph};
pub use linalg::{check_psd, min_eigenvalue, stabilize_covariance, symmetric_eigenvalues, PSD_TOLERANCE};
pub use matrix::{sigmoid, Matrix};
pub use tape::{Gradients, Tape, Var};

/// Activation applied after an affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn on_graph<G: Graph>(self, g: &mut G, v: &G::Value) -> G::Value {
        match self {
            Activation::Identity => v.clone(),
            Activation::Tanh => g.tanh(v),
            Activation::Sigmoid => g.sigmoid(v),
        }
    }
}
