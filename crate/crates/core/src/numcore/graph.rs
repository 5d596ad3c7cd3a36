//! One forward-pass vocabulary for two evaluators: plain matrices ([`Eager`])
//! and the differentiation [`Tape`]. Model code written against [`Graph`]
//! runs unchanged for inference and for training.

use crate::error::Result;
use crate::numcore::matrix::Matrix;
use crate::numcore::tape::{Tape, Var};

pub trait Graph {
    type Value: Clone;

    fn constant(&mut self, value: Matrix) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Matrix;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn hadamard(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, k: f64) -> Self::Value;
    fn one_minus(&mut self, a: &Self::Value) -> Self::Value;
    fn tanh(&mut self, a: &Self::Value) -> Self::Value;
    fn sigmoid(&mut self, a: &Self::Value) -> Self::Value;

    /// `w * x + b`
    fn affine(&mut self, w: &Self::Value, x: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        let wx = self.matmul(w, x)?;
        self.add(&wx, b)
    }
}

/// Evaluates directly on [`Matrix`] values; nothing is recorded.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Value = Matrix;

    fn constant(&mut self, value: Matrix) -> Matrix {
        value
    }

    fn value<'a>(&'a self, v: &'a Matrix) -> &'a Matrix {
        v
    }

    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.matmul(b)
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.add(b)
    }

    fn sub(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.sub(b)
    }

    fn hadamard(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.hadamard(b)
    }

    fn scale(&mut self, a: &Matrix, k: f64) -> Matrix {
        a.scale(k)
    }

    fn one_minus(&mut self, a: &Matrix) -> Matrix {
        a.map(|v| 1.0 - v)
    }

    fn tanh(&mut self, a: &Matrix) -> Matrix {
        a.tanh()
    }

    fn sigmoid(&mut self, a: &Matrix) -> Matrix {
        a.sigmoid()
    }
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&mut self, value: Matrix) -> Var {
        Tape::constant(self, value)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Matrix {
        Tape::value(self, *v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::sub(self, *a, *b)
    }

    fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::hadamard(self, *a, *b)
    }

    fn scale(&mut self, a: &Var, k: f64) -> Var {
        Tape::scale(self, *a, k)
    }

    fn one_minus(&mut self, a: &Var) -> Var {
        Tape::one_minus(self, *a)
    }

    fn tanh(&mut self, a: &Var) -> Var {
        Tape::tanh(self, *a)
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        Tape::sigmoid(self, *a)
    }
}
