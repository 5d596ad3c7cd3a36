//! Matrix-valued reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so every node's parents precede it
//! and a single reverse sweep visits each node once. Only nodes that depend on
//! a parameter leaf are tracked; constants and everything computed purely from
//! constants are skipped during the backward pass.

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    OneMinus(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Matrix {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input (model parameter).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a.0, b.0), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a.0, b.0), tracked))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Hadamard(a.0, b.0), tracked))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a.0, k), tracked)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 - v);
        let tracked = self.tracked(a);
        self.push(value, Op::OneMinus(a.0), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        let tracked = self.tracked(a);
        self.push(value, Op::Tanh(a.0), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        let tracked = self.tracked(a);
        self.push(value, Op::Sigmoid(a.0), tracked)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::Sum(a.0), tracked)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a].tracked {
                        let da = g.matmul_t(&self.nodes[b].value)?;
                        accumulate(&mut grads[a], da)?;
                    }
                    if self.nodes[b].tracked {
                        let db = self.nodes[a].value.t_matmul(&g)?;
                        accumulate(&mut grads[b], db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b].tracked {
                        accumulate(&mut grads[b], g.clone())?;
                    }
                    if self.nodes[a].tracked {
                        accumulate(&mut grads[a], g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[b].tracked {
                        accumulate(&mut grads[b], g.scale(-1.0))?;
                    }
                    if self.nodes[a].tracked {
                        accumulate(&mut grads[a], g)?;
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.nodes[a].tracked {
                        accumulate(&mut grads[a], g.hadamard(&self.nodes[b].value)?)?;
                    }
                    if self.nodes[b].tracked {
                        accumulate(&mut grads[b], g.hadamard(&self.nodes[a].value)?)?;
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads[a], g.scale(k))?,
                Op::OneMinus(a) => accumulate(&mut grads[a], g.scale(-1.0))?,
                Op::Tanh(a) => {
                    let local = node.value.map(|y| 1.0 - y * y);
                    accumulate(&mut grads[a], g.hadamard(&local)?)?;
                }
                Op::Sigmoid(a) => {
                    let local = node.value.map(|y| y * (1.0 - y));
                    accumulate(&mut grads[a], g.hadamard(&local)?)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[a].value.shape();
                    accumulate(&mut grads[a], Matrix::filled(r, c, g[(0, 0)]))?;
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|nd| nd.value.shape()).collect(),
        })
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) -> Result<()> {
    match slot {
        Some(existing) => existing.axpy(1.0, &delta),
        None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap());
        let x = tape.constant(Matrix::col(&[0.5, -1.0, 2.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let expected = Matrix::from_rows(&[&[0.5, -1.0, 2.0], &[0.5, -1.0, 2.0]]).unwrap();
        assert_eq!(grads.get(w), expected);
    }

    #[test]
    fn squared_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::filled(1, 1, 0.0));
        let s = tape.sigmoid(w);
        let sq = tape.hadamard(s, s).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert!((grads.get(w)[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::filled(1, 1, 2.0));
        let w = tape.param(Matrix::filled(1, 1, 3.0));
        let y = tape.hadamard(c, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(c)[(0, 0)], 0.0);
        assert_eq!(grads.get(w)[(0, 0)], 2.0);
    }
}
