//! GRU cell forward pass and its analytic Jacobians with respect to the
//! previous hidden state and the input.
//!
//! ```text
//! z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//! r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! h' = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h+ = z * h + (1 - z) * h'
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Matrix};

/// The twelve GRU arrays. Generic so the same layout can hold plain matrices
/// or tape handles during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruWeights<T> {
    pub w_iz: T,
    pub w_ir: T,
    pub w_in: T,
    pub w_hz: T,
    pub w_hr: T,
    pub w_hn: T,
    pub b_iz: T,
    pub b_ir: T,
    pub b_in: T,
    pub b_hz: T,
    pub b_hr: T,
    pub b_hn: T,
}

pub type GruParams = GruWeights<Matrix>;

impl<T> GruWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GruWeights<U> {
        GruWeights {
            w_iz: f(&self.w_iz),
            w_ir: f(&self.w_ir),
            w_in: f(&self.w_in),
            w_hz: f(&self.w_hz),
            w_hr: f(&self.w_hr),
            w_hn: f(&self.w_hn),
            b_iz: f(&self.b_iz),
            b_ir: f(&self.b_ir),
            b_in: f(&self.b_in),
            b_hz: f(&self.b_hz),
            b_hr: f(&self.b_hr),
            b_hn: f(&self.b_hn),
        }
    }

    /// Fixed parameter order used for flattening.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [
            &self.w_iz, &self.w_ir, &self.w_in, &self.w_hz, &self.w_hr, &self.w_hn, &self.b_iz,
            &self.b_ir, &self.b_in, &self.b_hz, &self.b_hr, &self.b_hn,
        ]
        .into_iter()
    }

    pub fn from_iter(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(GruWeights {
            w_iz: it.next()?,
            w_ir: it.next()?,
            w_in: it.next()?,
            w_hz: it.next()?,
            w_hr: it.next()?,
            w_hn: it.next()?,
            b_iz: it.next()?,
            b_ir: it.next()?,
            b_in: it.next()?,
            b_hz: it.next()?,
            b_hr: it.next()?,
            b_hn: it.next()?,
        })
    }
}

impl GruParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w_i = Matrix::zeros(hidden, input);
        let w_h = Matrix::zeros(hidden, hidden);
        let b = Matrix::zeros(hidden, 1);
        GruWeights {
            w_iz: w_i.clone(),
            w_ir: w_i.clone(),
            w_in: w_i,
            w_hz: w_h.clone(),
            w_hr: w_h.clone(),
            w_hn: w_h,
            b_iz: b.clone(),
            b_ir: b.clone(),
            b_in: b.clone(),
            b_hz: b.clone(),
            b_hr: b.clone(),
            b_hn: b,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation; input-side arrays use the
    /// input width, hidden-side arrays the hidden width.
    pub fn random<R: Rng + ?Sized>(hidden: usize, input: usize, rng: &mut R) -> Self {
        let bound_i = 1.0 / (input.max(1) as f64).sqrt();
        let bound_h = 1.0 / (hidden.max(1) as f64).sqrt();
        let mut uniform = |r: usize, c: usize, bound: f64| {
            let data = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix::from_vec(r, c, data).expect("finite uniform draws")
        };
        GruWeights {
            w_iz: uniform(hidden, input, bound_i),
            w_ir: uniform(hidden, input, bound_i),
            w_in: uniform(hidden, input, bound_i),
            w_hz: uniform(hidden, hidden, bound_h),
            w_hr: uniform(hidden, hidden, bound_h),
            w_hn: uniform(hidden, hidden, bound_h),
            b_iz: uniform(hidden, 1, bound_i),
            b_ir: uniform(hidden, 1, bound_i),
            b_in: uniform(hidden, 1, bound_i),
            b_hz: uniform(hidden, 1, bound_h),
            b_hr: uniform(hidden, 1, bound_h),
            b_hn: uniform(hidden, 1, bound_h),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hz.rows()
    }

    pub fn input_size(&self) -> usize {
        self.w_iz.cols()
    }

    /// Checks that all twelve arrays agree on `(hidden, input)` and are finite.
    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.hidden_size(), self.input_size());
        let expect = [
            (m, d), (m, d), (m, d), (m, m), (m, m), (m, m), (m, 1), (m, 1), (m, 1), (m, 1), (m, 1), (m, 1),
        ];
        for (arr, shape) in self.iter().zip(expect) {
            if arr.shape() != shape {
                return Err(Error::shape("GruParams", shape, arr.shape()));
            }
            if !arr.is_finite() {
                return Err(Error::NonFinite("GruParams"));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, h_prev: &[f64], x: &[f64]) -> Result<()> {
        if h_prev.len() != self.hidden_size() {
            return Err(Error::shape("gru h_prev", (self.hidden_size(), 1), (h_prev.len(), 1)));
        }
        if x.len() != self.input_size() {
            return Err(Error::shape("gru x", (self.input_size(), 1), (x.len(), 1)));
        }
        Ok(())
    }
}

/// Gate activations of one GRU step, retained for the Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct GruStep {
    pub h_new: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_candidate: Vec<f64>,
    /// `W_hn h_prev + b_hn`, the pre-reset hidden contribution to the candidate.
    pub hidden_candidate_term: Vec<f64>,
}

/// GRU step written once against [`Graph`]; used by the trainer on the tape.
pub fn gru_cell<G: Graph>(
    g: &mut G,
    w: &GruWeights<G::Value>,
    h_prev: &G::Value,
    x: &G::Value,
) -> Result<G::Value> {
    let zi = g.affine(&w.w_iz, x, &w.b_iz)?;
    let zh = g.affine(&w.w_hz, h_prev, &w.b_hz)?;
    let z_pre = g.add(&zi, &zh)?;
    let z = g.sigmoid(&z_pre);

    let ri = g.affine(&w.w_ir, x, &w.b_ir)?;
    let rh = g.affine(&w.w_hr, h_prev, &w.b_hr)?;
    let r_pre = g.add(&ri, &rh)?;
    let r = g.sigmoid(&r_pre);

    let ni = g.affine(&w.w_in, x, &w.b_in)?;
    let nh = g.affine(&w.w_hn, h_prev, &w.b_hn)?;
    let gated = g.hadamard(&r, &nh)?;
    let n_pre = g.add(&ni, &gated)?;
    let n = g.tanh(&n_pre);

    let keep = g.hadamard(&z, h_prev)?;
    let one_minus_z = g.one_minus(&z);
    let write = g.hadamard(&one_minus_z, &n)?;
    g.add(&keep, &write)
}

fn affine_vec(w: &Matrix, x: &[f64], b: &Matrix) -> Result<Vec<f64>> {
    let mut out = w.mul_vec(x)?;
    out.iter_mut().zip(b.as_slice()).for_each(|(o, bi)| *o += bi);
    Ok(out)
}

pub fn gru_forward(params: &GruParams, h_prev: &[f64], x: &[f64]) -> Result<GruStep> {
    params.check_inputs(h_prev, x)?;
    let zi = affine_vec(&params.w_iz, x, &params.b_iz)?;
    let zh = affine_vec(&params.w_hz, h_prev, &params.b_hz)?;
    let ri = affine_vec(&params.w_ir, x, &params.b_ir)?;
    let rh = affine_vec(&params.w_hr, h_prev, &params.b_hr)?;
    let ni = affine_vec(&params.w_in, x, &params.b_in)?;
    let nh = affine_vec(&params.w_hn, h_prev, &params.b_hn)?;

    let m = h_prev.len();
    let mut step = GruStep {
        h_new: Vec::with_capacity(m),
        z: Vec::with_capacity(m),
        r: Vec::with_capacity(m),
        h_candidate: Vec::with_capacity(m),
        hidden_candidate_term: nh,
    };
    for k in 0..m {
        let z = crate::numcore::sigmoid(zi[k] + zh[k]);
        let r = crate::numcore::sigmoid(ri[k] + rh[k]);
        let n = (ni[k] + r * step.hidden_candidate_term[k]).tanh();
        step.h_new.push(z * h_prev[k] + (1.0 - z) * n);
        step.z.push(z);
        step.r.push(r);
        step.h_candidate.push(n);
    }
    Ok(step)
}

/// `∂h+/∂h_prev` (m x m) at `(h_prev, x)`.
pub fn jacobian_h(params: &GruParams, h_prev: &[f64], x: &[f64]) -> Result<Matrix> {
    let step = gru_forward(params, h_prev, x)?;
    jacobian_h_from_step(params, h_prev, &step)
}

/// `∂h+/∂x` (m x d) at `(h_prev, x)`.
pub fn jacobian_x(params: &GruParams, h_prev: &[f64], x: &[f64]) -> Result<Matrix> {
    let step = gru_forward(params, h_prev, x)?;
    jacobian_x_from_step(params, h_prev, &step)
}

fn gate_slopes(gate: &[f64]) -> Vec<f64> {
    gate.iter().map(|g| g * (1.0 - g)).collect()
}

pub(crate) fn jacobian_h_from_step(params: &GruParams, h_prev: &[f64], step: &GruStep) -> Result<Matrix> {
    let m = h_prev.len();
    let dz = params.w_hz.scale_rows(&gate_slopes(&step.z))?;
    let dr = params.w_hr.scale_rows(&gate_slopes(&step.r))?;
    // ∂h'/∂h = diag(1 - h'^2) (diag(W_hn h + b_hn) ∂r/∂h + diag(r) W_hn)
    let inner = dr
        .scale_rows(&step.hidden_candidate_term)?
        .add(&params.w_hn.scale_rows(&step.r)?)?;
    let tanh_slope: Vec<f64> = step.h_candidate.iter().map(|n| 1.0 - n * n).collect();
    let dn = inner.scale_rows(&tanh_slope)?;

    // diag(h - h') ∂z/∂h + diag(z) + diag(1 - z) ∂h'/∂h
    let h_minus_n: Vec<f64> = h_prev.iter().zip(&step.h_candidate).map(|(h, n)| h - n).collect();
    let one_minus_z: Vec<f64> = step.z.iter().map(|z| 1.0 - z).collect();
    let mut jac = dz.scale_rows(&h_minus_n)?.add(&dn.scale_rows(&one_minus_z)?)?;
    for k in 0..m {
        jac[(k, k)] += step.z[k];
    }
    Ok(jac)
}

pub(crate) fn jacobian_x_from_step(params: &GruParams, h_prev: &[f64], step: &GruStep) -> Result<Matrix> {
    let dz = params.w_iz.scale_rows(&gate_slopes(&step.z))?;
    let dr = params.w_ir.scale_rows(&gate_slopes(&step.r))?;
    let inner = params.w_in.add(&dr.scale_rows(&step.hidden_candidate_term)?)?;
    let tanh_slope: Vec<f64> = step.h_candidate.iter().map(|n| 1.0 - n * n).collect();
    let dn = inner.scale_rows(&tanh_slope)?;

    let h_minus_n: Vec<f64> = h_prev.iter().zip(&step.h_candidate).map(|(h, n)| h - n).collect();
    let one_minus_z: Vec<f64> = step.z.iter().map(|z| 1.0 - z).collect();
    dz.scale_rows(&h_minus_n)?.add(&dn.scale_rows(&one_minus_z)?)
}
