//! First-order propagation of Gaussian moments through a recurrent update
//! and through the output head.
//!
//! With `h ~ N(m, P)` and noisy input `x + w`, `w ~ N(0, Σ)` independent of
//! `h`, the linearized update is
//!
//! ```text
//! m+ = v(m, x)
//! P+ = J_h P J_h^T + J_x Σ J_x^T
//! ```
//!
//! with both Jacobians evaluated at `(m, x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{self, GruParams};
use crate::numcore::{check_psd, stabilize_covariance, Graph, Matrix};

/// Mean and covariance of the hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl GaussianState {
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::shape("GaussianState", (mean.len(), mean.len()), cov.shape()));
        }
        Ok(GaussianState { mean, cov })
    }

    pub fn zeros(dim: usize) -> Self {
        GaussianState {
            mean: vec![0.0; dim],
            cov: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("state mean has non-finite entries".into()));
        }
        check_psd(&self.cov, "state covariance")
    }
}

/// Covariance of the additive Gaussian input noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationNoise {
    pub sigma: Matrix,
}

impl ObservationNoise {
    pub fn new(sigma: Matrix) -> Result<Self> {
        check_psd(&sigma, "observation noise")?;
        Ok(ObservationNoise { sigma })
    }

    /// Independent noise with the given per-component standard deviations.
    pub fn from_std(std: &[f64]) -> Self {
        ObservationNoise {
            sigma: Matrix::diag(&std.iter().map(|s| s * s).collect::<Vec<_>>()),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        ObservationNoise {
            sigma: Matrix::zeros(dim, dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputEstimate {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

/// A recurrent update `h+ = v(h, x)` with Jacobians at an operating point.
pub trait RecurrentCell {
    fn hidden_size(&self) -> usize;
    fn input_size(&self) -> usize;

    /// Returns `(v(h, x), ∂v/∂h, ∂v/∂x)`.
    fn step_with_jacobians(&self, h: &[f64], x: &[f64]) -> Result<(Vec<f64>, Matrix, Matrix)>;
}

impl RecurrentCell for GruParams {
    fn hidden_size(&self) -> usize {
        GruParams::hidden_size(self)
    }

    fn input_size(&self) -> usize {
        GruParams::input_size(self)
    }

    fn step_with_jacobians(&self, h: &[f64], x: &[f64]) -> Result<(Vec<f64>, Matrix, Matrix)> {
        let step = gru::gru_forward(self, h, x)?;
        let jh = gru::jacobian_h_from_step(self, h, &step)?;
        let jx = gru::jacobian_x_from_step(self, h, &step)?;
        Ok((step.h_new, jh, jx))
    }
}

/// Moment update at an observed time instant.
pub fn cvrnn_update<C: RecurrentCell + ?Sized>(
    cell: &C,
    state: &GaussianState,
    x: &[f64],
    noise: &ObservationNoise,
) -> Result<GaussianState> {
    let (m, d) = (cell.hidden_size(), cell.input_size());
    if state.dim() != m {
        return Err(Error::shape("cvrnn_update state", (m, m), state.cov.shape()));
    }
    if noise.sigma.shape() != (d, d) {
        return Err(Error::shape("cvrnn_update noise", (d, d), noise.sigma.shape()));
    }
    check_psd(&state.cov, "input state covariance")?;
    check_psd(&noise.sigma, "observation noise")?;

    let (mean, jh, jx) = cell.step_with_jacobians(&state.mean, x)?;
    let cov = jh.congruence(&state.cov)?.add(&jx.congruence(&noise.sigma)?)?;
    Ok(GaussianState {
        mean,
        cov: stabilize_covariance(&cov)?,
    })
}

/// One-layer affine output map `o = W h + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl AffineHead {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (weight.rows(), 1) {
            return Err(Error::shape("AffineHead bias", (weight.rows(), 1), bias.shape()));
        }
        Ok(AffineHead { weight, bias })
    }

    pub fn zeros(output: usize, input: usize) -> Self {
        AffineHead {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(output, 1),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weight.mul_vec(h)?;
        out.iter_mut().zip(self.bias.as_slice()).for_each(|(o, b)| *o += b);
        Ok(out)
    }

    pub fn on_graph<G: Graph>(g: &mut G, weight: &G::Value, bias: &G::Value, h: &G::Value) -> Result<G::Value> {
        g.affine(weight, h, bias)
    }
}

/// Output mean and covariance; exact for the affine head.
pub fn output_transform(head: &AffineHead, state: &GaussianState) -> Result<OutputEstimate> {
    if head.input_size() != state.dim() {
        return Err(Error::shape("output_transform", head.weight.shape(), state.cov.shape()));
    }
    let mean = head.forward(&state.mean)?;
    let cov = stabilize_covariance(&head.weight.congruence(&state.cov)?)?;
    Ok(OutputEstimate { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::min_eigenvalue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `v(h, x) = A h + B x`; the linearization is exact.
    struct AffineCell {
        a: Matrix,
        b: Matrix,
    }

    impl RecurrentCell for AffineCell {
        fn hidden_size(&self) -> usize {
            self.a.rows()
        }
        fn input_size(&self) -> usize {
            self.b.cols()
        }
        fn step_with_jacobians(&self, h: &[f64], x: &[f64]) -> Result<(Vec<f64>, Matrix, Matrix)> {
            let out: Vec<f64> = self
                .a
                .mul_vec(h)?
                .iter()
                .zip(self.b.mul_vec(x)?)
                .map(|(p, q)| p + q)
                .collect();
            Ok((out, self.a.clone(), self.b.clone()))
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let l = random_matrix(rng, n, n);
        l.matmul_t(&l).unwrap().symmetrize()
    }

    #[test]
    fn zero_weights_shrink_covariance() {
        let p = GruParams::zeros(2, 1);
        let state = GaussianState::new(vec![1.0, 0.0], Matrix::identity(2)).unwrap();
        let noise = ObservationNoise::new(Matrix::identity(1)).unwrap();
        let next = cvrnn_update(&p, &state, &[0.7], &noise).unwrap();
        assert_eq!(next.mean, vec![0.5, 0.0]);
        assert_eq!(next.cov, Matrix::identity(2).scale(0.25));
    }

    #[test]
    fn certain_input_stays_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GruParams::random(3, 2, &mut rng);
        let next = cvrnn_update(&p, &GaussianState::zeros(3), &[0.2, 0.1], &ObservationNoise::zeros(2)).unwrap();
        assert_eq!(next.cov, Matrix::zeros(3, 3));
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let p = GruParams::zeros(2, 1);
        let bad = GaussianState::new(vec![0.0; 2], Matrix::diag(&[1.0, -1.0])).unwrap();
        let res = cvrnn_update(&p, &bad, &[0.0], &ObservationNoise::zeros(1));
        assert!(matches!(res, Err(Error::Validation(_))));
    }

    #[test]
    fn affine_cell_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cell = AffineCell {
                a: random_matrix(&mut rng, 3, 3),
                b: random_matrix(&mut rng, 3, 2),
            };
            let state = GaussianState::new(vec![0.1, 0.2, 0.3], random_psd(&mut rng, 3)).unwrap();
            let sigma = random_psd(&mut rng, 2);
            let next = cvrnn_update(&cell, &state, &[1.0, -1.0], &ObservationNoise::new(sigma.clone()).unwrap()).unwrap();
            let expect = cell
                .a
                .congruence(&state.cov)
                .unwrap()
                .add(&cell.b.congruence(&sigma).unwrap())
                .unwrap();
            assert!(next.cov.sub(&expect).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_stays_psd_and_is_monotone_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let p = GruParams::random(4, 2, &mut rng);
            let state = GaussianState::new(vec![0.3, -0.1, 0.5, 0.0], random_psd(&mut rng, 4)).unwrap();
            let small = random_psd(&mut rng, 2);
            let big = small.add(&random_psd(&mut rng, 2)).unwrap();
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let lo = cvrnn_update(&p, &state, &x, &ObservationNoise::new(small).unwrap()).unwrap();
            let hi = cvrnn_update(&p, &state, &x, &ObservationNoise::new(big).unwrap()).unwrap();
            assert!(min_eigenvalue(&lo.cov).unwrap() >= -1e-9);
            assert!(lo.cov.asymmetry() <= 1e-10);
            let gap = hi.cov.sub(&lo.cov).unwrap().symmetrize();
            assert!(min_eigenvalue(&gap).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn output_transform_examples() {
        let w = Matrix::from_rows(&[&[1.0, -2.0, 0.5, 3.0, 0.0]]).unwrap();
        let head = AffineHead::new(w.clone(), Matrix::zeros(1, 1)).unwrap();
        let unit = GaussianState::new(vec![0.0; 5], Matrix::identity(5)).unwrap();
        let out = output_transform(&head, &unit).unwrap();
        assert!((out.cov[(0, 0)] - w.frobenius_norm().powi(2)).abs() < 1e-12);

        let zero = GaussianState::zeros(5);
        assert_eq!(output_transform(&head, &zero).unwrap().cov, Matrix::zeros(1, 1));

        let pick = AffineHead::new(Matrix::from_rows(&[&[1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap(), Matrix::zeros(1, 1)).unwrap();
        let state = GaussianState::new(vec![0.0; 5], Matrix::diag(&[4.0, 1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(output_transform(&pick, &state).unwrap().cov.as_slice(), &[4.0]);
    }

    #[test]
    fn output_transform_shape_error() {
        let head = AffineHead::zeros(1, 4);
        assert!(output_transform(&head, &GaussianState::zeros(5)).is_err());
    }
}
