//! Hidden-state SDE `dh = f(h) dt + diag(g(h)) dB`, `dB ~ N(0, Q dt)`.
//!
//! Between observations the state moments follow the linearized flow
//!
//! ```text
//! dm/dt = f(m)
//! dP/dt = P F^T + F P + diag(g(m)) Q diag(g(m))
//! ```
//!
//! where `F` is the drift Jacobian at the mean. [`sample_paths`] is an
//! Euler–Maruyama ensemble used to validate the linearization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::GaussianState;
use crate::numcore::{Activation, Graph, Matrix};

/// One-hidden-layer perceptron `out(W2 hid(W1 x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    pub fn zeros(input: usize, width: usize, output: usize, hidden_activation: Activation, output_activation: Activation) -> Self {
        Mlp {
            w1: Matrix::zeros(width, input),
            b1: Matrix::zeros(width, 1),
            w2: Matrix::zeros(output, width),
            b2: Matrix::zeros(output, 1),
            hidden_activation,
            output_activation,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` per layer.
    pub fn random<R: Rng + ?Sized>(
        input: usize,
        width: usize,
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layer = |r: usize, c: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let data = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix::from_vec(r, c, data).expect("finite uniform draws")
        };
        Mlp {
            w1: layer(width, input, input),
            b1: layer(width, 1, input),
            w2: layer(output, width, width),
            b2: layer(output, 1, width),
            hidden_activation,
            output_activation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w1.cols()
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_size(&self) -> usize {
        self.w2.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, o) = (self.width(), self.output_size());
        let checks = [
            (&self.b1, (w, 1)),
            (&self.w2, (o, w)),
            (&self.b2, (o, 1)),
        ];
        for (m, shape) in checks {
            if m.shape() != shape {
                return Err(Error::shape("Mlp", shape, m.shape()));
            }
        }
        if [&self.w1, &self.b1, &self.w2, &self.b2].iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("Mlp"));
        }
        Ok(())
    }

    fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_size() {
            return Err(Error::shape("Mlp input", (self.input_size(), 1), (x.len(), 1)));
        }
        let mut a = self.w1.mul_vec(x)?;
        for (v, b) in a.iter_mut().zip(self.b1.as_slice()) {
            *v = self.hidden_activation.apply(*v + b);
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let hidden = self.hidden(x)?;
        let mut out = self.w2.mul_vec(&hidden)?;
        for (v, b) in out.iter_mut().zip(self.b2.as_slice()) {
            *v = self.output_activation.apply(*v + b);
        }
        Ok(out)
    }

    /// `∂out/∂x` at `x`.
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let hidden = self.hidden(x)?;
        let slopes: Vec<f64> = hidden
            .iter()
            .map(|y| self.hidden_activation.derivative_from_output(*y))
            .collect();
        let mut j = self.w2.matmul(&self.w1.scale_rows(&slopes)?)?;
        if self.output_activation != Activation::Identity {
            let out = self.forward(x)?;
            let out_slopes: Vec<f64> = out
                .iter()
                .map(|y| self.output_activation.derivative_from_output(*y))
                .collect();
            j = j.scale_rows(&out_slopes)?;
        }
        Ok(j)
    }

    /// Same map on a [`Graph`]; `w` holds `[w1, b1, w2, b2]`.
    pub fn on_graph<G: Graph>(
        hidden_activation: Activation,
        output_activation: Activation,
        g: &mut G,
        w: &[G::Value; 4],
        x: &G::Value,
    ) -> Result<G::Value> {
        let pre = g.affine(&w[0], x, &w[1])?;
        let hid = hidden_activation.on_graph(g, &pre);
        let out = g.affine(&w[2], &hid, &w[3])?;
        Ok(output_activation.on_graph(g, &out))
    }

    pub fn arrays(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Drift and diffusion networks plus the Brownian covariance rate `Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeParams {
    pub drift: Mlp,
    pub diffusion: Mlp,
    pub q: Matrix,
}

pub const DEFAULT_SDE_WIDTH: usize = 100;

impl SdeParams {
    /// Tanh hidden layers; linear drift output, sigmoid diffusion output; `Q = I`.
    pub fn random<R: Rng + ?Sized>(hidden: usize, width: usize, rng: &mut R) -> Self {
        SdeParams {
            drift: Mlp::random(hidden, width, hidden, Activation::Tanh, Activation::Identity, rng),
            diffusion: Mlp::random(hidden, width, hidden, Activation::Tanh, Activation::Sigmoid, rng),
            q: Matrix::identity(hidden),
        }
    }

    /// `f ≡ 0`, `g ≡ 0`, `Q = I`.
    pub fn zeros(hidden: usize, width: usize) -> Self {
        SdeParams {
            drift: Mlp::zeros(hidden, width, hidden, Activation::Tanh, Activation::Identity),
            diffusion: Mlp::zeros(hidden, width, hidden, Activation::Tanh, Activation::Identity),
            q: Matrix::identity(hidden),
        }
    }

    /// Linear drift `f(h) = A h` embedded through an identity hidden layer,
    /// with constant diffusion `g(h) = g_const`.
    pub fn linear(a: &Matrix, g_const: &[f64], q: Matrix) -> Result<Self> {
        let m = a.rows();
        if !a.is_square() || g_const.len() != m {
            return Err(Error::shape("SdeParams::linear", a.shape(), (g_const.len(), 1)));
        }
        let drift = Mlp {
            w1: a.clone(),
            b1: Matrix::zeros(m, 1),
            w2: Matrix::identity(m),
            b2: Matrix::zeros(m, 1),
            hidden_activation: Activation::Identity,
            output_activation: Activation::Identity,
        };
        let mut diffusion = Mlp::zeros(m, 1, m, Activation::Identity, Activation::Identity);
        diffusion.b2 = Matrix::col(g_const);
        let params = SdeParams { drift, diffusion, q };
        params.validate()?;
        Ok(params)
    }

    pub fn hidden_size(&self) -> usize {
        self.drift.input_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.drift.validate()?;
        self.diffusion.validate()?;
        let m = self.hidden_size();
        for net in [&self.drift, &self.diffusion] {
            if net.input_size() != m || net.output_size() != m {
                return Err(Error::shape("SdeParams net", (m, m), (net.input_size(), net.output_size())));
            }
        }
        if self.q.shape() != (m, m) {
            return Err(Error::shape("SdeParams Q", (m, m), self.q.shape()));
        }
        for i in 0..m {
            for j in 0..m {
                let v = self.q[(i, j)];
                if (i == j && !(v >= 0.0)) || (i != j && v != 0.0) {
                    return Err(Error::Validation("Q must be diagonal with nonnegative entries".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn drift(params: &SdeParams, h: &[f64]) -> Result<Vec<f64>> {
    params.drift.forward(h)
}

pub fn drift_jacobian(params: &SdeParams, h: &[f64]) -> Result<Matrix> {
    params.drift.jacobian(h)
}

/// Diagonal of the diffusion matrix at `h`.
pub fn diffusion(params: &SdeParams, h: &[f64]) -> Result<Vec<f64>> {
    params.diffusion.forward(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Config(format!("unknown integration method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub dt: f64,
    pub method: Method,
}

impl IntegrationConfig {
    pub fn new(dt: f64, method: Method) -> Result<Self> {
        let cfg = IntegrationConfig { dt, method };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Euler with `dt` a tenth of the smallest gap in `grid`.
    pub fn for_grid(grid: &[f64]) -> Self {
        let finest = grid
            .windows(2)
            .map(|w| w[1] - w[0])
            .filter(|g| *g > 0.0)
            .fold(f64::INFINITY, f64::min);
        let dt = if finest.is_finite() { finest / 10.0 } else { 0.1 };
        IntegrationConfig { dt, method: Method::Euler }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("integration step must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Step sizes covering `[t0, t1]`: `dt` repeated, the last one shortened to land on `t1`.
pub(crate) fn step_sizes(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
    let span = t1 - t0;
    let n = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut steps = vec![dt; n];
    steps[n - 1] = span - dt * (n - 1) as f64;
    steps
}

struct MomentRates {
    dm: Vec<f64>,
    dp: Matrix,
}

fn moment_rates(params: &SdeParams, mean: &[f64], cov: &Matrix) -> Result<MomentRates> {
    let dm = drift(params, mean)?;
    let f = drift_jacobian(params, mean)?;
    let g = diffusion(params, mean)?;
    let fp = f.matmul(cov)?;
    let mut dp = fp.add(&fp.transpose())?;
    for i in 0..g.len() {
        dp[(i, i)] += g[i] * g[i] * params.q[(i, i)];
    }
    Ok(MomentRates { dm, dp })
}

fn shifted(mean: &[f64], cov: &Matrix, rates: &MomentRates, h: f64) -> Result<(Vec<f64>, Matrix)> {
    let m: Vec<f64> = mean.iter().zip(&rates.dm).map(|(a, b)| a + h * b).collect();
    let mut p = cov.clone();
    p.axpy(h, &rates.dp)?;
    Ok((m, p))
}

/// Integrates the linearized mean/covariance flow from `t0` to `t1`.
pub fn propagate_moments(
    params: &SdeParams,
    state: &GaussianState,
    t0: f64,
    t1: f64,
    cfg: &IntegrationConfig,
) -> Result<GaussianState> {
    if !(t1 > t0) {
        return Err(Error::Interval { t0, t1 });
    }
    cfg.validate()?;
    if state.dim() != params.hidden_size() {
        return Err(Error::shape("propagate_moments", (params.hidden_size(), 1), (state.dim(), 1)));
    }

    let mut mean = state.mean.clone();
    let mut cov = state.cov.clone();
    let mut t = t0;
    for (step, h) in step_sizes(t0, t1, cfg.dt).into_iter().enumerate() {
        match cfg.method {
            Method::Euler => {
                let k1 = moment_rates(params, &mean, &cov)?;
                (mean, cov) = shifted(&mean, &cov, &k1, h)?;
            }
            Method::Rk4 => {
                let k1 = moment_rates(params, &mean, &cov)?;
                let (m2, p2) = shifted(&mean, &cov, &k1, 0.5 * h)?;
                let k2 = moment_rates(params, &m2, &p2)?;
                let (m3, p3) = shifted(&mean, &cov, &k2, 0.5 * h)?;
                let k3 = moment_rates(params, &m3, &p3)?;
                let (m4, p4) = shifted(&mean, &cov, &k3, h)?;
                let k4 = moment_rates(params, &m4, &p4)?;
                for i in 0..mean.len() {
                    mean[i] += h / 6.0 * (k1.dm[i] + 2.0 * k2.dm[i] + 2.0 * k3.dm[i] + k4.dm[i]);
                }
                for (c, ((a, b), (d, e))) in cov.as_mut_slice().iter_mut().zip(
                    k1.dp
                        .as_slice()
                        .iter()
                        .zip(k2.dp.as_slice())
                        .zip(k3.dp.as_slice().iter().zip(k4.dp.as_slice())),
                ) {
                    *c += h / 6.0 * (a + 2.0 * b + 2.0 * d + e);
                }
            }
        }
        t += h;
        cov.symmetrize_in_place();
        if mean.iter().any(|v| !v.is_finite()) || !cov.is_finite() {
            return Err(Error::Divergence { step, time: t });
        }
    }
    Ok(GaussianState {
        mean,
        cov: crate::numcore::stabilize_covariance(&cov)?,
    })
}

/// Ensemble statistics at the end of an Euler–Maruyama run.
#[derive(Clone, Debug, PartialEq)]
pub struct PathStatistics {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub n_paths: usize,
}

const PATHS_PER_SHARD: usize = 1024;

struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Matrix,
}

impl Moments {
    fn empty(dim: usize) -> Self {
        Moments { n: 0, mean: vec![0.0; dim], m2: Matrix::zeros(dim, dim) }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let inv = 1.0 / self.n as f64;
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * inv;
        }
        let dim = x.len();
        for i in 0..dim {
            for j in 0..dim {
                self.m2[(i, j)] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    /// Chan et al. pairwise merge.
    fn merge(mut self, other: Moments) -> Moments {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other;
        }
        let n = self.n + other.n;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let w = other.n as f64 / n as f64;
        let cross = (self.n as f64) * (other.n as f64) / n as f64;
        let dim = delta.len();
        for i in 0..dim {
            for j in 0..dim {
                self.m2[(i, j)] += other.m2[(i, j)] + delta[i] * delta[j] * cross;
            }
        }
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * w;
        }
        self.n = n;
        self
    }
}

/// Euler–Maruyama ensemble `h += f(h) dt + g(h) ∘ ΔB`, `ΔB ~ N(0, Q dt)`.
///
/// Paths are split into fixed-size shards, each with its own ChaCha stream,
/// and merged in shard order, so results depend only on `seed`.
#[allow(clippy::too_many_arguments)]
pub fn sample_paths(
    params: &SdeParams,
    h0: &[f64],
    t0: f64,
    t1: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PathStatistics> {
    if !(t1 > t0) {
        return Err(Error::Interval { t0, t1 });
    }
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    IntegrationConfig::new(dt, Method::Euler)?;
    let m = params.hidden_size();
    if h0.len() != m {
        return Err(Error::shape("sample_paths", (m, 1), (h0.len(), 1)));
    }
    let steps = step_sizes(t0, t1, dt);
    let noise_scale: Vec<f64> = params.q.diagonal().iter().map(|q| q.sqrt()).collect();
    let n_shards = n_paths.div_ceil(PATHS_PER_SHARD);

    let shards: Vec<Result<Moments>> = (0..n_shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard as u64);
            let count = PATHS_PER_SHARD.min(n_paths - shard * PATHS_PER_SHARD);
            let mut acc = Moments::empty(m);
            let mut h = vec![0.0; m];
            for _ in 0..count {
                h.copy_from_slice(h0);
                let mut t = t0;
                for (k, dt_k) in steps.iter().enumerate() {
                    let f = params.drift.forward(&h)?;
                    let g = params.diffusion.forward(&h)?;
                    let sq = dt_k.sqrt();
                    for i in 0..m {
                        let xi: f64 = rng.sample(StandardNormal);
                        h[i] += f[i] * dt_k + g[i] * noise_scale[i] * sq * xi;
                    }
                    t += dt_k;
                    if h.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Divergence { step: k, time: t });
                    }
                }
                acc.push(&h);
            }
            Ok(acc)
        })
        .collect();

    let mut total = Moments::empty(m);
    for shard in shards {
        total = total.merge(shard?);
    }
    let cov = if total.n > 1 {
        total.m2.scale(1.0 / (total.n as f64 - 1.0)).symmetrize()
    } else {
        Matrix::zeros(m, m)
    };
    Ok(PathStatistics {
        mean: total.mean,
        cov,
        n_paths: total.n,
    })
}
