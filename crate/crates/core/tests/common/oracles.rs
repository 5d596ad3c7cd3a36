//! Reference implementations used to check the library. Nothing here calls
//! library numerics; library types are only read for their stored numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sdernn::gru::GruParams;
use sdernn::neural_sde::Mlp;
use sdernn::numcore::{Activation, Matrix};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(m: &Matrix) -> Mat {
    let (r, c) = m.shape();
    let d = m.as_slice();
    (0..r).map(|i| d[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn eye(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn scale(a: &Mat, k: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * k).collect()).collect()
}

pub fn mat_vec(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

/// Largest entrywise difference relative to the largest reference entry.
pub fn max_rel_error(got: &Mat, want: &Mat) -> f64 {
    let mut diff: f64 = 0.0;
    let mut size: f64 = 0.0;
    for (g, w) in got.iter().zip(want) {
        for (a, b) in g.iter().zip(w) {
            diff = diff.max((a - b).abs());
            size = size.max(b.abs());
        }
    }
    if size == 0.0 {
        diff
    } else {
        diff / size
    }
}

pub fn vec_rel_error(got: &[f64], want: &[f64]) -> f64 {
    max_rel_error(&vec![got.to_vec()], &vec![want.to_vec()])
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GRU cell written out gate by gate.
pub struct GruRef {
    w_iz: Mat,
    w_ir: Mat,
    w_in: Mat,
    w_hz: Mat,
    w_hr: Mat,
    w_hn: Mat,
    b_iz: Vec<f64>,
    b_ir: Vec<f64>,
    b_in: Vec<f64>,
    b_hz: Vec<f64>,
    b_hr: Vec<f64>,
    b_hn: Vec<f64>,
}

impl GruRef {
    pub fn from_params(p: &GruParams) -> Self {
        let v = |m: &Matrix| m.as_slice().to_vec();
        GruRef {
            w_iz: to_mat(&p.w_iz),
            w_ir: to_mat(&p.w_ir),
            w_in: to_mat(&p.w_in),
            w_hz: to_mat(&p.w_hz),
            w_hr: to_mat(&p.w_hr),
            w_hn: to_mat(&p.w_hn),
            b_iz: v(&p.b_iz),
            b_ir: v(&p.b_ir),
            b_in: v(&p.b_in),
            b_hz: v(&p.b_hz),
            b_hr: v(&p.b_hr),
            b_hn: v(&p.b_hn),
        }
    }

    pub fn step(&self, h: &[f64], x: &[f64]) -> Vec<f64> {
        let m = h.len();
        let row = |w: &Mat, v: &[f64], i: usize| -> f64 { w[i].iter().zip(v).map(|(a, b)| a * b).sum() };
        let mut out = vec![0.0; m];
        for i in 0..m {
            let z = logistic(row(&self.w_iz, x, i) + self.b_iz[i] + row(&self.w_hz, h, i) + self.b_hz[i]);
            let r = logistic(row(&self.w_ir, x, i) + self.b_ir[i] + row(&self.w_hr, h, i) + self.b_hr[i]);
            let n = (row(&self.w_in, x, i) + self.b_in[i] + r * (row(&self.w_hn, h, i) + self.b_hn[i])).tanh();
            out[i] = z * h[i] + (1.0 - z) * n;
        }
        out
    }
}

pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Central difference of a scalar function.
pub fn finite_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = fd_step(x);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Column-by-column central-difference Jacobian.
pub fn jacobian_fd(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Mat {
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    transpose(&cols)
}

/// `exp(A t)` by scaling and squaring of a Taylor series.
pub fn expm(a: &Mat, t: f64) -> Mat {
    let n = a.len();
    let at = scale(a, t);
    let norm = at.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let small = scale(&at, 0.5f64.powi(squarings));
    let mut term = eye(n);
    let mut sum = eye(n);
    for k in 1..=20 {
        term = scale(&mul(&term, &small), 1.0 / k as f64);
        sum = add(&sum, &term);
    }
    for _ in 0..squarings {
        sum = mul(&sum, &sum);
    }
    sum
}

/// Exact mean and quadrature covariance of `dh = A h dt + diag(b) dB`, `dB ~ N(0, Q dt)`.
///
/// The noise integral uses composite Simpson on `[0, t]` with step close to `dt`.
pub fn linear_sde_moments(a: &Mat, b: &[f64], q: &Mat, m0: &[f64], p0: &Mat, t: f64, dt: f64) -> (Vec<f64>, Mat) {
    let n = a.len();
    let phi = expm(a, t);
    let mean = mat_vec(&phi, m0);
    let mut d = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d[i][j] = b[i] * q[i][j] * b[j];
        }
    }
    let mut steps = (t / dt).ceil() as usize;
    if steps % 2 == 1 {
        steps += 1;
    }
    let h = t / steps as f64;
    let step = expm(a, h);
    let mut e = eye(n);
    let mut integral = zeros(n, n);
    for k in 0..=steps {
        let w = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let term = mul(&mul(&e, &d), &transpose(&e));
        integral = add(&integral, &scale(&term, w));
        e = mul(&e, &step);
    }
    let integral = scale(&integral, h / 3.0);
    let cov = add(&mul(&mul(&phi, p0), &transpose(&phi)), &integral);
    (mean, cov)
}

/// Two-layer perceptron evaluated with plain loops.
pub struct MlpRef {
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
    hidden: Activation,
    output: Activation,
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => logistic(x),
    }
}

impl MlpRef {
    pub fn from_mlp(m: &Mlp) -> Self {
        MlpRef {
            w1: to_mat(&m.w1),
            b1: m.b1.as_slice().to_vec(),
            w2: to_mat(&m.w2),
            b2: m.b2.as_slice().to_vec(),
            hidden: m.hidden_activation,
            output: m.output_activation,
        }
    }

    pub fn eval_into(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        for (i, row) in self.w1.iter().enumerate() {
            let s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[i];
            hidden[i] = act(self.hidden, s);
        }
        for (i, row) in self.w2.iter().enumerate() {
            let s: f64 = row.iter().zip(hidden.iter()).map(|(w, v)| w * v).sum::<f64>() + self.b2[i];
            out[i] = act(self.output, s);
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = vec![0.0; self.w1.len()];
        let mut out = vec![0.0; self.w2.len()];
        self.eval_into(x, &mut hidden, &mut out);
        out
    }

    pub fn width(&self) -> usize {
        self.w1.len()
    }
}

/// Euler–Maruyama ensemble mean and unbiased covariance of
/// `dh = f(h) dt + g(h) ∘ dB`, `dB ~ N(0, diag(q) dt)`.
#[allow(clippy::too_many_arguments)]
pub fn em_moments(drift: &MlpRef, diffusion: &MlpRef, q: &[f64], h0: &[f64], t: f64, dt: f64, n_paths: usize, seed: u64) -> (Vec<f64>, Mat) {
    let m = h0.len();
    let steps = (t / dt).round() as usize;
    let h_step = t / steps as f64;
    let sq: Vec<f64> = q.iter().map(|v| (v * h_step).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hid_f, mut hid_g) = (vec![0.0; drift.width()], vec![0.0; diffusion.width()]);
    let (mut f, mut g) = (vec![0.0; m], vec![0.0; m]);
    let mut sum = vec![0.0; m];
    let mut outer = zeros(m, m);
    let mut h = vec![0.0; m];
    for _ in 0..n_paths {
        h.copy_from_slice(h0);
        for _ in 0..steps {
            drift.eval_into(&h, &mut hid_f, &mut f);
            diffusion.eval_into(&h, &mut hid_g, &mut g);
            for i in 0..m {
                let xi: f64 = StandardNormal.sample(&mut rng);
                h[i] += f[i] * h_step + g[i] * sq[i] * xi;
            }
        }
        for i in 0..m {
            sum[i] += h[i];
            for j in 0..m {
                outer[i][j] += h[i] * h[j];
            }
        }
    }
    let n = n_paths as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut cov = zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            cov[i][j] = (outer[i][j] - n * mean[i] * mean[j]) / (n - 1.0);
        }
    }
    (mean, cov)
}

/// Outcome of comparing a library result with an oracle.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        OracleReport {
            name: name.into(),
            max_rel_error,
            tolerance,
            pass: max_rel_error <= tolerance,
        }
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}) {}",
            self.name,
            self.max_rel_error,
            self.tolerance,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    let n = a.len();
    let mut m = a.clone();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}
