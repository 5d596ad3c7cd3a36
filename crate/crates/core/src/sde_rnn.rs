//! Interleaves SDE moment propagation between grid points with the CVRNN
//! moment update at observed points, and emits output mean/variance at every
//! grid point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Record;
use crate::error::{Error, Result};
use crate::gru::{gru_cell, GruParams, GruWeights};
use crate::moments::{cvrnn_update, output_transform, AffineHead, GaussianState, ObservationNoise};
use crate::neural_sde::{propagate_moments, step_sizes, IntegrationConfig, Method, Mlp, SdeParams};
use crate::numcore::{Graph, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub gru: GruParams,
    pub sde: SdeParams,
    pub head: AffineHead,
    /// Record-time units per unit of SDE time (1440 maps minutes to days).
    pub time_scale: f64,
    /// Initial hidden covariance is `init_cov * I`.
    pub init_cov: f64,
}

pub const DEFAULT_HIDDEN: usize = 5;
/// Hidden-state variance before the first observation.
pub const DEFAULT_INIT_COV: f64 = 1e-2;

impl ModelParams {
    pub fn random<R: Rng + ?Sized>(hidden: usize, input: usize, sde_width: usize, time_scale: f64, rng: &mut R) -> Self {
        let gru = GruParams::random(hidden, input, rng);
        let sde = SdeParams::random(hidden, sde_width, rng);
        let head = {
            let bound = 1.0 / (hidden as f64).sqrt();
            let w = (0..hidden).map(|_| rng.random_range(-bound..=bound)).collect();
            let b = vec![rng.random_range(-bound..=bound)];
            AffineHead::new(Matrix::from_vec(1, hidden, w).expect("finite"), Matrix::col(&b))
                .expect("consistent head shapes")
        };
        ModelParams {
            gru,
            sde,
            head,
            time_scale,
            init_cov: DEFAULT_INIT_COV,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.gru.hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.gru.input_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.gru.validate()?;
        self.sde.validate()?;
        let m = self.hidden_size();
        if self.sde.hidden_size() != m {
            return Err(Error::shape("ModelParams sde", (m, m), (self.sde.hidden_size(), 1)));
        }
        if self.head.input_size() != m || self.head.bias.shape() != (self.head.output_size(), 1) {
            return Err(Error::shape("ModelParams head", (1, m), self.head.weight.shape()));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::Config(format!("time_scale must be positive, got {}", self.time_scale)));
        }
        if !(self.init_cov >= 0.0) {
            return Err(Error::Config(format!("init_cov must be nonnegative, got {}", self.init_cov)));
        }
        Ok(())
    }

    /// Arrays that receive gradients: GRU (12), drift net (4), head (2).
    pub fn trainable_arrays(&self) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = self.gru.iter().cloned().collect();
        out.extend(self.sde.drift.arrays().into_iter().cloned());
        out.push(self.head.weight.clone());
        out.push(self.head.bias.clone());
        out
    }

    pub fn set_trainable_arrays(&mut self, arrays: &[Matrix]) -> Result<()> {
        if arrays.len() != 18 {
            return Err(Error::Contract(format!("expected 18 trainable arrays, got {}", arrays.len())));
        }
        for (new, old) in arrays.iter().zip(self.trainable_arrays()) {
            if new.shape() != old.shape() {
                return Err(Error::shape("set_trainable_arrays", old.shape(), new.shape()));
            }
        }
        self.gru = GruWeights::from_iter(arrays[..12].iter().cloned()).expect("twelve GRU arrays");
        self.sde.drift.w1 = arrays[12].clone();
        self.sde.drift.b1 = arrays[13].clone();
        self.sde.drift.w2 = arrays[14].clone();
        self.sde.drift.b2 = arrays[15].clone();
        self.head.weight = arrays[16].clone();
        self.head.bias = arrays[17].clone();
        Ok(())
    }
}

pub fn initial_state(model: &ModelParams) -> GaussianState {
    let m = model.hidden_size();
    GaussianState {
        mean: vec![0.0; m],
        cov: Matrix::identity(m).scale(model.init_cov),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputationResult {
    pub times: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Matrix>,
    pub observed_mask: Vec<bool>,
    /// Hidden state emitted at each grid point (after the masked blend).
    pub states: Vec<GaussianState>,
    /// Hidden state after SDE propagation, before any CVRNN update.
    pub priors: Vec<GaussianState>,
}

impl ImputationResult {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Scalar output variance at grid index `i`.
    pub fn variance(&self, i: usize) -> f64 {
        self.variances[i][(0, 0)]
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.means[i][0]
    }
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Validation("grid contains non-finite times".into()));
    }
    if let Some(w) = grid.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Validation(format!(
            "grid must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Position of `t` on a sorted grid, tolerating representation error.
pub(crate) fn grid_index(grid: &[f64], t: f64) -> Option<usize> {
    let tol = 1e-9 * t.abs().max(1.0);
    let i = grid.partition_point(|g| *g < t - tol);
    (i < grid.len() && (grid[i] - t).abs() <= tol).then_some(i)
}

/// For every grid index, the index of the record observation available there (mask = 1).
pub(crate) fn align(record: &Record, grid: &[f64]) -> Result<Vec<Option<usize>>> {
    let mut slots = vec![None; grid.len()];
    for (k, t) in record.times.iter().enumerate() {
        let i = grid_index(grid, *t).ok_or_else(|| Error::Alignment {
            record: record.id.clone(),
            time: *t,
        })?;
        if record.mask[k] {
            slots[i] = Some(k);
        }
    }
    Ok(slots)
}

fn check_model_for_record(model: &ModelParams) -> Result<()> {
    model.validate()?;
    if model.input_size() != 1 {
        return Err(Error::Config(format!(
            "records carry scalar values but the model expects input size {}",
            model.input_size()
        )));
    }
    Ok(())
}

/// Runs the SDE-RNN filter over `grid`, emitting output mean and variance at every point.
pub fn impute(model: &ModelParams, record: &Record, grid: &[f64], cfg: &IntegrationConfig) -> Result<ImputationResult> {
    check_model_for_record(model)?;
    check_grid(grid)?;
    cfg.validate()?;
    let slots = align(record, grid)?;
    let sde_cfg = IntegrationConfig {
        dt: cfg.dt / model.time_scale,
        method: cfg.method,
    };

    let n = grid.len();
    let mut out = ImputationResult {
        times: grid.to_vec(),
        means: Vec::with_capacity(n),
        variances: Vec::with_capacity(n),
        observed_mask: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
        priors: Vec::with_capacity(n),
    };

    let mut state = initial_state(model);
    for i in 0..n {
        let prior = if i == 0 {
            state
        } else {
            propagate_moments(
                &model.sde,
                &state,
                grid[i - 1] / model.time_scale,
                grid[i] / model.time_scale,
                &sde_cfg,
            )?
        };
        state = match slots[i] {
            Some(k) => {
                let noise = ObservationNoise::from_std(&[record.noise_sigma[k]]);
                cvrnn_update(&model.gru, &prior, &[record.values[k]], &noise)?
            }
            None => prior.clone(),
        };
        let emitted = output_transform(&model.head, &state)?;
        out.means.push(emitted.mean);
        out.variances.push(emitted.cov);
        out.observed_mask.push(slots[i].is_some());
        out.states.push(state.clone());
        out.priors.push(prior);
    }
    Ok(out)
}

/// Trainable arrays of [`ModelParams`] as graph values.
pub struct ModelVars<V> {
    pub gru: GruWeights<V>,
    pub drift: [V; 4],
    pub head_weight: V,
    pub head_bias: V,
}

impl<V: Clone> ModelVars<V> {
    pub fn from_arrays(arrays: &[V]) -> Result<Self> {
        if arrays.len() != 18 {
            return Err(Error::Contract(format!("expected 18 arrays, got {}", arrays.len())));
        }
        Ok(ModelVars {
            gru: GruWeights::from_iter(arrays[..12].iter().cloned()).expect("twelve GRU arrays"),
            drift: [arrays[12].clone(), arrays[13].clone(), arrays[14].clone(), arrays[15].clone()],
            head_weight: arrays[16].clone(),
            head_bias: arrays[17].clone(),
        })
    }
}

/// Mean-path evaluator shared by inference-style evaluation and training.
pub struct MeanPath<'a, G: Graph> {
    pub vars: &'a ModelVars<G::Value>,
    pub drift_net: &'a Mlp,
    pub time_scale: f64,
    pub cfg: IntegrationConfig,
}

impl<G: Graph> MeanPath<'_, G> {
    fn drift(&self, g: &mut G, h: &G::Value) -> Result<G::Value> {
        Mlp::on_graph(
            self.drift_net.hidden_activation,
            self.drift_net.output_activation,
            g,
            &self.vars.drift,
            h,
        )
    }

    /// Mean ODE from grid time `t0` to `t1` (record units).
    pub fn propagate(&self, g: &mut G, h: &G::Value, t0: f64, t1: f64) -> Result<G::Value> {
        let (s0, s1) = (t0 / self.time_scale, t1 / self.time_scale);
        if !(s1 > s0) {
            return Err(Error::Interval { t0, t1 });
        }
        let dt = self.cfg.dt / self.time_scale;
        let mut h = h.clone();
        for step in step_sizes(s0, s1, dt) {
            h = match self.cfg.method {
                Method::Euler => {
                    let k1 = self.drift(g, &h)?;
                    let inc = g.scale(&k1, step);
                    g.add(&h, &inc)?
                }
                Method::Rk4 => {
                    let k1 = self.drift(g, &h)?;
                    let a = g.scale(&k1, 0.5 * step);
                    let h2 = g.add(&h, &a)?;
                    let k2 = self.drift(g, &h2)?;
                    let b = g.scale(&k2, 0.5 * step);
                    let h3 = g.add(&h, &b)?;
                    let k3 = self.drift(g, &h3)?;
                    let c = g.scale(&k3, step);
                    let h4 = g.add(&h, &c)?;
                    let k4 = self.drift(g, &h4)?;
                    let k2x2 = g.scale(&k2, 2.0);
                    let s1 = g.add(&k1, &k2x2)?;
                    let k3x2 = g.scale(&k3, 2.0);
                    let s2 = g.add(&s1, &k3x2)?;
                    let s3 = g.add(&s2, &k4)?;
                    let inc = g.scale(&s3, step / 6.0);
                    g.add(&h, &inc)?
                }
            };
        }
        Ok(h)
    }

    pub fn update(&self, g: &mut G, h: &G::Value, x: f64) -> Result<G::Value> {
        let x = g.constant(Matrix::col(&[x]));
        gru_cell(g, &self.vars.gru, h, &x)
    }

    pub fn output(&self, g: &mut G, h: &G::Value) -> Result<G::Value> {
        AffineHead::on_graph(g, &self.vars.head_weight, &self.vars.head_bias, h)
    }
}
