//! Mini-batch MSE training by backpropagation through the discretized mean path.
//!
//! A [`Trainable`] exposes its parameters as a flat list of arrays and splits
//! its data into independent loss units. The trainer shuffles units into
//! batches, differentiates each unit on its own tape and sums gradients in
//! unit order, so results do not depend on thread scheduling.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::neural_sde::IntegrationConfig;
use crate::numcore::{Eager, Graph, Matrix, Tape, Var};
use crate::sde_rnn::{align, check_grid, MeanPath, ModelParams, ModelVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Grid steps per truncated-backpropagation window.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 10,
            epochs: 20,
            seed: 0,
            optimizer: Optimizer::Adam,
            window: 60,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `mse[0]` is the initial loss, then one entry per completed epoch.
    pub mse: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Epoch at which a non-finite loss or gradient stopped training.
    pub diverged: Option<usize>,
}

impl TrainReport {
    pub fn final_mse(&self) -> f64 {
        *self.mse.last().expect("report holds the initial loss")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "mse"])?;
        for (epoch, mse) in self.mse.iter().enumerate() {
            w.write_record([epoch.to_string(), mse.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean of squared errors over entries with `mask` set.
pub fn mse(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape("mse", (pred.len(), 1), (target.len(), mask.len())));
    }
    let (sum, n) = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - t) * (p - t), n + 1));
    if n == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(sum / n as f64)
}

/// Squared-error loss of one unit recorded on a tape.
pub struct UnitLoss {
    pub sse: Var,
    pub count: usize,
}

pub trait Trainable: Sync {
    fn arrays(&self) -> Vec<Matrix>;
    fn set_arrays(&mut self, arrays: &[Matrix]) -> Result<()>;
    fn n_units(&self) -> usize;
    /// Full-data MSE at the current parameters; refreshes any cached unit state.
    fn refresh(&mut self) -> Result<f64>;
    /// Records the loss of `unit` on `tape`; `None` when the unit has no targets.
    fn unit_loss(&self, tape: &mut Tape, params: &[Var], unit: usize, seed: u64) -> Result<Option<UnitLoss>>;
}

struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn apply_step(params: &mut [Matrix], grads: &[Matrix], cfg: &TrainConfig, adam: &mut AdamState) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                p.axpy(-cfg.learning_rate, g).expect("gradient matches parameter shape");
            }
        }
        Optimizer::Adam => {
            adam.t += 1;
            let c1 = 1.0 - BETA1.powi(adam.t);
            let c2 = 1.0 - BETA2.powi(adam.t);
            for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = adam.m[k].as_mut_slice();
                let v = adam.v[k].as_mut_slice();
                for (j, (pj, gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                    *pj -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

fn unit_seed(seed: u64, epoch: usize, unit: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ (unit as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Gradient of the summed squared error of one unit, with its target count.
fn unit_gradient<T: Trainable + ?Sized>(task: &T, params: &[Matrix], unit: usize, seed: u64) -> Result<Option<(Vec<Matrix>, usize)>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let Some(loss) = task.unit_loss(&mut tape, &vars, unit, seed)? else {
        return Ok(None);
    };
    let grads = tape.backward(loss.sse)?;
    Ok(Some((vars.iter().map(|v| grads.get(*v)).collect(), loss.count)))
}

/// Batch gradient of the mean squared error.
pub fn batch_gradient<T: Trainable + ?Sized>(task: &T, params: &[Matrix], units: &[usize], seeds: &[u64]) -> Result<Option<Vec<Matrix>>> {
    let parts: Vec<Result<Option<(Vec<Matrix>, usize)>>> = units
        .par_iter()
        .zip(seeds)
        .map(|(u, s)| unit_gradient(task, params, *u, *s))
        .collect();
    let mut total: Option<Vec<Matrix>> = None;
    let mut count = 0usize;
    for part in parts {
        if let Some((grads, n)) = part? {
            count += n;
            match total.as_mut() {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.axpy(1.0, g)?;
                    }
                }
            }
        }
    }
    Ok(total.map(|g| g.into_iter().map(|m| m.scale(1.0 / count as f64)).collect()))
}

/// Runs `cfg.epochs` epochs on `task` in place.
pub fn fit<T: Trainable + ?Sized>(task: &mut T, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport {
        mse: vec![task.refresh()?],
        epoch_seconds: Vec::new(),
        diverged: None,
    };
    if !report.mse[0].is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }
    let mut params = task.arrays();
    let mut adam = AdamState {
        m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..task.n_units()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let epoch_start = params.clone();
        order.shuffle(&mut rng);
        let mut finite = true;
        for batch in order.chunks(cfg.batch_size) {
            let mut units = batch.to_vec();
            units.sort_unstable();
            let seeds: Vec<u64> = units.iter().map(|u| unit_seed(cfg.seed, epoch, *u)).collect();
            let Some(grads) = batch_gradient(task, &params, &units, &seeds)? else {
                continue;
            };
            if grads.iter().any(|g| !g.is_finite()) {
                finite = false;
                break;
            }
            apply_step(&mut params, &grads, cfg, &mut adam);
            if params.iter().any(|p| !p.is_finite()) {
                finite = false;
                break;
            }
            task.set_arrays(&params)?;
        }
        let loss = if finite { task.refresh()? } else { f64::NAN };
        if !loss.is_finite() {
            log::warn!("training diverged in epoch {epoch}; restoring last finite parameters");
            task.set_arrays(&epoch_start)?;
            task.refresh()?;
            report.diverged = Some(epoch);
            break;
        }
        log::info!("epoch {epoch}: mse {loss:.6e}");
        report.mse.push(loss);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(report)
}

/// SDE-RNN mean path over every record of a normalized dataset.
///
/// Each record is cut into windows of `window` grid steps. A window starts
/// from the hidden state reached by the full forward pass at the last
/// refresh, held constant, and contributes two squared errors per observed
/// point: the head output before the update and after it.
pub struct SdeRnnTask {
    pub model: ModelParams,
    pub integration: IntegrationConfig,
    grid: Vec<f64>,
    series: Vec<Vec<Option<f64>>>,
    window: usize,
    starts: Vec<Vec<Matrix>>,
}

impl SdeRnnTask {
    pub fn new(model: ModelParams, dataset: &Dataset, integration: IntegrationConfig, window: usize) -> Result<Self> {
        model.validate()?;
        integration.validate()?;
        if model.input_size() != 1 {
            return Err(Error::Config(format!("model input size {} but records are scalar", model.input_size())));
        }
        if window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        let grid = dataset.union_grid.clone();
        check_grid(&grid)?;
        let mut series = Vec::with_capacity(dataset.records.len());
        for r in &dataset.records {
            if r.is_empty() {
                return Err(Error::Validation(format!("record '{}' is empty", r.id)));
            }
            let slots = align(r, &grid)?;
            series.push(slots.iter().map(|s| s.map(|k| r.values[k])).collect());
        }
        let mut task = SdeRnnTask {
            model,
            integration,
            grid,
            series,
            window,
            starts: Vec::new(),
        };
        task.refresh()?;
        Ok(task)
    }

    fn windows_per_record(&self) -> usize {
        self.grid.len().div_ceil(self.window)
    }

    fn path<'a, G: Graph>(&'a self, vars: &'a ModelVars<G::Value>) -> MeanPath<'a, G> {
        MeanPath {
            vars,
            drift_net: &self.model.sde.drift,
            time_scale: self.model.time_scale,
            cfg: self.integration,
        }
    }

    /// Runs grid indices `range` from hidden state `h`, accumulating the loss.
    fn run<G: Graph>(
        &self,
        g: &mut G,
        path: &MeanPath<'_, G>,
        record: usize,
        range: std::ops::Range<usize>,
        mut h: G::Value,
        mut on_start: impl FnMut(usize, &G::Value),
    ) -> Result<Option<(G::Value, usize)>> {
        let mut sse: Option<G::Value> = None;
        let mut count = 0;
        for i in range {
            on_start(i, &h);
            if i > 0 {
                h = path.propagate(g, &h, self.grid[i - 1], self.grid[i])?;
            }
            if let Some(x) = self.series[record][i] {
                let target = g.constant(Matrix::col(&[x]));
                let prior = path.output(g, &h)?;
                h = path.update(g, &h, x)?;
                let post = path.output(g, &h)?;
                for y in [prior, post] {
                    let d = g.sub(&y, &target)?;
                    let sq = g.hadamard(&d, &d)?;
                    sse = Some(match sse {
                        None => sq,
                        Some(acc) => g.add(&acc, &sq)?,
                    });
                    count += 1;
                }
            }
        }
        Ok(sse.map(|s| (s, count)))
    }
}

impl Trainable for SdeRnnTask {
    fn arrays(&self) -> Vec<Matrix> {
        self.model.trainable_arrays()
    }

    fn set_arrays(&mut self, arrays: &[Matrix]) -> Result<()> {
        self.model.set_trainable_arrays(arrays)
    }

    fn n_units(&self) -> usize {
        self.series.len() * self.windows_per_record()
    }

    fn refresh(&mut self) -> Result<f64> {
        let vars = ModelVars::from_arrays(&self.model.trainable_arrays())?;
        let path = self.path::<Eager>(&vars);
        let m = self.model.hidden_size();
        let mut g = Eager;
        let (mut sse, mut count) = (0.0, 0);
        let mut starts = Vec::with_capacity(self.series.len());
        for r in 0..self.series.len() {
            let mut record_starts = Vec::with_capacity(self.windows_per_record());
            let window = self.window;
            let out = self.run(&mut g, &path, r, 0..self.grid.len(), Matrix::zeros(m, 1), |i, h| {
                if i % window == 0 {
                    record_starts.push(h.clone());
                }
            })?;
            if let Some((s, n)) = out {
                sse += s[(0, 0)];
                count += n;
            }
            starts.push(record_starts);
        }
        self.starts = starts;
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        Ok(sse / count as f64)
    }

    fn unit_loss(&self, tape: &mut Tape, params: &[Var], unit: usize, _seed: u64) -> Result<Option<UnitLoss>> {
        let per = self.windows_per_record();
        let (record, w) = (unit / per, unit % per);
        let vars = ModelVars::from_arrays(params)?;
        let path = self.path::<Tape>(&vars);
        let h = tape.constant(self.starts[record][w].clone());
        let lo = w * self.window;
        let hi = (lo + self.window).min(self.grid.len());
        let out = self.run(tape, &path, record, lo..hi, h, |_, _| {})?;
        Ok(out.map(|(sse, count)| UnitLoss { sse, count }))
    }
}

/// Trains an SDE-RNN on a normalized dataset.
pub fn train(
    model: ModelParams,
    dataset: &Dataset,
    integration: IntegrationConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let mut task = SdeRnnTask::new(model, dataset, integration, cfg.window)?;
    let report = fit(&mut task, cfg)?;
    Ok((task.model, report))
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile<T> {
    format_version: u32,
    kind: String,
    #[serde(flatten)]
    body: T,
}

/// Trained SDE-RNN together with the settings needed to run it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeRnnCheckpoint {
    pub hidden_size: usize,
    pub input_size: usize,
    pub sde_width: usize,
    pub integration: IntegrationConfig,
    pub params: ModelParams,
}

impl SdeRnnCheckpoint {
    pub const KIND: &'static str = "sde_rnn";

    pub fn new(params: ModelParams, integration: IntegrationConfig) -> Self {
        SdeRnnCheckpoint {
            hidden_size: params.hidden_size(),
            input_size: params.input_size(),
            sde_width: params.sde.drift.width(),
            integration,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.integration.validate()?;
        if self.hidden_size != self.params.hidden_size() || self.input_size != self.params.input_size() {
            return Err(Error::Config("checkpoint dimensions disagree with its parameters".into()));
        }
        Ok(())
    }
}

pub fn checkpoint_json<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        body,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_checkpoint<T: Serialize>(path: impl AsRef<Path>, kind: &str, body: &T) -> Result<()> {
    std::fs::write(path, checkpoint_json(kind, body)?)?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile<T> = serde_json::from_str(&text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format {} (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    if file.kind != kind {
        return Err(Error::Config(format!("checkpoint holds a '{}' model, expected '{kind}'", file.kind)));
    }
    Ok(file.body)
}
