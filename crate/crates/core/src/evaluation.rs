//! Calibration (ENCE), the classic GRU + MC-dropout baseline, and the
//! missing-fraction comparison table.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{inject_missing, Dataset, MinMax, Record};
use crate::error::{Error, Result};
use crate::gru::{gru_cell, GruParams, GruWeights};
use crate::numcore::{Eager, Graph, Matrix, Tape, Var};
use crate::sde_rnn::{align, check_grid, impute};
use crate::training::{fit, SdeRnnCheckpoint, TrainConfig, TrainReport, Trainable, UnitLoss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    /// Half-open range of positions in the σ-sorted order.
    pub start: usize,
    pub end: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub mvar: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_bins: usize,
    pub bins: Vec<CalibrationBin>,
    pub ence: f64,
}

impl CalibrationReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin", "sigma_min", "sigma_max", "mvar", "rmse"])?;
        for (j, b) in self.bins.iter().enumerate() {
            w.write_record([
                j.to_string(),
                b.sigma_min.to_string(),
                b.sigma_max.to_string(),
                b.mvar.to_string(),
                b.rmse.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expected normalized calibration error over `n_bins` σ-sorted bins.
///
/// Bins hold `T / n_bins` consecutive points; any remainder joins the last bin.
pub fn ence(pred_mean: &[f64], pred_var: &[f64], truth: &[f64], n_bins: usize) -> Result<CalibrationReport> {
    let t = pred_mean.len();
    if pred_var.len() != t || truth.len() != t {
        return Err(Error::shape("ence", (t, 1), (pred_var.len(), truth.len())));
    }
    if n_bins == 0 || n_bins > t {
        return Err(Error::Validation(format!("cannot split {t} points into {n_bins} bins")));
    }
    if let Some(v) = pred_var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!("predicted variance must be positive, got {v}")));
    }
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|a, b| pred_var[*a].total_cmp(&pred_var[*b]).then(a.cmp(b)));

    let size = t / n_bins;
    let mut bins = Vec::with_capacity(n_bins);
    let mut total = 0.0;
    for j in 0..n_bins {
        let start = j * size;
        let end = if j + 1 == n_bins { t } else { start + size };
        let idx = &order[start..end];
        let n = idx.len() as f64;
        let mvar = (idx.iter().map(|i| pred_var[*i]).sum::<f64>() / n).sqrt();
        let rmse = (idx.iter().map(|i| (pred_mean[*i] - truth[*i]).powi(2)).sum::<f64>() / n).sqrt();
        total += (mvar - rmse).abs() / mvar;
        bins.push(CalibrationBin {
            start,
            end,
            sigma_min: pred_var[idx[0]].sqrt(),
            sigma_max: pred_var[idx[idx.len() - 1]].sqrt(),
            mvar,
            rmse,
        });
    }
    Ok(CalibrationReport {
        n_bins,
        bins,
        ence: (total / n_bins as f64).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub dropout_rate: f64,
    pub mc_samples: usize,
    pub hidden: usize,
    pub head_width: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            dropout_rate: 0.3,
            mc_samples: 100,
            hidden: 5,
            head_width: 100,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_rate >= 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if self.mc_samples < 2 {
            return Err(Error::Config("at least two MC samples are needed for a variance".into()));
        }
        if self.hidden == 0 || self.head_width == 0 {
            return Err(Error::Config("baseline layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// GRU over `(value * mask, time, mask)` with a `Linear -> tanh -> dropout -> Linear` head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub gru: GruParams,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub time_scale: f64,
}

impl BaselineParams {
    pub fn random<R: Rng + ?Sized>(cfg: &BaselineConfig, time_scale: f64, rng: &mut R) -> Self {
        let gru = GruParams::random(cfg.hidden, 3, rng);
        let mut uniform = |r: usize, c: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix::from_vec(r, c, data).expect("finite uniform draws")
        };
        BaselineParams {
            gru,
            w1: uniform(cfg.head_width, cfg.hidden, cfg.hidden),
            b1: uniform(cfg.head_width, 1, cfg.hidden),
            w2: uniform(1, cfg.head_width, cfg.head_width),
            b2: uniform(1, 1, cfg.head_width),
            time_scale,
        }
    }

    pub fn arrays(&self) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = self.gru.iter().cloned().collect();
        out.extend([self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]);
        out
    }

    pub fn set_arrays(&mut self, arrays: &[Matrix]) -> Result<()> {
        if arrays.len() != 16 {
            return Err(Error::Contract(format!("expected 16 baseline arrays, got {}", arrays.len())));
        }
        for (new, old) in arrays.iter().zip(self.arrays()) {
            if new.shape() != old.shape() {
                return Err(Error::shape("BaselineParams", old.shape(), new.shape()));
            }
        }
        self.gru = GruWeights::from_iter(arrays[..12].iter().cloned()).expect("twelve GRU arrays");
        self.w1 = arrays[12].clone();
        self.b1 = arrays[13].clone();
        self.w2 = arrays[14].clone();
        self.b2 = arrays[15].clone();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gru.validate()?;
        if self.gru.input_size() != 3 {
            return Err(Error::Config(format!("baseline GRU needs 3 inputs, has {}", self.gru.input_size())));
        }
        let (m, w) = (self.gru.hidden_size(), self.w1.rows());
        for (arr, shape) in [(&self.w1, (w, m)), (&self.b1, (w, 1)), (&self.w2, (1, w)), (&self.b2, (1, 1))] {
            if arr.shape() != shape {
                return Err(Error::shape("BaselineParams head", shape, arr.shape()));
            }
        }
        if !(self.time_scale > 0.0) {
            return Err(Error::Config("time_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Baseline arrays as graph values.
struct BaselineVars<V> {
    gru: GruWeights<V>,
    head: [V; 4],
}

impl<V: Clone> BaselineVars<V> {
    fn from_arrays(a: &[V]) -> Self {
        BaselineVars {
            gru: GruWeights::from_iter(a[..12].iter().cloned()).expect("twelve GRU arrays"),
            head: [a[12].clone(), a[13].clone(), a[14].clone(), a[15].clone()],
        }
    }

    fn step<G: Graph<Value = V>>(&self, g: &mut G, h: &V, input: [f64; 3]) -> Result<V> {
        let x = g.constant(Matrix::col(&input));
        gru_cell(g, &self.gru, h, &x)
    }

    /// Head output; `keep` is the inverted-dropout mask, absent for the deterministic pass.
    fn head<G: Graph<Value = V>>(&self, g: &mut G, h: &V, keep: Option<Matrix>) -> Result<V> {
        let pre = g.affine(&self.head[0], h, &self.head[1])?;
        let mut a = g.tanh(&pre);
        if let Some(mask) = keep {
            let m = g.constant(mask);
            a = g.hadamard(&a, &m)?;
        }
        g.affine(&self.head[2], &a, &self.head[3])
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, width: usize, rate: f64) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data: Vec<f64> = (0..width).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    Matrix::col(&data)
}

fn grid_inputs(grid: &[f64], series: &[Option<f64>], time_scale: f64, i: usize) -> ([f64; 3], Option<[f64; 3]>) {
    let t = grid[i] / time_scale;
    let masked = [0.0, t, 0.0];
    (masked, series[i].map(|x| [x, t, 1.0]))
}

/// Baseline training task; windows as for the SDE-RNN, with fresh dropout masks per unit.
pub struct BaselineTask {
    pub params: BaselineParams,
    dropout_rate: f64,
    grid: Vec<f64>,
    series: Vec<Vec<Option<f64>>>,
    window: usize,
    starts: Vec<Vec<Matrix>>,
}

impl BaselineTask {
    pub fn new(params: BaselineParams, dataset: &Dataset, dropout_rate: f64, window: usize) -> Result<Self> {
        params.validate()?;
        if window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        let grid = dataset.union_grid.clone();
        check_grid(&grid)?;
        let series = dataset
            .records
            .iter()
            .map(|r| Ok(align(r, &grid)?.iter().map(|s| s.map(|k| r.values[k])).collect()))
            .collect::<Result<Vec<_>>>()?;
        let mut task = BaselineTask {
            params,
            dropout_rate,
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

    #[allow(clippy::too_many_arguments)]
    fn run<G: Graph>(
        &self,
        g: &mut G,
        vars: &BaselineVars<G::Value>,
        record: usize,
        range: std::ops::Range<usize>,
        mut h: G::Value,
        mut rng: Option<ChaCha8Rng>,
        mut on_start: impl FnMut(usize, &G::Value),
    ) -> Result<Option<(G::Value, usize)>> {
        let width = self.params.w1.rows();
        let mut sse: Option<G::Value> = None;
        let mut count = 0;
        for i in range {
            on_start(i, &h);
            let (masked, observed) = grid_inputs(&self.grid, &self.series[record], self.params.time_scale, i);
            match observed {
                None => h = vars.step(g, &h, masked)?,
                Some(input) => {
                    let x = input[0];
                    let target = g.constant(Matrix::col(&[x]));
                    let prior_h = vars.step(g, &h, masked)?;
                    let mut keep = || rng.as_mut().map(|r| dropout_mask(r, width, self.dropout_rate));
                    let prior = vars.head(g, &prior_h, keep())?;
                    h = vars.step(g, &h, input)?;
                    let post = vars.head(g, &h, keep())?;
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
        }
        Ok(sse.map(|s| (s, count)))
    }
}

impl Trainable for BaselineTask {
    fn arrays(&self) -> Vec<Matrix> {
        self.params.arrays()
    }

    fn set_arrays(&mut self, arrays: &[Matrix]) -> Result<()> {
        self.params.set_arrays(arrays)
    }

    fn n_units(&self) -> usize {
        self.series.len() * self.windows_per_record()
    }

    fn refresh(&mut self) -> Result<f64> {
        let vars = BaselineVars::from_arrays(&self.params.arrays());
        let m = self.params.gru.hidden_size();
        let (mut sse, mut count) = (0.0, 0);
        let mut starts = Vec::with_capacity(self.series.len());
        for r in 0..self.series.len() {
            let mut record_starts = Vec::new();
            let window = self.window;
            let out = self.run(&mut Eager, &vars, r, 0..self.grid.len(), Matrix::zeros(m, 1), None, |i, h| {
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

    fn unit_loss(&self, tape: &mut Tape, params: &[Var], unit: usize, seed: u64) -> Result<Option<UnitLoss>> {
        let per = self.windows_per_record();
        let (record, w) = (unit / per, unit % per);
        let vars = BaselineVars::from_arrays(params);
        let h = tape.constant(self.starts[record][w].clone());
        let lo = w * self.window;
        let hi = (lo + self.window).min(self.grid.len());
        let rng = (self.dropout_rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed));
        let out = self.run(tape, &vars, record, lo..hi, h, rng, |_, _| {})?;
        Ok(out.map(|(sse, count)| UnitLoss { sse, count }))
    }
}

/// Trained baseline plus the settings used for MC-dropout inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCheckpoint {
    pub config: BaselineConfig,
    pub params: BaselineParams,
}

impl BaselineCheckpoint {
    pub const KIND: &'static str = "classic_gru";
}

pub fn train_baseline(
    params: BaselineParams,
    dataset: &Dataset,
    cfg: &BaselineConfig,
    train_cfg: &TrainConfig,
) -> Result<(BaselineParams, TrainReport)> {
    cfg.validate()?;
    train_cfg.validate()?;
    let mut task = BaselineTask::new(params, dataset, cfg.dropout_rate, train_cfg.window)?;
    let report = fit(&mut task, train_cfg)?;
    Ok((task.params, report))
}

/// Per-grid-point MC-dropout mean and unbiased sample variance.
///
/// The recurrent path carries no dropout, so it runs once; each sample then
/// draws its head masks from its own seeded stream.
pub fn mc_dropout_predict(ckpt: &BaselineCheckpoint, record: &Record, grid: &[f64], seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    ckpt.config.validate()?;
    ckpt.params.validate()?;
    check_grid(grid)?;
    let slots = align(record, grid)?;
    let series: Vec<Option<f64>> = slots.iter().map(|s| s.map(|k| record.values[k])).collect();
    let p = &ckpt.params;
    let vars = BaselineVars::from_arrays(&p.arrays());
    let mut g = Eager;

    let mut h = Matrix::zeros(p.gru.hidden_size(), 1);
    let mut hidden = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (masked, observed) = grid_inputs(grid, &series, p.time_scale, i);
        h = vars.step(&mut g, &h, observed.unwrap_or(masked))?;
        hidden.push(h.clone());
    }

    let n = ckpt.config.mc_samples;
    let width = p.w1.rows();
    let mut sum = vec![0.0; grid.len()];
    let mut sum_sq = vec![0.0; grid.len()];
    let samples: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            hidden
                .iter()
                .map(|h| {
                    let keep = dropout_mask(&mut rng, width, ckpt.config.dropout_rate);
                    Ok(vars.head(&mut g, h, Some(keep))?[(0, 0)])
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    for sample in &samples {
        for (i, y) in sample.iter().enumerate() {
            sum[i] += y;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    for sample in &samples {
        for (i, y) in sample.iter().enumerate() {
            sum_sq[i] += (y - mean[i]).powi(2);
        }
    }
    let var = sum_sq.iter().map(|s| s / (n - 1) as f64).collect();
    Ok((mean, var))
}

/// A trained model that yields a predictive mean and variance on a grid.
pub enum Imputer<'a> {
    SdeRnn(&'a SdeRnnCheckpoint),
    ClassicGru { ckpt: &'a BaselineCheckpoint, seed: u64 },
}

impl Imputer<'_> {
    pub fn predict(&self, record: &Record, grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Imputer::SdeRnn(ckpt) => {
                ckpt.validate()?;
                let out = impute(&ckpt.params, record, grid, &ckpt.integration)?;
                Ok(((0..out.len()).map(|i| out.mean(i)).collect(), (0..out.len()).map(|i| out.variance(i)).collect()))
            }
            Imputer::ClassicGru { ckpt, seed } => mc_dropout_predict(ckpt, record, grid, *seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub missing_fractions: Vec<f64>,
    pub n_bins: usize,
    pub missing_seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            missing_fractions: vec![0.4, 0.6, 0.8],
            n_bins: 5,
            missing_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub missing_fraction: f64,
    pub mse: f64,
    pub ence: f64,
    pub calibration: CalibrationReport,
}

/// One record's imputation in original units, for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub model: String,
    pub missing_fraction: f64,
    pub record_id: String,
    pub time: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PlotSeries {
    /// `time,truth,mean,lo,hi` with a ±2σ band.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "truth", "mean", "lo", "hi"])?;
        for i in 0..self.time.len() {
            let (m, s) = (self.mean[i], self.std[i]);
            w.write_record([
                self.time[i].to_string(),
                self.truth[i].to_string(),
                m.to_string(),
                (m - 2.0 * s).to_string(),
                (m + 2.0 * s).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub plots: Vec<PlotSeries>,
}

impl Comparison {
    /// `model,missing_fraction,mse,ence`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "missing_fraction", "mse", "ence"])?;
        for r in &self.rows {
            w.write_record([r.model.clone(), r.missing_fraction.to_string(), r.mse.to_string(), r.ence.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:>8} {:>12} {:>10}\n", "model", "missing", "mse", "ence");
        for r in &self.rows {
            s.push_str(&format!("{:<14} {:>7.0}% {:>12.4e} {:>10.4}\n", r.model, 100.0 * r.missing_fraction, r.mse, r.ence));
        }
        s
    }
}

/// Scores every model on held-out grid instants of a normalized dataset with truth.
///
/// MSE and ENCE pool all records' held-out instants, in normalized units.
pub fn compare(models: &[(String, Imputer<'_>)], dataset: &Dataset, cfg: &CompareConfig) -> Result<Comparison> {
    let scales = dataset
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Contract("compare expects a normalized dataset".into()))?;
    if dataset.truth.is_empty() {
        return Err(Error::Contract("compare needs ground truth".into()));
    }
    let mut rows = Vec::new();
    let mut plots = Vec::new();
    for &fraction in &cfg.missing_fractions {
        let injected = inject_missing(dataset, fraction, cfg.missing_seed)?;
        let grid = &injected.dataset.union_grid;
        let held: Vec<bool> = {
            let mut flags = vec![false; grid.len()];
            let mut j = 0;
            for (i, t) in grid.iter().enumerate() {
                if j < injected.held_out.len() && injected.held_out[j] == *t {
                    flags[i] = true;
                    j += 1;
                }
            }
            flags
        };
        for (name, model) in models {
            let (mut means, mut vars, mut truths) = (Vec::new(), Vec::new(), Vec::new());
            for (record, scale) in injected.dataset.records.iter().zip(scales) {
                let Some(truth) = dataset.truth.get(&record.id) else { continue };
                let (mean, var) = model.predict(record, grid)?;
                let truth_on_grid: Vec<Option<f64>> = grid.iter().map(|t| truth.at(*t)).collect();
                for i in 0..grid.len() {
                    if let (true, Some(y)) = (held[i], truth_on_grid[i]) {
                        means.push(mean[i]);
                        vars.push(var[i]);
                        truths.push(y);
                    }
                }
                plots.push(plot_series(name, fraction, record, grid, &truth_on_grid, &mean, &var, scale));
            }
            let mask = vec![true; means.len()];
            let mse = crate::training::mse(&means, &truths, &mask)?;
            let calibration = ence(&means, &vars, &truths, cfg.n_bins)?;
            rows.push(ComparisonRow {
                model: name.clone(),
                missing_fraction: fraction,
                mse,
                ence: calibration.ence,
                calibration,
            });
        }
    }
    Ok(Comparison { rows, plots })
}

#[allow(clippy::too_many_arguments)]
fn plot_series(
    model: &str,
    fraction: f64,
    record: &Record,
    grid: &[f64],
    truth: &[Option<f64>],
    mean: &[f64],
    var: &[f64],
    scale: &MinMax,
) -> PlotSeries {
    PlotSeries {
        model: model.to_string(),
        missing_fraction: fraction,
        record_id: record.id.clone(),
        time: grid.to_vec(),
        truth: truth.iter().map(|v| v.map_or(f64::NAN, |v| scale.invert(v))).collect(),
        mean: mean.iter().map(|m| scale.invert(*m)).collect(),
        std: var.iter().map(|v| scale.invert_std(v.max(0.0).sqrt())).collect(),
    }
}
