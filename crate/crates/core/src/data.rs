//! Records, CSV ingestion, min–max normalization, the union time grid,
//! missingness injection and a synthetic smart-meter / SCADA generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde_rnn::grid_index;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasurementType {
    P,
    Q,
    V,
}

impl fmt::Display for MeasurementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MeasurementType::P => "P",
            MeasurementType::Q => "Q",
            MeasurementType::V => "V",
        };
        f.write_str(s)
    }
}

impl FromStr for MeasurementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "P" | "p" => Ok(MeasurementType::P),
            "Q" | "q" => Ok(MeasurementType::Q),
            "V" | "v" => Ok(MeasurementType::V),
            other => Err(Error::Validation(format!("unknown measurement type '{other}'"))),
        }
    }
}

/// One sensor channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub measurement_type: MeasurementType,
    pub values: Vec<f64>,
    pub times: Vec<f64>,
    pub mask: Vec<bool>,
    /// Standard deviation of the additive measurement noise, per observation.
    pub noise_sigma: Vec<f64>,
}

impl Record {
    pub fn new(
        id: String,
        measurement_type: MeasurementType,
        values: Vec<f64>,
        times: Vec<f64>,
        mask: Vec<bool>,
        noise_sigma: Vec<f64>,
    ) -> Result<Self> {
        let r = Record {
            id,
            measurement_type,
            values,
            times,
            mask,
            noise_sigma,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.values.len() != n || self.mask.len() != n || self.noise_sigma.len() != n {
            return Err(Error::Validation(format!(
                "record '{}': values/times/mask/noise_sigma lengths differ ({}, {}, {}, {})",
                self.id,
                self.values.len(),
                n,
                self.mask.len(),
                self.noise_sigma.len()
            )));
        }
        if let Some(w) = self.times.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::Validation(format!(
                "record '{}': times must be strictly increasing ({} then {})",
                self.id, w[0], w[1]
            )));
        }
        if self.times.iter().chain(&self.values).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("record '{}' has non-finite entries", self.id)));
        }
        if self.noise_sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!("record '{}' has invalid noise std", self.id)));
        }
        Ok(())
    }
}

/// Default per-observation noise std, as a fraction of `|value|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Smart-meter channels (P, Q).
    pub meter_frac: f64,
    /// SCADA channels (V).
    pub scada_frac: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            meter_frac: 0.1,
            scada_frac: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn sigma(&self, kind: MeasurementType, value: f64) -> f64 {
        match kind {
            MeasurementType::P | MeasurementType::Q => self.meter_frac * value.abs(),
            MeasurementType::V => self.scada_frac * value.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / self.range()
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.range() + self.min
    }

    pub fn invert_std(&self, s: f64) -> f64 {
        s * self.range()
    }

    pub fn invert_variance(&self, var: f64) -> f64 {
        var * self.range() * self.range()
    }
}

/// Noise-free reference series for one record.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TruthSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TruthSeries {
    pub fn at(&self, t: f64) -> Option<f64> {
        grid_index(&self.times, t).map(|i| self.values[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    /// Sorted, de-duplicated union of every record's times.
    pub union_grid: Vec<f64>,
    /// Per-record scaling, present once the dataset is normalized.
    pub normalization: Option<Vec<MinMax>>,
    pub truth: BTreeMap<String, TruthSeries>,
}

pub fn union_grid(records: &[Record]) -> Vec<f64> {
    let mut all: Vec<f64> = records.iter().flat_map(|r| r.times.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashMap::new();
        for r in &records {
            r.validate()?;
            if seen.insert(r.id.clone(), ()).is_some() {
                return Err(Error::Validation(format!("duplicate record id '{}'", r.id)));
            }
        }
        Ok(Dataset {
            union_grid: union_grid(&records),
            records,
            normalization: None,
            truth: BTreeMap::new(),
        })
    }

    pub fn with_truth(mut self, truth: BTreeMap<String, TruthSeries>) -> Self {
        self.truth = truth;
        self
    }

    pub fn record(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }
}

fn parse_field<T: FromStr>(raw: &str, line: u64, column: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {column} '{raw}'"),
    })
}

/// Reads `record_id,measurement_type,time,value,mask` rows.
pub fn read_csv<R: Read>(reader: R, noise: &NoiseModel) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let expected = ["record_id", "measurement_type", "time", "value", "mask"];
    if header.len() != expected.len() || header.iter().zip(expected).any(|(a, b)| a.trim() != b) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header '{}'", expected.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (MeasurementType, Vec<(f64, f64, bool, u64)>)> = HashMap::new();
    for result in rdr.records() {
        let row = result.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 fields, found {}", row.len()),
            });
        }
        let id = row[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse { line, message: "empty record_id".into() });
        }
        let kind: MeasurementType = row[1]
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("invalid measurement_type '{}'", &row[1]) })?;
        let time: f64 = parse_field(&row[2], line, "time")?;
        let value: f64 = parse_field(&row[3], line, "value")?;
        let mask = match row[4].trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::Parse { line, message: format!("mask must be 0 or 1, got '{other}'") }),
        };
        if !time.is_finite() || !value.is_finite() {
            return Err(Error::Parse { line, message: "non-finite time or value".into() });
        }

        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (kind, Vec::new())
        });
        if entry.0 != kind {
            return Err(Error::Parse {
                line,
                message: format!("record '{id}' changes measurement type"),
            });
        }
        if let Some(&(prev, _, _, prev_line)) = entry.1.last() {
            if time == prev {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate time {time} for record '{id}' (first seen on line {prev_line})"),
                });
            }
            if time < prev {
                return Err(Error::Validation(format!(
                    "line {line}: time {time} of record '{id}' precedes {prev}; times must increase"
                )));
            }
        }
        entry.1.push((time, value, mask, line));
    }

    let records = order
        .into_iter()
        .map(|id| {
            let (kind, rows) = rows.remove(&id).expect("id recorded on insert");
            Record::new(
                id,
                kind,
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| r.0).collect(),
                rows.iter().map(|r| r.2).collect(),
                rows.iter().map(|r| noise.sigma(kind, r.1)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}

pub fn load_csv(path: impl AsRef<Path>, noise: &NoiseModel) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?, noise)
}

pub fn write_csv_to<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["record_id", "measurement_type", "time", "value", "mask"])?;
    for r in &dataset.records {
        let kind = r.measurement_type.to_string();
        for k in 0..r.len() {
            w.write_record([
                r.id.as_str(),
                kind.as_str(),
                &r.times[k].to_string(),
                &r.values[k].to_string(),
                if r.mask[k] { "1" } else { "0" },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(dataset, std::fs::File::create(path)?)
}

/// `record_id,time,value`
pub fn write_truth_csv(truth: &BTreeMap<String, TruthSeries>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["record_id", "time", "value"])?;
    for (id, series) in truth {
        for (t, v) in series.times.iter().zip(&series.values) {
            w.write_record([id.as_str(), &t.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_truth_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, TruthSeries>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, TruthSeries> = BTreeMap::new();
    for result in rdr.records() {
        let row = result?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 3 {
            return Err(Error::Parse { line, message: "expected record_id,time,value".into() });
        }
        let series = out.entry(row[0].trim().to_string()).or_default();
        let t: f64 = parse_field(&row[1], line, "time")?;
        if series.times.last().is_some_and(|prev| t <= *prev) {
            return Err(Error::Parse { line, message: "truth times must increase".into() });
        }
        series.times.push(t);
        series.values.push(parse_field(&row[2], line, "value")?);
    }
    Ok(out)
}

/// Per-record min–max scaling of observed values into `[0, 1]`.
pub fn normalize(dataset: &Dataset) -> Result<Dataset> {
    if dataset.is_normalized() {
        return Err(Error::Contract("dataset is already normalized".into()));
    }
    let mut scales = Vec::with_capacity(dataset.records.len());
    let mut records = Vec::with_capacity(dataset.records.len());
    let mut truth = BTreeMap::new();
    for r in &dataset.records {
        let observed = r.values.iter().zip(&r.mask).filter(|(_, m)| **m).map(|(v, _)| *v);
        let (min, max) = observed.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(max > min) {
            return Err(Error::DegenerateScale(r.id.clone()));
        }
        let s = MinMax { min, max };
        let mut nr = r.clone();
        nr.values = r.values.iter().map(|v| s.apply(*v)).collect();
        nr.noise_sigma = r.noise_sigma.iter().map(|v| v / s.range()).collect();
        if let Some(series) = dataset.truth.get(&r.id) {
            truth.insert(
                r.id.clone(),
                TruthSeries {
                    times: series.times.clone(),
                    values: series.values.iter().map(|v| s.apply(*v)).collect(),
                },
            );
        }
        records.push(nr);
        scales.push(s);
    }
    Ok(Dataset {
        records,
        union_grid: dataset.union_grid.clone(),
        normalization: Some(scales),
        truth,
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(dataset: &Dataset) -> Result<Dataset> {
    let scales = dataset
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Contract("dataset is not normalized".into()))?;
    let mut out = dataset.clone();
    out.normalization = None;
    for (r, s) in out.records.iter_mut().zip(scales) {
        r.values.iter_mut().for_each(|v| *v = s.invert(*v));
        r.noise_sigma.iter_mut().for_each(|v| *v = s.invert_std(*v));
        if let Some(series) = out.truth.get_mut(&r.id) {
            series.values.iter_mut().for_each(|v| *v = s.invert(*v));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub day_minutes: usize,
    pub ami_period: usize,
    pub scada_period: usize,
    pub noise_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 2,
            day_minutes: 1440,
            ami_period: 15,
            scada_period: 1,
            noise_frac: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::Config("n_nodes must be at least 1".into()));
        }
        if self.day_minutes == 0 || self.ami_period == 0 || self.scada_period == 0 {
            return Err(Error::Config("day length and sampling periods must be positive".into()));
        }
        if self.day_minutes % self.ami_period != 0 || self.day_minutes % self.scada_period != 0 {
            return Err(Error::Config("sampling periods must divide day_minutes".into()));
        }
        if !(self.noise_frac >= 0.0 && self.noise_frac.is_finite()) {
            return Err(Error::Config("noise_frac must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Smooth daily load shape for one node, evaluated per minute.
struct LoadProfile {
    scale: f64,
    base: f64,
    residential: f64,
    morning: (f64, f64, f64),
    evening: (f64, f64, f64),
    office: (f64, f64, f64),
    ripples: Vec<(f64, f64, f64)>,
}

impl LoadProfile {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        LoadProfile {
            scale: u(50.0, 150.0),
            base: u(0.3, 0.5),
            residential: u(0.35, 0.85),
            morning: (u(0.4, 0.8), u(6.5, 8.5), u(0.8, 1.4)),
            evening: (u(0.7, 1.2), u(18.0, 20.5), u(1.3, 2.3)),
            office: (u(0.4, 0.8), u(7.5, 9.0), u(16.5, 18.0)),
            ripples: (0..3).map(|_| (u(0.02, 0.05), u(40.0, 180.0), u(0.0, std::f64::consts::TAU))).collect(),
        }
    }

    fn at(&self, minute: f64) -> f64 {
        let hour = minute / 60.0;
        let bump = |(amp, centre, width): (f64, f64, f64)| amp * (-0.5 * ((hour - centre) / width).powi(2)).exp();
        let (office_amp, open, close) = self.office;
        let edge = |x: f64| 1.0 / (1.0 + (-x / 0.4).exp());
        let office = office_amp * edge(hour - open) * edge(close - hour);
        let ripple: f64 = self
            .ripples
            .iter()
            .map(|(amp, period, phase)| amp * (std::f64::consts::TAU * minute / period + phase).sin())
            .sum();
        let shape = self.base
            + self.residential * (bump(self.morning) + bump(self.evening))
            + (1.0 - self.residential) * office
            + ripple;
        self.scale * shape.max(0.05)
    }
}

/// Synthetic day of smart-meter (P, 15-min window means with multiplicative
/// Gaussian noise) and SCADA (V, 1-min, noise-free) records with ground truth.
pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let minutes: Vec<f64> = (0..cfg.day_minutes).map(|m| m as f64).collect();
    let profiles: Vec<LoadProfile> = (0..cfg.n_nodes).map(|_| LoadProfile::random(&mut rng)).collect();
    let loads: Vec<Vec<f64>> = profiles.iter().map(|p| minutes.iter().map(|t| p.at(*t)).collect()).collect();
    let total: Vec<f64> = (0..cfg.day_minutes).map(|i| loads.iter().map(|l| l[i]).sum()).collect();
    let total_peak = total.iter().cloned().fold(f64::MIN, f64::max);

    let noise_model = NoiseModel {
        meter_frac: cfg.noise_frac,
        scada_frac: 0.0,
    };
    let mut records = Vec::new();
    let mut truth = BTreeMap::new();
    for (k, load) in loads.iter().enumerate() {
        let node = k + 1;
        let p_id = format!("node{node}_P");
        let mut times = Vec::new();
        let mut values = Vec::new();
        for start in (0..cfg.day_minutes).step_by(cfg.ami_period) {
            let window = &load[start..start + cfg.ami_period];
            let mean = window.iter().sum::<f64>() / cfg.ami_period as f64;
            let xi: f64 = rng.sample(StandardNormal);
            times.push(start as f64);
            values.push(mean + cfg.noise_frac * mean * xi);
        }
        let sigma = values.iter().map(|v| noise_model.sigma(MeasurementType::P, *v)).collect();
        let mask = vec![true; times.len()];
        records.push(Record::new(p_id.clone(), MeasurementType::P, values, times, mask, sigma)?);
        truth.insert(p_id, TruthSeries { times: minutes.clone(), values: load.clone() });

        let node_peak = load.iter().cloned().fold(f64::MIN, f64::max);
        let voltage: Vec<f64> = load
            .iter()
            .zip(&total)
            .map(|(p, tot)| 1.0 - 0.03 * p / node_peak - 0.02 * tot / total_peak)
            .collect();
        let v_id = format!("node{node}_V");
        let v_times: Vec<f64> = (0..cfg.day_minutes).step_by(cfg.scada_period).map(|m| m as f64).collect();
        let v_values: Vec<f64> = v_times.iter().map(|t| voltage[*t as usize]).collect();
        let v_sigma = v_values.iter().map(|v| noise_model.sigma(MeasurementType::V, *v)).collect();
        let v_mask = vec![true; v_times.len()];
        records.push(Record::new(v_id.clone(), MeasurementType::V, v_values, v_times, v_mask, v_sigma)?);
        truth.insert(v_id, TruthSeries { times: minutes.clone(), values: voltage });
    }
    Ok(Dataset::new(records)?.with_truth(truth))
}

/// A dataset with injected missingness and the grid instants that were hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingInjection {
    pub dataset: Dataset,
    /// Held-out grid instants, ascending.
    pub held_out: Vec<f64>,
}

/// Hides a seeded uniform sample of `round(fraction * |grid|)` grid instants in every record.
pub fn inject_missing(dataset: &Dataset, fraction: f64, seed: u64) -> Result<MissingInjection> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("missing fraction must lie in [0, 1), got {fraction}")));
    }
    let n = dataset.union_grid.len();
    let k = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let held_out: Vec<f64> = picked.iter().map(|i| dataset.union_grid[*i]).collect();

    let mut out = dataset.clone();
    for r in &mut out.records {
        for (t, m) in r.times.iter().zip(r.mask.iter_mut()) {
            if grid_index(&held_out, *t).is_some() {
                *m = false;
            }
        }
    }
    Ok(MissingInjection { dataset: out, held_out })
}

/// Reproducibility record written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: Option<SynthConfig>,
    pub noise_model: NoiseModel,
    pub records: Vec<RecordSummary>,
    pub union_grid_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub id: String,
    pub measurement_type: MeasurementType,
    pub n_obs: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl DatasetManifest {
    pub fn describe(dataset: &Dataset, generator: Option<SynthConfig>, noise_model: NoiseModel) -> Self {
        let records = dataset
            .records
            .iter()
            .map(|r| {
                let observed = r.values.iter().zip(&r.mask).filter(|(_, m)| **m).map(|(v, _)| *v);
                let (lo, hi) = observed.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                RecordSummary {
                    id: r.id.clone(),
                    measurement_type: r.measurement_type,
                    n_obs: r.observed_count(),
                    min: lo.is_finite().then_some(lo),
                    max: hi.is_finite().then_some(hi),
                }
            })
            .collect();
        DatasetManifest {
            format_version: 1,
            generator,
            noise_model,
            records,
            union_grid_len: dataset.union_grid.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "record_id,measurement_type,time,value,mask\n\
        a,P,0,10,1\n\
        a,P,15,20,1\n\
        a,P,30,30,1\n";

    #[test]
    fn parses_single_record() {
        let ds = read_csv(FIXTURE.as_bytes(), &NoiseModel::default()).unwrap();
        assert_eq!(ds.records.len(), 1);
        let r = &ds.records[0];
        assert_eq!(r.len(), 3);
        assert_eq!(r.measurement_type, MeasurementType::P);
        assert!((r.noise_sigma[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_time_names_line() {
        let text = "record_id,measurement_type,time,value,mask\na,P,0,1,1\na,P,0,2,1\n";
        match read_csv(text.as_bytes(), &NoiseModel::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn decreasing_time_is_validation_error() {
        let text = "record_id,measurement_type,time,value,mask\na,P,5,1,1\na,P,0,2,1\n";
        assert!(matches!(read_csv(text.as_bytes(), &NoiseModel::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_rows() {
        for bad in [
            "record_id,measurement_type,time,value,mask\na,P,x,1,1\n",
            "record_id,measurement_type,time,value,mask\na,W,0,1,1\n",
            "record_id,measurement_type,time,value,mask\na,P,0,1,2\n",
            "id,type,time,value,mask\na,P,0,1,1\n",
        ] {
            assert!(matches!(read_csv(bad.as_bytes(), &NoiseModel::default()), Err(Error::Parse { .. })), "{bad}");
        }
    }

    #[test]
    fn union_of_two_records() {
        let text = "record_id,measurement_type,time,value,mask\na,P,0,1,1\na,P,15,2,1\nb,V,0,1,1\nb,V,1,1.01,1\n";
        let ds = read_csv(text.as_bytes(), &NoiseModel::default()).unwrap();
        assert_eq!(ds.union_grid, vec![0.0, 1.0, 15.0]);
    }

    #[test]
    fn min_max_examples() {
        let ds = read_csv(FIXTURE.as_bytes(), &NoiseModel::default()).unwrap();
        let n = normalize(&ds).unwrap();
        assert_eq!(n.records[0].values, vec![0.0, 0.5, 1.0]);
        let back = denormalize(&n).unwrap();
        for (a, b) in back.records[0].values.iter().zip(&ds.records[0].values) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = MinMax { min: 0.0, max: 50.0 };
        assert!((s.invert_variance(0.01) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn constant_record_is_degenerate() {
        let text = "record_id,measurement_type,time,value,mask\na,P,0,3,1\na,P,1,3,1\n";
        let ds = read_csv(text.as_bytes(), &NoiseModel::default()).unwrap();
        assert!(matches!(normalize(&ds), Err(Error::DegenerateScale(_))));
    }

    #[test]
    fn synth_shapes_and_determinism() {
        let cfg = SynthConfig { seed: 7, ..SynthConfig::default() };
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 4);
        assert_eq!(a.records[0].len(), 96);
        assert_eq!(a.records[1].len(), 1440);
        assert_eq!(a.union_grid.len(), 1440);
    }

    #[test]
    fn noiseless_meter_values_are_window_means() {
        let cfg = SynthConfig { noise_frac: 0.0, seed: 3, ..SynthConfig::default() };
        let ds = synthesize(&cfg).unwrap();
        let r = &ds.records[0];
        let truth = &ds.truth[&r.id];
        for (k, t) in r.times.iter().enumerate() {
            let start = *t as usize;
            let mean = truth.values[start..start + 15].iter().sum::<f64>() / 15.0;
            assert!((r.values[k] - mean).abs() < 1e-9);
        }
        assert!(r.noise_sigma.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn missing_injection_counts() {
        let ds = synthesize(&SynthConfig::default()).unwrap();
        let none = inject_missing(&ds, 0.0, 1).unwrap();
        assert_eq!(none.dataset, ds);
        let some = inject_missing(&ds, 0.4, 1).unwrap();
        assert_eq!(some.held_out.len(), 576);
        let scada = &some.dataset.records[1];
        assert_eq!(scada.mask.iter().filter(|m| !**m).count(), 576);
        assert_eq!(inject_missing(&ds, 0.4, 1).unwrap(), some);
        assert!(inject_missing(&ds, 1.0, 1).is_err());
    }
}
