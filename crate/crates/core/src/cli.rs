//! `sdernn` command line: synth, train, impute, compare.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_csv, load_truth_csv, normalize, synthesize, write_csv, write_truth_csv, Dataset, DatasetManifest, NoiseModel,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare, train_baseline, BaselineCheckpoint, BaselineConfig, BaselineParams, CompareConfig, Imputer,
};
use crate::neural_sde::{IntegrationConfig, Method, DEFAULT_SDE_WIDTH};
use crate::sde_rnn::{impute, ModelParams, DEFAULT_HIDDEN};
use crate::training::{load_checkpoint, save_checkpoint, train, SdeRnnCheckpoint, TrainConfig, TrainReport};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Validation(_)
        | Error::Parse { .. }
        | Error::Alignment { .. }
        | Error::Shape { .. }
        | Error::DegenerateScale(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_IO,
        Error::Divergence { .. } | Error::TrainingDiverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_OTHER,
    }
}

/// Minutes per SDE time unit.
pub const TIME_SCALE: f64 = 1440.0;

#[derive(Debug, Parser)]
#[command(name = "sdernn", version, about = "Irregular time-series imputation with uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic smart-meter / SCADA day.
    Synth(SynthArgs),
    /// Train the SDE-RNN and/or the classic GRU baseline.
    Train(TrainArgs),
    /// Impute every record onto a grid (original units).
    Impute(ImputeArgs),
    /// Score both models at several missing fractions.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub nodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_frac: f64,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ModelChoice {
    Both,
    SdeRnn,
    ClassicGru,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "data/data.csv")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = DEFAULT_SDE_WIDTH)]
    pub sde_width: usize,
    /// Integration step in minutes.
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[arg(long, default_value = "euler")]
    pub method: String,
    /// Grid steps per truncated-backpropagation window.
    #[arg(long, default_value_t = 60)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModelChoice::Both)]
    pub model: ModelChoice,
    #[arg(long, default_value = "runs/sde_rnn.json")]
    pub out_ckpt: PathBuf,
    #[arg(long, default_value = "runs/classic_gru.json")]
    pub baseline_out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    #[arg(long, default_value_t = 100)]
    pub mc_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum GridChoice {
    Union,
    #[value(name = "1min")]
    OneMinute,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ImputeArgs {
    #[arg(long, default_value = "runs/sde_rnn.json")]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "data/data.csv")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = GridChoice::Union)]
    pub grid: GridChoice,
    #[arg(long, default_value = "runs/imputed.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long, default_value = "runs/sde_rnn.json")]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "runs/classic_gru.json")]
    pub baseline_ckpt: PathBuf,
    #[arg(long, default_value = "data/data.csv")]
    pub data: PathBuf,
    /// Ground truth; defaults to `truth.csv` next to the data file.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.6,0.8")]
    pub missing: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
    /// Seed of the missingness pattern.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the MC-dropout streams.
    #[arg(long, default_value_t = 0)]
    pub mc_seed: u64,
    #[arg(long, default_value = "runs/compare")]
    pub out: PathBuf,
}

/// One line of `run_manifest.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputHash>,
    pub artifacts: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn hash_file(path: &Path) -> Result<InputHash> {
    let bytes = std::fs::read(path)?;
    Ok(InputHash {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

struct Run {
    manifest: RunManifest,
    dir: PathBuf,
}

impl Run {
    fn start<T: Serialize>(command: &str, args: &T, seeds: Vec<u64>, dir: &Path) -> Result<Self> {
        Ok(Run {
            manifest: RunManifest {
                command: command.to_string(),
                config: serde_json::to_value(args)?,
                seeds,
                inputs: Vec::new(),
                artifacts: Vec::new(),
                started_unix: now(),
                finished_unix: 0.0,
                status: "running".into(),
            },
            dir: dir.to_path_buf(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(hash_file(path)?);
        Ok(())
    }

    fn artifact(&mut self, path: &Path) {
        self.manifest.artifacts.push(path.to_path_buf());
    }

    fn finish(mut self, status: &str) -> Result<()> {
        use std::io::Write;
        self.manifest.finished_unix = now();
        self.manifest.status = status.to_string();
        std::fs::create_dir_all(&self.dir)?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("run_manifest.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(&self.manifest)?)?;
        Ok(())
    }
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Impute(a) => cmd_impute(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_nodes: args.nodes,
        noise_frac: args.noise_frac,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let dataset = synthesize(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let mut run = Run::start("synth", args, vec![args.seed], &args.out)?;
    let data = args.out.join("data.csv");
    let truth = args.out.join("truth.csv");
    let manifest = args.out.join("dataset.json");
    write_csv(&dataset, &data)?;
    write_truth_csv(&dataset.truth, &truth)?;
    let noise = NoiseModel {
        meter_frac: args.noise_frac,
        ..NoiseModel::default()
    };
    let described = DatasetManifest::describe(&dataset, Some(cfg), noise);
    std::fs::write(&manifest, serde_json::to_string_pretty(&described)?)?;
    for p in [&data, &truth, &manifest] {
        run.artifact(p);
    }
    log::info!("wrote {} records to {}", dataset.records.len(), args.out.display());
    run.finish("ok")
}

fn load_normalized(path: &Path) -> Result<Dataset> {
    normalize(&load_csv(path, &NoiseModel::default())?)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let method: Method = args.method.parse()?;
    let integration = IntegrationConfig::new(args.dt, method)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        window: args.window,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    if args.hidden == 0 || args.sde_width == 0 {
        return Err(Error::Config("--hidden and --sde-width must be positive".into()));
    }
    let dataset = load_normalized(&args.data)?;
    let mut run = Run::start("train", args, vec![args.seed], &dir_of(&args.out_ckpt))?;
    run.input(&args.data)?;

    let mut diverged = None;
    if matches!(args.model, ModelChoice::Both | ModelChoice::SdeRnn) {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let model = ModelParams::random(args.hidden, 1, args.sde_width, TIME_SCALE, &mut rng);
        let (model, report) = train(model, &dataset, integration, &cfg)?;
        let ckpt = SdeRnnCheckpoint::new(model, integration);
        diverged = diverged.or(report.diverged);
        write_model(&mut run, &args.out_ckpt, SdeRnnCheckpoint::KIND, &ckpt, &report)?;
    }
    if matches!(args.model, ModelChoice::Both | ModelChoice::ClassicGru) {
        let bcfg = BaselineConfig {
            dropout_rate: args.dropout,
            mc_samples: args.mc_samples,
            hidden: args.hidden,
            ..BaselineConfig::default()
        };
        bcfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0xBA5E);
        let params = BaselineParams::random(&bcfg, TIME_SCALE, &mut rng);
        let (params, report) = train_baseline(params, &dataset, &bcfg, &cfg)?;
        diverged = diverged.or(report.diverged);
        let ckpt = BaselineCheckpoint { config: bcfg, params };
        write_model(&mut run, &args.baseline_out, BaselineCheckpoint::KIND, &ckpt, &report)?;
    }
    match diverged {
        Some(epoch) => {
            run.finish("diverged")?;
            Err(Error::TrainingDiverged { epoch })
        }
        None => run.finish("ok"),
    }
}

fn report_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    ckpt.with_file_name(format!("{stem}_report.csv"))
}

fn write_model<T: Serialize>(run: &mut Run, path: &Path, kind: &str, ckpt: &T, report: &TrainReport) -> Result<()> {
    ensure_parent(path)?;
    save_checkpoint(path, kind, ckpt)?;
    let rp = report_path(path);
    report.write_csv(&rp)?;
    run.artifact(path);
    run.artifact(&rp);
    log::info!("{kind}: mse {:.4e} -> {:.4e}", report.mse[0], report.final_mse());
    Ok(())
}

fn one_minute_grid(dataset: &Dataset) -> Vec<f64> {
    match (dataset.union_grid.first(), dataset.union_grid.last()) {
        (Some(lo), Some(hi)) => {
            let start = lo.floor();
            let mut grid: Vec<f64> = (0..=((hi.ceil() - start) as usize)).map(|k| start + k as f64).collect();
            grid.extend(dataset.union_grid.iter().copied());
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            grid
        }
        _ => Vec::new(),
    }
}

pub fn cmd_impute(args: &ImputeArgs) -> Result<()> {
    let ckpt: SdeRnnCheckpoint = load_checkpoint(&args.ckpt, SdeRnnCheckpoint::KIND)?;
    ckpt.validate()?;
    if ckpt.input_size != 1 {
        return Err(Error::Config(format!("checkpoint expects input size {}, records are scalar", ckpt.input_size)));
    }
    let dataset = load_normalized(&args.data)?;
    let mut run = Run::start("impute", args, Vec::new(), &dir_of(&args.out))?;
    run.input(&args.ckpt)?;
    run.input(&args.data)?;
    let grid = match args.grid {
        GridChoice::Union => dataset.union_grid.clone(),
        GridChoice::OneMinute => one_minute_grid(&dataset),
    };
    ensure_parent(&args.out)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["record_id", "time", "mean", "variance", "observed"])?;
    let scales = dataset.normalization.clone().unwrap_or_default();
    for (record, scale) in dataset.records.iter().zip(&scales) {
        let out = impute(&ckpt.params, record, &grid, &ckpt.integration)?;
        for i in 0..out.len() {
            w.write_record([
                record.id.clone(),
                out.times[i].to_string(),
                scale.invert(out.mean(i)).to_string(),
                scale.invert_variance(out.variance(i)).to_string(),
                if out.observed_mask[i] { "1" } else { "0" }.to_string(),
            ])?;
        }
    }
    w.flush()?;
    run.artifact(&args.out);
    run.finish("ok")
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let sde: SdeRnnCheckpoint = load_checkpoint(&args.ckpt, SdeRnnCheckpoint::KIND)?;
    let gru: BaselineCheckpoint = load_checkpoint(&args.baseline_ckpt, BaselineCheckpoint::KIND)?;
    let truth_path = args.truth.clone().unwrap_or_else(|| args.data.with_file_name("truth.csv"));
    let raw = load_csv(&args.data, &NoiseModel::default())?.with_truth(load_truth_csv(&truth_path)?);
    let dataset = normalize(&raw)?;
    let cfg = CompareConfig {
        missing_fractions: args.missing.clone(),
        n_bins: args.bins,
        missing_seed: args.seed,
    };
    std::fs::create_dir_all(&args.out)?;
    let mut run = Run::start("compare", args, vec![args.seed, args.mc_seed], &args.out)?;
    for p in [&args.ckpt, &args.baseline_ckpt, &args.data, &truth_path] {
        run.input(p)?;
    }
    let models = vec![
        ("sde_rnn".to_string(), Imputer::SdeRnn(&sde)),
        ("classic_gru".to_string(), Imputer::ClassicGru { ckpt: &gru, seed: args.mc_seed }),
    ];
    let result = compare(&models, &dataset, &cfg)?;

    let table = args.out.join("comparison.csv");
    result.write_csv(&table)?;
    run.artifact(&table);
    for row in &result.rows {
        let p = args.out.join(format!("calibration_{}_{}.csv", row.model, row.missing_fraction));
        row.calibration.write_csv(&p)?;
        run.artifact(&p);
    }
    for plot in &result.plots {
        let p = args.out.join(format!(
            "plot_{}_{}_{}.csv",
            plot.model,
            plot.missing_fraction,
            sanitize(&plot.record_id)
        ));
        plot.write_csv(&p)?;
        run.artifact(&p);
    }
    println!("{}", result.table());
    run.finish("ok")
}
