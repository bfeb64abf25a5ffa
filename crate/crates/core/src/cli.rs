//! Command-line front end: argument parsing, experiment grids and output files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::conditionals::{HyperParams, ModelKind};
use crate::error::{Error, ErrorKind, Result};
use crate::evaluate::{
    self, holdout_experiment, median, noise_experiment, trace_w_mean, trace_w_sparsity, ExperimentReport,
    ExperimentSettings, RepeatSeeds,
};
use crate::gibbs::{ResidualStrategy, RunSchedule};
use crate::ingest::{self, CsvOptions, DatasetRecipe, SynthSpec};
use crate::matrix::ObservedMatrix;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "BNMF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bnmf", version, about = "Bayesian nonnegative matrix factorisation by Gibbs sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and write its trace.
    Fit(FitArgs),
    /// Predict held-out entries over a grid of models, ranks and fractions.
    Holdout(HoldoutArgs),
    /// Fit fully observed data over a grid of ranks and record convergence.
    Sweep(SweepArgs),
    /// Holdout prediction under increasing additive noise.
    Noise(NoiseArgs),
    /// Generate data from the exponential-prior model.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SamplerArgs {
    /// Number of Gibbs sweeps.
    #[arg(long = "t", default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 300)]
    pub burn_in: usize,
    /// Number of trailing iterations whose factors are kept for statistics;
    /// capped at `--t`.
    #[arg(long, default_value_t = 20)]
    pub snapshot_window: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_w: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_z: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta_sigma: f64,
    /// Residual bookkeeping: direct or incremental.
    #[arg(long, default_value = "direct", value_parser = parse_strategy)]
    pub strategy: ResidualStrategy,
    #[arg(long, default_value_t = evaluate::SPARSITY_THRESHOLD)]
    pub sparsity_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SamplerArgs {
    pub fn settings(&self) -> Result<ExperimentSettings> {
        let hyper = HyperParams {
            lambda_w: self.lambda_w,
            lambda_z: self.lambda_z,
            alpha_sigma: self.alpha_sigma,
            beta_sigma: self.beta_sigma,
        };
        hyper.validate()?;
        let schedule = RunSchedule {
            iterations: self.iterations,
            burn_in: self.burn_in,
            snapshot_window: self.snapshot_window.min(self.iterations),
        };
        schedule.validate()?;
        if !(self.sparsity_threshold > 0.0) {
            return Err(Error::Config("sparsity threshold must be positive".into()));
        }
        Ok(ExperimentSettings {
            hyper,
            schedule,
            strategy: self.strategy,
            sparsity_threshold: self.sparsity_threshold,
        })
    }
}

fn parse_strategy(s: &str) -> std::result::Result<ResidualStrategy, String> {
    match s {
        "direct" => Ok(ResidualStrategy::Direct),
        "incremental" => Ok(ResidualStrategy::Incremental),
        other => Err(format!("unknown strategy {other:?} (expected direct or incremental)")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV of nonnegative values.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "raw")]
    pub recipe: DatasetRecipe,
    /// Optional 0/1 CSV overriding which cells are observed.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// The data (and mask) files start with a header row.
    #[arg(long)]
    pub header: bool,
    #[arg(long, default_value = ingest::DEFAULT_MISSING_TOKEN)]
    pub missing: String,
}

impl DataArgs {
    pub fn load(&self) -> Result<ObservedMatrix> {
        let opts = CsvOptions {
            has_header: self.header,
            missing_token: self.missing.clone(),
        };
        let mut table = ingest::read_table_path(&self.data, &opts)?;
        if let Some(mask) = &self.mask {
            table = table.apply_mask(&ingest::load_mask(mask, self.header)?)?;
        }
        ingest::preprocess_table(table, &self.recipe)?.into_observed()
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OutputArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Omit timestamps and timings so reruns are byte-identical.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "gee")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct HoldoutArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "gee,gl12,gl22,glinf,gl2inf")]
    pub model: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',', default_value = "20,30,40,50")]
    pub k: Vec<usize>,
    /// Fractions of observed entries held out for testing.
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.7,0.8")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "gee,gl12,gl22,glinf,gl2inf")]
    pub model: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct NoiseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "gee,gl12,gl22,glinf,gl2inf")]
    pub model: Vec<ModelKind>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Fraction of observed entries held out for testing.
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    /// Noise variance as a multiple of the observed data variance.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.5,1.0")]
    pub noise_ratios: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    pub m: usize,
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_var: f64,
    #[arg(long, default_value_t = 1.0)]
    pub observed_fraction: f64,
    /// Multiply the generated data (and `W`) by this factor.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ingest::DEFAULT_MISSING_TOKEN)]
    pub missing: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

/// One-line `bnmf: <kind>: <message>` report for stderr.
pub fn error_line(err: &Error) -> String {
    let kind = match err.kind() {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    };
    let msg = err.to_string().replace('\n', " ");
    format!("bnmf: {kind}: {msg}")
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool()?;
    pool.install(|| match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Holdout(a) => holdout(a),
        Command::Sweep(a) => sweep(a),
        Command::Noise(a) => noise(a),
        Command::Synth(a) => synth(a),
    })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a nonnegative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct Manifest<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    data: Option<&'a ObservedMatrix>,
    started: SystemTime,
    clock: Instant,
    deterministic: bool,
}

impl<'a, A: Serialize> Manifest<'a, A> {
    fn new(command: &'a str, args: &'a A, data: Option<&'a ObservedMatrix>, deterministic: bool) -> Self {
        Self {
            command,
            args,
            data,
            started: SystemTime::now(),
            clock: Instant::now(),
            deterministic,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut m = serde_json::Map::new();
        m.insert("command".into(), self.command.into());
        m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        m.insert("args".into(), serde_json::to_value(self.args)?);
        if let Some(d) = self.data {
            m.insert(
                "data".into(),
                serde_json::json!({
                    "rows": d.rows(),
                    "cols": d.cols(),
                    "observed": d.observed_count(),
                    "observed_mean": json_f64(d.observed_mean()),
                    "observed_variance": json_f64(d.observed_variance()),
                }),
            );
        }
        if !self.deterministic {
            let secs = self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            m.insert("started_unix".into(), secs.into());
            m.insert("wall_seconds".into(), self.clock.elapsed().as_secs_f64().into());
        }
        write_json(&dir.join("manifest.json"), &serde_json::Value::Object(m))
    }
}

fn json_f64(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn create_out(out: &OutputArgs) -> Result<()> {
    fs::create_dir_all(&out.out)?;
    Ok(())
}

fn check_grid(models: &[ModelKind], ks: &[usize], repeats: usize) -> Result<()> {
    if models.is_empty() || ks.is_empty() {
        return Err(Error::Config("model and rank lists must be nonempty".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Config("ranks must be positive".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    Ok(())
}

fn fit(a: &FitArgs) -> Result<()> {
    let settings = a.sampler.settings()?;
    if a.k == 0 {
        return Err(Error::Config("rank must be positive".into()));
    }
    let data = a.data.load()?;
    let manifest = Manifest::new("fit", a, Some(&data), a.output.deterministic);
    let trace = settings.run(&data, a.model, a.k, a.sampler.seed)?;
    create_out(&a.output)?;
    let dir = &a.output.out;

    let mut wtr = csv::Writer::from_path(dir.join("trace.csv"))?;
    wtr.write_record(["iteration", "train_mse", "sigma2"])?;
    for (i, (mse, s2)) in trace.train_mse.iter().zip(&trace.sigma2).enumerate() {
        wtr.write_record([(i + 1).to_string(), mse.to_string(), s2.to_string()])?;
    }
    wtr.flush()?;

    ingest::write_matrix_csv(File::create(dir.join("prediction.csv"))?, &trace.posterior_mean)?;
    ingest::write_matrix_csv(File::create(dir.join("w.csv"))?, trace.final_state.factors.w())?;
    ingest::write_matrix_csv(File::create(dir.join("z.csv"))?, trace.final_state.factors.z())?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "model": a.model,
            "k": a.k,
            "iterations": trace.len(),
            "final_train_mse": json_f64(trace.final_train_mse()),
            "posterior_sigma2": json_f64(trace.posterior_sigma2()),
            "w_mean": json_f64(trace_w_mean(&trace)),
            "w_sparsity": json_f64(trace_w_sparsity(&trace, settings.sparsity_threshold)),
        }),
    )?;
    manifest.write(dir)
}

/// One run of a grid: its cell coordinates plus the resulting report.
#[derive(Clone, Debug)]
struct GridRun {
    repeat: usize,
    report: ExperimentReport,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_runs(path: &Path, runs: &[GridRun]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "model",
        "k",
        "unobserved_fraction",
        "noise_ratio",
        "repeat",
        "test_mse",
        "train_mse_final",
        "w_mean",
        "w_sparsity",
        "variance_to_mse",
    ])?;
    for run in runs {
        let r = &run.report;
        wtr.write_record([
            r.model.to_string(),
            r.k.to_string(),
            r.unobserved_fraction.to_string(),
            fmt_opt(r.noise_ratio),
            run.repeat.to_string(),
            r.test_mse.to_string(),
            r.train_mse_final.to_string(),
            r.w_mean.to_string(),
            r.w_sparsity.to_string(),
            fmt_opt(r.variance_to_mse),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-cell aggregation over repeats, keyed in first-seen order.
fn write_summary(path: &Path, runs: &[GridRun]) -> Result<()> {
    let mut cells: Vec<(String, Vec<&ExperimentReport>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for run in runs {
        let r = &run.report;
        let key = format!("{}|{}|{}|{}", r.model, r.k, r.unobserved_fraction, fmt_opt(r.noise_ratio));
        let i = *index.entry(key.clone()).or_insert_with(|| {
            cells.push((key, Vec::new()));
            cells.len() - 1
        });
        cells[i].1.push(r);
    }
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "model",
        "k",
        "unobserved_fraction",
        "noise_ratio",
        "runs",
        "test_mse_mean",
        "test_mse_median",
        "train_mse_final_mean",
        "w_mean",
        "w_sparsity",
        "variance_to_mse_median",
    ])?;
    for (_, reports) in &cells {
        let col = |f: &dyn Fn(&ExperimentReport) -> f64| -> Vec<f64> { reports.iter().map(|r| f(r)).collect() };
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let first = reports[0];
        let vtm: Vec<f64> = reports.iter().filter_map(|r| r.variance_to_mse).collect();
        wtr.write_record([
            first.model.to_string(),
            first.k.to_string(),
            first.unobserved_fraction.to_string(),
            fmt_opt(first.noise_ratio),
            reports.len().to_string(),
            mean(col(&|r| r.test_mse)).to_string(),
            median(&col(&|r| r.test_mse)).to_string(),
            mean(col(&|r| r.train_mse_final)).to_string(),
            mean(col(&|r| r.w_mean)).to_string(),
            mean(col(&|r| r.w_sparsity)).to_string(),
            if vtm.is_empty() { String::new() } else { median(&vtm).to_string() },
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn holdout(a: &HoldoutArgs) -> Result<()> {
    let settings = a.sampler.settings()?;
    check_grid(&a.model, &a.k, a.repeats)?;
    for &f in &a.fractions {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("fractions must lie in (0, 1), got {f}")));
        }
    }
    let data = a.data.load()?;
    let manifest = Manifest::new("holdout", a, Some(&data), a.output.deterministic);
    let mut jobs = Vec::new();
    for &model in &a.model {
        for &k in &a.k {
            for &f in &a.fractions {
                for rep in 0..a.repeats {
                    jobs.push((model, k, f, rep));
                }
            }
        }
    }
    let runs = jobs
        .par_iter()
        .map(|&(model, k, f, rep)| {
            let seeds = RepeatSeeds::derive(a.sampler.seed, rep as u64, f);
            holdout_experiment(&data, model, k, f, &seeds, &settings).map(|report| GridRun { repeat: rep, report })
        })
        .collect::<Result<Vec<_>>>()?;
    create_out(&a.output)?;
    write_runs(&a.output.out.join("runs.csv"), &runs)?;
    write_summary(&a.output.out.join("summary.csv"), &runs)?;
    manifest.write(&a.output.out)
}

fn noise(a: &NoiseArgs) -> Result<()> {
    let settings = a.sampler.settings()?;
    check_grid(&a.model, &[a.k], a.repeats)?;
    if !(a.fraction > 0.0 && a.fraction < 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1), got {}", a.fraction)));
    }
    if a.noise_ratios.is_empty() || a.noise_ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config("noise ratios must be a nonempty list of values >= 0".into()));
    }
    let data = a.data.load()?;
    let manifest = Manifest::new("noise", a, Some(&data), a.output.deterministic);
    let mut jobs = Vec::new();
    for &model in &a.model {
        for &ratio in &a.noise_ratios {
            for rep in 0..a.repeats {
                jobs.push((model, ratio, rep));
            }
        }
    }
    let runs = jobs
        .par_iter()
        .map(|&(model, ratio, rep)| {
            let seeds = RepeatSeeds::derive(a.sampler.seed, rep as u64, a.fraction);
            noise_experiment(&data, model, a.k, a.fraction, ratio, &seeds, &settings)
                .map(|report| GridRun { repeat: rep, report })
        })
        .collect::<Result<Vec<_>>>()?;
    create_out(&a.output)?;
    write_runs(&a.output.out.join("runs.csv"), &runs)?;
    write_summary(&a.output.out.join("summary.csv"), &runs)?;
    manifest.write(&a.output.out)
}

struct SweepRun {
    model: ModelKind,
    k: usize,
    repeat: usize,
    train_mse: Vec<f64>,
    sigma2: f64,
    w_mean: f64,
    w_sparsity: f64,
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let settings = a.sampler.settings()?;
    check_grid(&a.model, &a.k, a.repeats)?;
    let data = a.data.load()?;
    let manifest = Manifest::new("sweep", a, Some(&data), a.output.deterministic);
    let mut jobs = Vec::new();
    for &model in &a.model {
        for &k in &a.k {
            for rep in 0..a.repeats {
                jobs.push((model, k, rep));
            }
        }
    }
    let runs = jobs
        .par_iter()
        .map(|&(model, k, rep)| {
            let seeds = RepeatSeeds::derive(a.sampler.seed, rep as u64, 0.0);
            let trace = settings.run(&data, model, k, seeds.chain)?;
            Ok(SweepRun {
                model,
                k,
                repeat: rep,
                sigma2: trace.posterior_sigma2(),
                w_mean: trace_w_mean(&trace),
                w_sparsity: trace_w_sparsity(&trace, settings.sparsity_threshold),
                train_mse: trace.train_mse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_out(&a.output)?;
    let dir = &a.output.out;

    let mut wtr = csv::Writer::from_path(dir.join("convergence.csv"))?;
    wtr.write_record(["model", "k", "repeat", "iteration", "train_mse"])?;
    for r in &runs {
        for (i, mse) in r.train_mse.iter().enumerate() {
            wtr.write_record([
                r.model.to_string(),
                r.k.to_string(),
                r.repeat.to_string(),
                (i + 1).to_string(),
                mse.to_string(),
            ])?;
        }
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_path(dir.join("summary.csv"))?;
    wtr.write_record([
        "model",
        "k",
        "runs",
        "train_mse_final_mean",
        "train_mse_final_median",
        "sigma2_mean",
        "w_mean",
        "w_sparsity",
    ])?;
    for chunk in runs.chunks(a.repeats) {
        let n = chunk.len() as f64;
        let finals: Vec<f64> = chunk.iter().map(|r| *r.train_mse.last().unwrap_or(&f64::NAN)).collect();
        wtr.write_record([
            chunk[0].model.to_string(),
            chunk[0].k.to_string(),
            chunk.len().to_string(),
            (finals.iter().sum::<f64>() / n).to_string(),
            median(&finals).to_string(),
            (chunk.iter().map(|r| r.sigma2).sum::<f64>() / n).to_string(),
            (chunk.iter().map(|r| r.w_mean).sum::<f64>() / n).to_string(),
            (chunk.iter().map(|r| r.w_sparsity).sum::<f64>() / n).to_string(),
        ])?;
    }
    wtr.flush()?;
    manifest.write(dir)
}

fn synth(a: &SynthArgs) -> Result<()> {
    if !(a.scale.is_finite() && a.scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {}", a.scale)));
    }
    let manifest = Manifest::new("synth", a, None, a.output.deterministic);
    let s = ingest::synth_gee(&SynthSpec {
        rows: a.m,
        cols: a.n,
        rank: a.k,
        lambda: a.lambda,
        noise_var: a.noise_var,
        observed_fraction: a.observed_fraction,
        seed: a.seed,
    })?;
    let data = s.data.scaled(a.scale)?;
    create_out(&a.output)?;
    let dir = &a.output.out;
    ingest::write_csv_path(dir.join("data.csv"), &data, &a.missing)?;
    ingest::write_matrix_csv(File::create(dir.join("w.csv"))?, &(s.truth.w() * a.scale))?;
    ingest::write_matrix_csv(File::create(dir.join("z.csv"))?, s.truth.z())?;
    manifest.write(dir)
}
