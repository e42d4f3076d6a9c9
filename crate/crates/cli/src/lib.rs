//! `pnlf` command-line front end.
//!
//! Every command that involves randomness prints a JSON header line first,
//! carrying the code version, the seed and the full effective configuration,
//! so any run can be replayed bit-for-bit. Results follow as JSON lines.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pnlf_core::config::RunConfig;
use pnlf_core::io::{self, IngestSpec, ModelArtifact};
use pnlf_core::sparse_tensor::{synth_low_rank, SparseTensor};
use pnlf_core::trainer::{self, SplitData, SweepParam, TrainReport};
use pnlf_core::{Error, ScalingParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "pnlf", version, about = "PID-controlled non-negative tensor completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a meter-log CSV into a tensor CSV.
    Ingest(IngestArgs),
    /// Split, scale and fit a model.
    Train(TrainArgs),
    /// Score a saved model on a split of its tensor.
    Evaluate(EvaluateArgs),
    /// Predict values (in original units) for query cells.
    Impute(ImputeArgs),
    /// Compare a PID run with the same run at C_I = C_D = 0.
    Ablate(ExperimentArgs),
    /// Grid over one or two hyperparameters.
    Sweep(SweepArgs),
    /// Generate a synthetic low-rank tensor.
    Synth(SynthArgs),
}

/// Hyperparameters and protocol settings; flags override `--config`.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long = "c-i")]
    c_i: Option<String>,
    #[arg(long = "c-d")]
    c_d: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// `analytic` or `paper`.
    #[arg(long = "reg-mode")]
    reg_mode: Option<String>,
    /// `zero` or `literal`.
    #[arg(long = "first-visit-derivative")]
    first_visit_derivative: Option<String>,
    /// `rmse` or `mae`.
    #[arg(long = "stop-metric")]
    stop_metric: Option<String>,
    /// Train, validation, test ratios, e.g. `0.6,0.2,0.2`.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    #[arg(long)]
    clamp: bool,
    /// Target maximum for linear scaling, or `off`.
    #[arg(long)]
    scale: Option<String>,
    /// Print the effective configuration and exit.
    #[arg(long = "print-config")]
    print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => match RunConfig::load(p) {
                Ok(cfg) => cfg,
                Err(e @ Error::Io { .. }) => return Err(e.into()),
                Err(e) => return Err(UsageError(format!("{}: {e}", p.display())).into()),
            },
            None => RunConfig::default(),
        };
        let flags = [
            ("eta", &self.eta),
            ("lambda", &self.lambda),
            ("c_i", &self.c_i),
            ("c_d", &self.c_d),
            ("alpha", &self.alpha),
            ("rank", &self.rank),
            ("max_epochs", &self.max_epochs),
            ("tol", &self.tol),
            ("reg_mode", &self.reg_mode),
            ("first_visit_derivative", &self.first_visit_derivative),
            ("stop_metric", &self.stop_metric),
            ("ratios", &self.ratios),
            ("seed", &self.seed),
            ("repeats", &self.repeats),
            ("scale", &self.scale),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).map_err(UsageError::from)?;
            }
        }
        if self.clamp {
            cfg.clamp = true;
        }
        cfg.validate().map_err(UsageError::from)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Tensor CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the `j,meter` mapping (default: `<out>.meters.csv`).
    #[arg(long)]
    meters: Option<PathBuf>,
    #[arg(long = "time-col", default_value = "timestamp")]
    time_col: String,
    #[arg(long = "meter-col", default_value = "meter")]
    meter_col: String,
    #[arg(long = "date-col")]
    date_col: Option<String>,
    #[arg(long = "value-col", default_value = "power")]
    value_col: String,
    #[arg(long = "seconds-per-step", default_value_t = 1)]
    seconds_per_step: u32,
    /// Date mapped to k = 0 (YYYY-MM-DD); defaults to the earliest date.
    #[arg(long = "date-origin")]
    date_origin: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    tensor: PathBuf,
    /// Model artifact to write.
    #[arg(long)]
    model: Option<PathBuf>,
    /// One-row CSV: params, epochs, rmse, mae, ms.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-epoch validation CSV: epoch, rmse, mae, ms.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tensor: PathBuf,
    /// `train`, `validation`, `test` or `all`.
    #[arg(long, default_value = "test")]
    set: String,
}

#[derive(Debug, Args)]
struct ImputeArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with `i,j,k` columns.
    #[arg(long, conflicts_with = "missing_of")]
    queries: Option<PathBuf>,
    /// Impute every cell absent from this tensor CSV.
    #[arg(long = "missing-of")]
    missing_of: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Limit outputs to the observed value range.
    #[arg(long)]
    clamp: bool,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    tensor: PathBuf,
    /// CSV output.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// `name=v1,v2,...`; give once or twice.
    #[arg(long, required = true)]
    grid: Vec<String>,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// `I,J,K`.
    #[arg(long)]
    dims: String,
    /// True CP rank.
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    density: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the ground-truth factors (flat CSV layout).
    #[arg(long)]
    truth: Option<PathBuf>,
}

/// Bad arguments or configuration discovered after parsing; exits 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl From<Error> for UsageError {
    fn from(e: Error) -> Self {
        UsageError(e.to_string())
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("{}", synopsis());
            1
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            2
        }
    }
}

/// The error chain joined with `: `, skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn synopsis() -> &'static str {
    "usage: pnlf <ingest|train|evaluate|impute|ablate|sweep|synth> [options]; see `pnlf --help`"
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Ingest(a) => ingest(a, out),
        Command::Train(a) => train(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Impute(a) => impute(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn header(out: &mut dyn Write, command: &str, cfg: &RunConfig) -> Result<()> {
    emit(
        out,
        json!({
            "command": command,
            "code_version": VERSION,
            "seed": cfg.seed,
            "config": cfg,
        }),
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn parse_dims(text: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = text
        .split(',')
        .map(|d| d.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| UsageError(format!("bad dims `{text}`")))?;
    Ok(dims
        .try_into()
        .map_err(|_| UsageError(format!("expected I,J,K, got `{text}`")))?)
}

/// Loads a tensor and applies the configured scaling. Constant data is left
/// unscaled with a warning.
fn prepare(path: &Path, cfg: &RunConfig) -> Result<(SparseTensor, Option<ScalingParams>)> {
    let raw = io::load_tensor(path).with_context(|| format!("loading {}", path.display()))?;
    match cfg.scale {
        None => Ok((raw, None)),
        Some(target) => match raw.scale_linear(target) {
            Ok((scaled, params)) => Ok((scaled, Some(params))),
            Err(Error::DegenerateRange(v)) => {
                log::warn!("all values equal {v}; training without scaling");
                Ok((raw, None))
            }
            Err(e) => Err(e.into()),
        },
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    let inst = synth_low_rank(dims, a.rank, a.seed, a.noise, a.density)
        .map_err(UsageError::from)?;
    io::save_tensor(&a.out, &inst.tensor)?;
    if let Some(p) = &a.truth {
        io::write_factors_csv(create(p)?, &inst.truth)?;
    }
    emit(
        out,
        json!({
            "command": "synth",
            "code_version": VERSION,
            "seed": a.seed,
            "dims": dims,
            "true_rank": a.rank,
            "density": a.density,
            "noise_sd": a.noise,
            "entries": inst.tensor.len(),
            "underdetermined": inst.underdetermined,
        }),
    )
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> Result<()> {
    let date_origin = a
        .date_origin
        .as_deref()
        .map(|d| {
            chrono::NaiveDate::parse_from_str(d, "%Y-%m-%d")
                .map_err(|_| UsageError(format!("bad --date-origin `{d}`")))
        })
        .transpose()?;
    let spec = IngestSpec {
        time_step_column: a.time_col,
        meter_column: a.meter_col,
        date_column: a.date_col,
        value_column: a.value_col,
        seconds_per_step: a.seconds_per_step,
        date_origin,
    };
    let ingested = io::ingest_csv(&a.input, &spec)
        .with_context(|| format!("ingesting {}", a.input.display()))?;
    io::save_tensor(&a.out, &ingested.tensor)?;
    let meters_path = a.meters.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".meters.csv");
        p.into()
    });
    io::save_meter_map(&meters_path, &ingested.meters)?;
    emit(
        out,
        json!({
            "command": "ingest",
            "code_version": VERSION,
            "dims": ingested.tensor.dims(),
            "entries": ingested.tensor.len(),
            "density": ingested.tensor.density(),
            "meters": ingested.meters.len(),
            "date_origin": ingested.date_origin.to_string(),
            "meter_map": meters_path,
        }),
    )
}

fn report_row(report: &TrainReport) -> (f64, f64) {
    match (&report.final_metrics, report.last_validation()) {
        (Some(m), _) => (m.rmse, m.mae),
        (None, Some(r)) => (r.rmse, r.mae),
        (None, None) => (f64::NAN, f64::NAN),
    }
}

const REPORT_HEADER: &str = "eta,lambda,c_i,c_d,alpha,rank,seed,epochs,stop_reason,rmse,mae,ms";

fn report_line(r: &TrainReport) -> String {
    let h = &r.hyper;
    let (rmse, mae) = report_row(r);
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
        h.eta,
        h.lambda,
        h.c_i,
        h.c_d,
        h.alpha,
        h.rank,
        r.seed,
        r.epochs_run,
        r.stop_reason,
        rmse,
        mae,
        r.total_ms()
    )
}

fn summary(label: &str, r: &TrainReport) -> serde_json::Value {
    let (rmse, mae) = report_row(r);
    json!({
        "run": label,
        "epochs": r.epochs_run,
        "converged": r.converged,
        "stop_reason": r.stop_reason,
        "test_rmse": rmse,
        "test_mae": mae,
        "ms": r.total_ms(),
        "divergence": r.divergence,
    })
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    if a.cfg.print_config {
        write!(out, "{}", cfg.to_text())?;
        return Ok(());
    }
    header(out, "train", &cfg)?;
    let (tensor, scaling) = prepare(&a.tensor, &cfg)?;
    let splits = tensor.split(cfg.ratios, cfg.seed)?;
    let data = SplitData::new(&tensor, &splits);
    let outcome = data.fit(&cfg.hyper, cfg.seed)?;
    emit(out, summary("pnlf", &outcome.report))?;

    if let Some(p) = &a.history {
        let mut w = create(p)?;
        writeln!(w, "epoch,rmse,mae,ms")?;
        for r in &outcome.report.history {
            writeln!(w, "{},{},{},{:.3}", r.epoch, r.rmse, r.mae, r.ms)?;
        }
        w.flush()?;
    }
    let mut rows = vec![report_line(&outcome.report)];
    if cfg.repeats > 1 {
        let rep = trainer::repeat(&tensor, cfg.ratios, &cfg.hyper, cfg.seed, cfg.repeats)?;
        emit(
            out,
            json!({
                "repeats": cfg.repeats,
                "epochs": rep.epochs.to_string(),
                "test_rmse": rep.rmse.to_string(),
                "test_mae": rep.mae.to_string(),
                "epochs_mean": rep.epochs.mean,
                "epochs_std": rep.epochs.std,
                "rmse_mean": rep.rmse.mean,
                "rmse_std": rep.rmse.std,
                "mae_mean": rep.mae.mean,
                "mae_std": rep.mae.std,
            }),
        )?;
        rows = rep.runs.iter().map(report_line).collect();
    }
    if let Some(p) = &a.report {
        let mut w = create(p)?;
        writeln!(w, "{REPORT_HEADER}")?;
        for row in rows {
            writeln!(w, "{row}")?;
        }
        w.flush()?;
    }

    let outcome = outcome.into_result()?;
    if let Some(p) = &a.model {
        ModelArtifact::new(outcome.factors, scaling, cfg.hyper, cfg.ratios, cfg.seed)
            .save(p)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn load_for_model(model: &ModelArtifact, path: &Path) -> Result<SparseTensor> {
    let raw = io::load_tensor(path).with_context(|| format!("loading {}", path.display()))?;
    if raw.dims() != model.factors.dims() {
        bail!(
            "tensor dims {:?} do not match model dims {:?}",
            raw.dims(),
            model.factors.dims()
        );
    }
    Ok(match &model.scaling {
        Some(p) => raw.map_values(|y| p.scale(y)),
        None => raw,
    })
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let model = ModelArtifact::load(&a.model)?;
    let tensor = load_for_model(&model, &a.tensor)?;
    let splits = tensor.split(model.ratios, model.seed)?;
    let data = SplitData::new(&tensor, &splits);
    let entries = match a.set.as_str() {
        "train" => data.train,
        "validation" => data.validation,
        "test" => data.test,
        "all" => tensor.entries().to_vec(),
        other => return Err(UsageError(format!("unknown set `{other}`")).into()),
    };
    let m = trainer::evaluate(&model.factors, &entries)?;
    let span = model
        .scaling
        .map_or(1.0, |p| (p.y_max - p.y_min) / p.target_max);
    emit(
        out,
        json!({
            "command": "evaluate",
            "code_version": VERSION,
            "model_seed": model.seed,
            "set": a.set,
            "count": m.count,
            "rmse": m.rmse,
            "mae": m.mae,
            "rmse_original_units": m.rmse * span,
            "mae_original_units": m.mae * span,
        }),
    )
}

fn impute(a: ImputeArgs, out: &mut dyn Write) -> Result<()> {
    let model = ModelArtifact::load(&a.model)?;
    let scaling = model.scaling_or_identity();
    let mut w = create(&a.out)?;
    writeln!(w, "i,j,k,value")?;
    let mut count = 0usize;
    let mut write_batch = |w: &mut BufWriter<File>, q: &[(usize, usize, usize)]| -> Result<()> {
        for v in trainer::impute(&model.factors, &scaling, q, a.clamp)? {
            writeln!(w, "{},{},{},{}", v.i, v.j, v.k, v.value)?;
        }
        count += q.len();
        Ok(())
    };
    match (&a.queries, &a.missing_of) {
        (Some(q), None) => write_batch(&mut w, &io::load_queries(q)?)?,
        (None, Some(t)) => {
            let known = io::load_tensor(t)?;
            let [ni, nj, nk] = known.dims();
            if known.dims() != model.factors.dims() {
                bail!("tensor dims {:?} do not match model", known.dims());
            }
            let mut batch = Vec::with_capacity(4096);
            for k in 0..nk {
                for i in 0..ni {
                    for j in 0..nj {
                        if !known.contains(i, j, k) {
                            batch.push((i, j, k));
                        }
                    }
                    if batch.len() >= 4096 {
                        write_batch(&mut w, &batch)?;
                        batch.clear();
                    }
                }
            }
            write_batch(&mut w, &batch)?;
        }
        _ => return Err(UsageError("give exactly one of --queries or --missing-of".into()).into()),
    }
    w.flush()?;
    emit(
        out,
        json!({
            "command": "impute",
            "code_version": VERSION,
            "model_seed": model.seed,
            "cells": count,
            "clamp": a.clamp,
            "out": a.out,
        }),
    )
}

fn ablate(a: ExperimentArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    if a.cfg.print_config {
        write!(out, "{}", cfg.to_text())?;
        return Ok(());
    }
    if !cfg.hyper.has_pid() {
        return Err(UsageError(Error::NothingToAblate.to_string()).into());
    }
    header(out, "ablate", &cfg)?;
    let (tensor, _) = prepare(&a.tensor, &cfg)?;
    let data = SplitData::new(&tensor, &tensor.split(cfg.ratios, cfg.seed)?);
    let rep = trainer::ablate(&data, &cfg.hyper, cfg.seed)?;
    emit(out, summary("pnlf", &rep.pid))?;
    emit(out, summary("nlf", &rep.baseline))?;
    emit(
        out,
        json!({
            "reduction_percent": rep.reduction_percent,
            "pid_faster": rep.pid_faster,
        }),
    )?;
    if let Some(p) = &a.report {
        let mut w = create(p)?;
        writeln!(w, "model,{REPORT_HEADER}")?;
        writeln!(w, "pnlf,{}", report_line(&rep.pid))?;
        writeln!(w, "nlf,{}", report_line(&rep.baseline))?;
        w.flush()?;
    }
    Ok(())
}

fn parse_grid(specs: &[String]) -> Result<Vec<(SweepParam, Vec<f64>)>> {
    specs
        .iter()
        .map(|s| {
            let (name, values) = s
                .split_once('=')
                .ok_or_else(|| UsageError(format!("grid `{s}` is not name=v1,v2,...")))?;
            let param: SweepParam = name.trim().parse().map_err(UsageError::from)?;
            let values = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| UsageError(format!("bad values in grid `{s}`")))?;
            Ok((param, values))
        })
        .collect()
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.exp.cfg.resolve()?;
    let grid = parse_grid(&a.grid)?;
    if grid.len() > 2 {
        return Err(UsageError("sweep varies at most two parameters".into()).into());
    }
    if a.exp.cfg.print_config {
        write!(out, "{}", cfg.to_text())?;
        return Ok(());
    }
    header(out, "sweep", &cfg)?;
    let (tensor, _) = prepare(&a.exp.tensor, &cfg)?;
    let data = SplitData::new(&tensor, &tensor.split(cfg.ratios, cfg.seed)?);
    let rep = trainer::sweep(&data, &cfg.hyper, &grid, cfg.seed)?;
    for row in &rep.rows {
        let mut rec = serde_json::Map::new();
        for (p, v) in &row.params {
            rec.insert(p.name().into(), json!(v));
        }
        rec.insert("epochs".into(), json!(row.epochs));
        rec.insert("stop_reason".into(), json!(row.stop_reason));
        rec.insert("rmse".into(), json!(row.rmse));
        rec.insert("mae".into(), json!(row.mae));
        rec.insert("ms".into(), json!(row.ms));
        emit(out, serde_json::Value::Object(rec))?;
    }
    if let Some(p) = &a.exp.report {
        let mut w = create(p)?;
        w.write_all(rep.to_csv().as_bytes())?;
        w.flush()?;
    }
    Ok(())
}
