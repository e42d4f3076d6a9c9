//! Training loop, metrics and the experiment harnesses built on it.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_model::{FactorSet, Hyperparams};
use crate::pid_optimizer::{ControllerState, PidStepper};
use crate::rng;
use crate::sparse_tensor::{Entry, ScalingParams, SparseTensor, SplitSets};

/// Validation metric the stopping rule watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMetric {
    #[default]
    Rmse,
    Mae,
}

impl std::str::FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(StopMetric::Rmse),
            "mae" => Ok(StopMetric::Mae),
            _ => Err(Error::InvalidParameter(format!(
                "stop_metric must be `rmse` or `mae`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for StopMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopMetric::Rmse => "rmse",
            StopMetric::Mae => "mae",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    MaxEpochs,
    Divergence,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Tolerance => "tolerance",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Divergence => "divergence",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub count: usize,
}

impl Metrics {
    pub fn get(&self, metric: StopMetric) -> f64 {
        match metric {
            StopMetric::Rmse => self.rmse,
            StopMetric::Mae => self.mae,
        }
    }
}

/// RMSE and MAE of `factors` over exactly `entries`.
pub fn evaluate(factors: &FactorSet, entries: &[Entry]) -> Result<Metrics> {
    if entries.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    for e in entries {
        let err = e.value - factors.predict(e.i, e.j, e.k)?;
        sq += err * err;
        abs += err.abs();
    }
    let n = entries.len() as f64;
    Ok(Metrics {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        count: entries.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rmse: f64,
    pub mae: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Validation metrics after each completed epoch.
    pub history: Vec<EpochRecord>,
    /// Test-set metrics, when a test set was supplied.
    pub final_metrics: Option<Metrics>,
    pub hyper: Hyperparams,
    pub seed: u64,
    /// Diagnostic for a diverged run.
    pub divergence: Option<String>,
}

impl TrainReport {
    /// Copy with every wall-clock field zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> TrainReport {
        let mut r = self.clone();
        for rec in &mut r.history {
            rec.ms = 0.0;
        }
        r
    }

    pub fn total_ms(&self) -> f64 {
        self.history.iter().map(|r| r.ms).sum()
    }

    pub fn mean_epoch_ms(&self) -> f64 {
        if self.history.is_empty() {
            0.0
        } else {
            self.total_ms() / self.history.len() as f64
        }
    }

    pub fn last_validation(&self) -> Option<&EpochRecord> {
        self.history.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub factors: FactorSet,
    pub state: ControllerState,
    pub report: TrainReport,
}

impl TrainOutcome {
    /// Turns a diverged run into [`Error::DivergenceDetected`].
    pub fn into_result(self) -> Result<TrainOutcome> {
        match self.report.stop_reason {
            StopReason::Divergence => Err(Error::DivergenceDetected {
                epochs: self.report.epochs_run,
                reason: self.report.divergence.unwrap_or_default(),
            }),
            _ => Ok(self),
        }
    }
}

/// Visiting order of `n` training instances in `epoch` (0-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::epoch_seed(seed, epoch)));
    order
}

/// Fits factors on `train`, stopping on the validation metric.
///
/// Each epoch visits every training entry once in a seeded shuffled order and
/// then evaluates on `validation`. Training stops when two consecutive
/// validation values differ by less than `hyper.tol`, after
/// `hyper.max_epochs` epochs, or when an update produces a non-finite value.
/// A diverged run is still returned; its factors are those after the last
/// completed epoch.
pub fn train(
    train: &[Entry],
    validation: &[Entry],
    dims: [usize; 3],
    hyper: &Hyperparams,
    seed: u64,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut factors = FactorSet::init(dims, hyper.rank, seed)?;
    for e in train.iter().chain(validation) {
        factors.check_index(e.i, e.j, e.k)?;
    }
    let mut state = ControllerState::for_factors(&factors);
    let mut stepper = PidStepper::new(hyper.rank);
    let mut report = TrainReport {
        epochs_run: 0,
        converged: false,
        stop_reason: StopReason::MaxEpochs,
        history: Vec::new(),
        final_metrics: None,
        hyper: *hyper,
        seed,
        divergence: None,
    };

    let mut previous: Option<f64> = None;
    for epoch in 0..hyper.max_epochs {
        let started = Instant::now();
        let checkpoint = (factors.clone(), state.clone());
        let mut failure = None;
        for idx in epoch_order(train.len(), seed, epoch) {
            if let Err(e) = stepper.step(&mut factors, &mut state, &train[idx], hyper) {
                failure = Some(e);
                break;
            }
        }
        if let Some(e) = failure {
            log::warn!("epoch {}: {e}", epoch + 1);
            (factors, state) = checkpoint;
            report.stop_reason = StopReason::Divergence;
            report.divergence = Some(format!("epoch {}: {e}", epoch + 1));
            break;
        }
        let metrics = evaluate(&factors, validation)?;
        report.history.push(EpochRecord {
            epoch: epoch + 1,
            rmse: metrics.rmse,
            mae: metrics.mae,
            ms: started.elapsed().as_secs_f64() * 1e3,
        });
        report.epochs_run = epoch + 1;
        log::debug!(
            "epoch {}: validation rmse {:.6} mae {:.6}",
            epoch + 1,
            metrics.rmse,
            metrics.mae
        );

        let current = metrics.get(hyper.stop_metric);
        if let Some(prev) = previous {
            if (current - prev).abs() < hyper.tol {
                report.converged = true;
                report.stop_reason = StopReason::Tolerance;
                break;
            }
        }
        previous = Some(current);
    }

    Ok(TrainOutcome {
        factors,
        state,
        report,
    })
}

/// Entries of one tensor already partitioned into the three sets.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub dims: [usize; 3],
    pub train: Vec<Entry>,
    pub validation: Vec<Entry>,
    pub test: Vec<Entry>,
}

impl SplitData {
    pub fn new(tensor: &SparseTensor, splits: &SplitSets) -> Self {
        let (train, validation, test) = splits.materialize(tensor);
        SplitData {
            dims: tensor.dims(),
            train,
            validation,
            test,
        }
    }

    /// Trains and fills `final_metrics` from the test set (if nonempty).
    pub fn fit(&self, hyper: &Hyperparams, seed: u64) -> Result<TrainOutcome> {
        let mut out = train(&self.train, &self.validation, self.dims, hyper, seed)?;
        if !self.test.is_empty() {
            out.report.final_metrics = Some(evaluate(&out.factors, &self.test)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Imputed {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub value: f64,
}

/// Predicts each query cell and maps it back to the original units.
/// With `clamp`, results are limited to the observed `[y_min, y_max]`.
pub fn impute(
    factors: &FactorSet,
    scaling: &ScalingParams,
    queries: &[(usize, usize, usize)],
    clamp: bool,
) -> Result<Vec<Imputed>> {
    queries
        .iter()
        .map(|&(i, j, k)| {
            let mut value = scaling.unscale(factors.predict(i, j, k)?);
            if clamp {
                value = value.clamp(scaling.y_min, scaling.y_max);
            }
            Ok(Imputed { i, j, k, value })
        })
        .collect()
}

/// `(larger − smaller) / larger`, in percent.
pub fn iteration_reduction(a: usize, b: usize) -> f64 {
    let (hi, lo) = (a.max(b), a.min(b));
    if hi == 0 {
        0.0
    } else {
        100.0 * (hi - lo) as f64 / hi as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub pid: TrainReport,
    pub baseline: TrainReport,
    /// `(larger − smaller) / larger` of the two epoch counts, in percent.
    pub reduction_percent: f64,
    /// Whether the PID run needed fewer epochs than the baseline.
    pub pid_faster: bool,
}

/// Trains with `hyper_pid` and again with its integral and derivative gains
/// zeroed, under the same seed (same initialization and instance order).
pub fn ablate(data: &SplitData, hyper_pid: &Hyperparams, seed: u64) -> Result<AblationReport> {
    if !hyper_pid.has_pid() {
        return Err(Error::NothingToAblate);
    }
    let baseline_hyper = hyper_pid.without_pid();
    let (pid, baseline) = rayon::join(
        || data.fit(hyper_pid, seed),
        || data.fit(&baseline_hyper, seed),
    );
    let (pid, baseline) = (pid?.report, baseline?.report);
    Ok(AblationReport {
        reduction_percent: iteration_reduction(pid.epochs_run, baseline.epochs_run),
        pid_faster: pid.epochs_run < baseline.epochs_run,
        pid,
        baseline,
    })
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    Lambda,
    CI,
    CD,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Eta => "eta",
            SweepParam::Lambda => "lambda",
            SweepParam::CI => "c_i",
            SweepParam::CD => "c_d",
            SweepParam::Alpha => "alpha",
        }
    }

    pub fn apply(self, hyper: &mut Hyperparams, value: f64) {
        match self {
            SweepParam::Eta => hyper.eta = value,
            SweepParam::Lambda => hyper.lambda = value,
            SweepParam::CI => hyper.c_i = value,
            SweepParam::CD => hyper.c_d = value,
            SweepParam::Alpha => hyper.alpha = value,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "eta" => SweepParam::Eta,
            "lambda" => SweepParam::Lambda,
            "c_i" => SweepParam::CI,
            "c_d" => SweepParam::CD,
            "alpha" => SweepParam::Alpha,
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "cannot sweep `{s}`; expected eta, lambda, c_i, c_d or alpha"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: Vec<(SweepParam, f64)>,
    pub epochs: usize,
    pub stop_reason: StopReason,
    pub rmse: f64,
    pub mae: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub base: Hyperparams,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Header plus one line per cell: swept params, then
    /// `epochs,stop_reason,rmse,mae,ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.rows.first() {
            for (p, _) in &first.params {
                out.push_str(p.name());
                out.push(',');
            }
        }
        out.push_str("epochs,stop_reason,rmse,mae,ms\n");
        for row in &self.rows {
            for (_, v) in &row.params {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                row.epochs, row.stop_reason, row.rmse, row.mae, row.ms
            ));
        }
        out
    }
}

/// Full-factorial grid over one or two parameters; cells run in parallel.
///
/// Each cell reports test-set metrics when `data` has a test set, otherwise
/// the final validation metrics.
pub fn sweep(
    data: &SplitData,
    base: &Hyperparams,
    grid: &[(SweepParam, Vec<f64>)],
    seed: u64,
) -> Result<SweepReport> {
    if grid.is_empty() || grid.len() > 2 || grid.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::InvalidParameter(
            "sweep grid needs one or two parameters, each with at least one value".into(),
        ));
    }
    let mut cells: Vec<Vec<(SweepParam, f64)>> = vec![vec![]];
    for (param, values) in grid {
        cells = cells
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut c = prefix.clone();
                    c.push((*param, v));
                    c
                })
            })
            .collect();
    }
    let rows = cells
        .into_par_iter()
        .map(|params| {
            let mut hyper = *base;
            for &(p, v) in &params {
                p.apply(&mut hyper, v);
            }
            let report = data.fit(&hyper, seed)?.report;
            let (rmse, mae) = match (&report.final_metrics, report.last_validation()) {
                (Some(m), _) => (m.rmse, m.mae),
                (None, Some(r)) => (r.rmse, r.mae),
                (None, None) => (f64::NAN, f64::NAN),
            };
            Ok(SweepRow {
                params,
                epochs: report.epochs_run,
                stop_reason: report.stop_reason,
                rmse,
                mae,
                ms: report.total_ms(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        base: *base,
        seed,
        rows,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: Vec<TrainReport>,
    pub epochs: MeanStd,
    pub rmse: MeanStd,
    pub mae: MeanStd,
}

/// Runs the split-and-train protocol `repeats` times with seeds
/// `seed, seed + 1, …`; each repeat draws its own split and initialization.
pub fn repeat(
    tensor: &SparseTensor,
    ratios: [f64; 3],
    hyper: &Hyperparams,
    seed: u64,
    repeats: usize,
) -> Result<RepeatSummary> {
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be at least 1".into()));
    }
    let runs = (0..repeats as u64)
        .into_par_iter()
        .map(|r| {
            let s = seed.wrapping_add(r);
            let data = SplitData::new(tensor, &tensor.split(ratios, s)?);
            Ok(data.fit(hyper, s)?.report)
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: &dyn Fn(&TrainReport) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    let test = |r: &TrainReport| r.final_metrics.expect("test set is nonempty");
    Ok(RepeatSummary {
        epochs: pick(&|r| r.epochs_run as f64),
        rmse: pick(&|r| test(r).rmse),
        mae: pick(&|r| test(r).mae),
        runs,
    })
}
