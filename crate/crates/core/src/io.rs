//! File formats: meter-log ingestion, tensor interchange CSV, the model
//! artifact and factor/query CSVs.
//!
//! # Tensor interchange CSV
//!
//! ```text
//! # dims=86400,13,21
//! i,j,k,value
//! 0,0,0,113.5
//! ```
//!
//! Indices are 0-based. Values are written with Rust's shortest round-trip
//! float formatting, so write → read reproduces every value bit-for-bit.
//!
//! # Meter logs
//!
//! A UTF-8 CSV with a header row. [`IngestSpec`] names the columns. The time
//! column holds either integer Unix seconds (UTC), an ISO-8601 date-time
//! (`2013-06-07T00:00:05`, `2013-06-07 00:00:05`, optionally with an offset,
//! in which case the local wall-clock time is used), or a bare time of day
//! (`00:00:05`) when a separate date column is given. Rows whose value cell is
//! empty are treated as missing readings and skipped.
//!
//! Cell coordinates: `i` = seconds within the day / `seconds_per_step`, `j` =
//! meter index in order of first appearance, `k` = days since the origin date
//! (the earliest date in the file unless one is given).
//!
//! # Model artifact
//!
//! A single JSON document ([`ModelArtifact`]) holding the raw factor matrices
//! (row-major), the scaling parameters, hyperparameters, split ratios, seed
//! and the crate version that produced it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_model::{FactorMatrix, FactorSet, Hyperparams};
use crate::sparse_tensor::{Entry, ScalingParams, SparseTensor};

pub const SECONDS_PER_DAY: u32 = 86_400;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_tensor<W: Write>(out: W, tensor: &SparseTensor) -> Result<()> {
    let mut out = out;
    let [i, j, k] = tensor.dims();
    writeln!(out, "# dims={i},{j},{k}").map_err(|e| Error::io("<tensor>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "j", "k", "value"])?;
    for e in tensor.entries() {
        w.write_record(&[
            e.i.to_string(),
            e.j.to_string(),
            e.k.to_string(),
            e.value.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<tensor>", e))?;
    Ok(())
}

pub fn read_tensor<R: Read>(input: R) -> Result<SparseTensor> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input
        .read_line(&mut first)
        .map_err(|e| Error::io("<tensor>", e))?;
    let dims_text = first
        .trim()
        .strip_prefix("# dims=")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "expected `# dims=I,J,K` header comment".into(),
        })?;
    let dims: Vec<usize> = dims_text
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad dims `{dims_text}`: {e}"),
        })?;
    let dims: [usize; 3] = dims.try_into().map_err(|_| Error::Parse {
        line: 1,
        message: format!("expected three dims, got `{dims_text}`"),
    })?;

    let mut rdr = csv::Reader::from_reader(input);
    let mut entries = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 3;
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, got {}", rec.len()),
            });
        }
        let idx = |c: usize| {
            rec[c].trim().parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("bad index `{}`: {e}", &rec[c]),
            })
        };
        let value = rec[3].trim().parse::<f64>().map_err(|e| Error::Parse {
            line,
            message: format!("bad value `{}`: {e}", &rec[3]),
        })?;
        entries.push(Entry::new(idx(0)?, idx(1)?, idx(2)?, value));
    }
    SparseTensor::from_entries(dims, entries)
}

pub fn save_tensor(path: &Path, tensor: &SparseTensor) -> Result<()> {
    write_tensor(create(path)?, tensor)
}

pub fn load_tensor(path: &Path) -> Result<SparseTensor> {
    read_tensor(open(path)?)
}

/// Column layout of a meter log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSpec {
    pub time_step_column: String,
    pub meter_column: String,
    /// Optional separate calendar-date column; otherwise the date comes from
    /// the time column.
    pub date_column: Option<String>,
    pub value_column: String,
    pub seconds_per_step: u32,
    /// Date mapped to `k = 0`; defaults to the earliest date in the file.
    pub date_origin: Option<NaiveDate>,
}

impl Default for IngestSpec {
    fn default() -> Self {
        IngestSpec {
            time_step_column: "timestamp".into(),
            meter_column: "meter".into(),
            date_column: None,
            value_column: "power".into(),
            seconds_per_step: 1,
            date_origin: None,
        }
    }
}

impl IngestSpec {
    fn validate(&self) -> Result<()> {
        if self.seconds_per_step == 0 || self.seconds_per_step > SECONDS_PER_DAY {
            return Err(Error::InvalidParameter(format!(
                "seconds_per_step must lie in 1..={SECONDS_PER_DAY}"
            )));
        }
        let mut cols = vec![&self.time_step_column, &self.meter_column, &self.value_column];
        cols.extend(self.date_column.as_ref());
        for (a, col) in cols.iter().enumerate() {
            if cols[..a].contains(col) {
                return Err(Error::InvalidParameter(format!(
                    "column `{col}` named twice"
                )));
            }
        }
        Ok(())
    }

    /// Number of time steps per day, `I`.
    pub fn steps_per_day(&self) -> usize {
        SECONDS_PER_DAY.div_ceil(self.seconds_per_step) as usize
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub tensor: SparseTensor,
    /// Source meter id for each `j`.
    pub meters: Vec<String>,
    /// Date at `k = 0`.
    pub date_origin: NaiveDate,
}

enum Stamp {
    Full(NaiveDateTime),
    TimeOfDay(NaiveTime),
}

fn parse_stamp(text: &str) -> Option<Stamp> {
    let text = text.trim();
    if let Ok(secs) = text.parse::<i64>() {
        return DateTime::from_timestamp(secs, 0).map(|d| Stamp::Full(d.naive_utc()));
    }
    if let Ok(d) = DateTime::parse_from_rfc3339(text) {
        return Some(Stamp::Full(d.naive_local()));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(d) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(Stamp::Full(d));
        }
    }
    if let Ok(d) = DateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S%.f%:z") {
        return Some(Stamp::Full(d.naive_local()));
    }
    NaiveTime::parse_from_str(text, "%H:%M:%S%.f")
        .ok()
        .map(Stamp::TimeOfDay)
}

pub fn ingest_reader<R: Read>(input: R, spec: &IngestSpec) -> Result<Ingested> {
    spec.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let time_col = column(&spec.time_step_column)?;
    let meter_col = column(&spec.meter_column)?;
    let value_col = column(&spec.value_column)?;
    let date_col = spec.date_column.as_deref().map(column).transpose()?;

    let mut meter_index: HashMap<String, usize> = HashMap::new();
    let mut meters = Vec::new();
    let mut rows: Vec<(usize, usize, NaiveDate, f64, usize)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse { line, message };
        let field = |c: usize| {
            rec.get(c)
                .ok_or_else(|| parse_err(format!("missing column {}", c + 1)))
        };

        let raw_value = field(value_col)?;
        if raw_value.is_empty() {
            continue;
        }
        let value: f64 = raw_value
            .parse()
            .map_err(|_| parse_err(format!("bad value `{raw_value}`")))?;
        if !value.is_finite() {
            return Err(parse_err(format!("non-finite value `{raw_value}`")));
        }
        if value < 0.0 {
            return Err(Error::NegativeValue { line, value });
        }

        let raw_time = field(time_col)?;
        let stamp =
            parse_stamp(raw_time).ok_or_else(|| parse_err(format!("bad timestamp `{raw_time}`")))?;
        let explicit_date = date_col
            .map(|c| {
                let raw = field(c)?;
                NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                    .map_err(|_| parse_err(format!("bad date `{raw}`")))
            })
            .transpose()?;
        let (date, time) = match (stamp, explicit_date) {
            (Stamp::Full(dt), date) => (date.unwrap_or(dt.date()), dt.time()),
            (Stamp::TimeOfDay(t), Some(date)) => (date, t),
            (Stamp::TimeOfDay(_), None) => {
                return Err(parse_err(format!(
                    "time `{raw_time}` has no date and no date column is configured"
                )))
            }
        };
        let i = (time.num_seconds_from_midnight() / spec.seconds_per_step) as usize;

        let meter = field(meter_col)?;
        let j = match meter_index.get(meter) {
            Some(&j) => j,
            None => {
                meters.push(meter.to_string());
                meter_index.insert(meter.to_string(), meters.len() - 1);
                meters.len() - 1
            }
        };
        rows.push((i, j, date, value, line));
    }

    let origin = match spec.date_origin.or_else(|| rows.iter().map(|r| r.2).min()) {
        Some(d) => d,
        None => return Err(Error::EmptyTensor),
    };
    let mut entries = Vec::with_capacity(rows.len());
    let mut max_k = 0;
    for (i, j, date, value, line) in rows {
        let days = (date - origin).num_days();
        if days < 0 {
            return Err(Error::Parse {
                line,
                message: format!("date {date} precedes origin {origin}"),
            });
        }
        let k = days as usize;
        max_k = max_k.max(k);
        entries.push(Entry::new(i, j, k, value));
    }
    let dims = [spec.steps_per_day(), meters.len(), max_k + 1];
    let tensor = SparseTensor::from_entries(dims, entries)?;
    Ok(Ingested {
        tensor,
        meters,
        date_origin: origin,
    })
}

pub fn ingest_csv(path: &Path, spec: &IngestSpec) -> Result<Ingested> {
    ingest_reader(open(path)?, spec)
}

/// `j,meter` lines mapping dense meter indices to source ids.
pub fn write_meter_map<W: Write>(out: W, meters: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["j", "meter"])?;
    for (j, m) in meters.iter().enumerate() {
        w.write_record([j.to_string().as_str(), m.as_str()])?;
    }
    w.flush().map_err(|e| Error::io("<meters>", e))?;
    Ok(())
}

pub fn save_meter_map(path: &Path, meters: &[String]) -> Result<()> {
    write_meter_map(create(path)?, meters)
}

/// Reads `i,j,k` query cells (header required; extra columns ignored).
pub fn read_queries<R: Read>(input: R) -> Result<Vec<(usize, usize, usize)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let cols = [col("i")?, col("j")?, col("k")?];
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut idx = [0usize; 3];
        for (slot, &c) in idx.iter_mut().zip(&cols) {
            let raw = rec.get(c).unwrap_or("");
            *slot = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad index `{raw}`"),
            })?;
        }
        out.push((idx[0], idx[1], idx[2]));
    }
    Ok(out)
}

pub fn load_queries(path: &Path) -> Result<Vec<(usize, usize, usize)>> {
    read_queries(open(path)?)
}

/// Flat factor dump: for each of U, O, M a `# matrix=NAME rows=N rank=R`
/// comment followed by `N` comma-separated rows of raw (pre-sigmoid) values.
pub fn write_factors_csv<W: Write>(out: W, factors: &FactorSet) -> Result<()> {
    let mut out = out;
    let io_err = |e| Error::io("<factors>", e);
    for (name, mat) in [("U", factors.u()), ("O", factors.o()), ("M", factors.m())] {
        writeln!(out, "# matrix={name} rows={} rank={}", mat.rows(), mat.rank()).map_err(io_err)?;
        for r in 0..mat.rows() {
            let line: Vec<String> = mat.row(r).iter().map(f64::to_string).collect();
            writeln!(out, "{}", line.join(",")).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

pub fn read_factors_csv<R: Read>(input: R) -> Result<FactorSet> {
    let reader = BufReader::new(input);
    let mut mats: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<factors>", e))?;
        let line = line.trim();
        let bad = |message: String| Error::Parse { line: n + 1, message };
        if let Some(header) = line.strip_prefix("# matrix=") {
            let mut rows = None;
            let mut rank = None;
            for part in header.split_whitespace().skip(1) {
                if let Some(v) = part.strip_prefix("rows=") {
                    rows = v.parse().ok();
                } else if let Some(v) = part.strip_prefix("rank=") {
                    rank = v.parse().ok();
                }
            }
            match (rows, rank) {
                (Some(r), Some(k)) => mats.push((r, k, Vec::new())),
                _ => return Err(bad(format!("bad matrix header `{line}`"))),
            }
        } else if !line.is_empty() {
            let (_, _, data) = mats
                .last_mut()
                .ok_or_else(|| bad("data before matrix header".into()))?;
            for v in line.split(',') {
                data.push(v.trim().parse().map_err(|_| bad(format!("bad value `{v}`")))?);
            }
        }
    }
    if mats.len() != 3 {
        return Err(Error::Parse {
            line: 0,
            message: format!("expected 3 matrices, found {}", mats.len()),
        });
    }
    let mut it = mats.into_iter().map(|(rows, rank, data)| {
        if data.len() != rows * rank {
            return Err(Error::Parse {
                line: 0,
                message: format!("matrix has {} values, expected {}", data.len(), rows * rank),
            });
        }
        Ok(FactorMatrix::from_vec(rows, rank, data))
    });
    let (u, o, m) = (it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?);
    FactorSet::from_matrices(u, o, m)
}

pub const ARTIFACT_FORMAT: &str = "pnlf-model";
pub const ARTIFACT_VERSION: u32 = 1;

/// Everything needed to evaluate, impute or replay a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub format_version: u32,
    pub code_version: String,
    pub factors: FactorSet,
    /// `None` when the model was trained on unscaled values.
    pub scaling: Option<ScalingParams>,
    pub hyper: Hyperparams,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl ModelArtifact {
    pub fn new(
        factors: FactorSet,
        scaling: Option<ScalingParams>,
        hyper: Hyperparams,
        ratios: [f64; 3],
        seed: u64,
    ) -> Self {
        ModelArtifact {
            format: ARTIFACT_FORMAT.into(),
            format_version: ARTIFACT_VERSION,
            code_version: env!("CARGO_PKG_VERSION").into(),
            factors,
            scaling,
            hyper,
            ratios,
            seed,
        }
    }

    /// Scaling to report values in, identity when training was unscaled.
    pub fn scaling_or_identity(&self) -> ScalingParams {
        self.scaling
            .unwrap_or_else(|| ScalingParams::identity(ScalingParams::DEFAULT_TARGET_MAX))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let art: ModelArtifact = serde_json::from_reader(BufReader::new(open(path)?))?;
        if art.format != ARTIFACT_FORMAT || art.format_version != ARTIFACT_VERSION {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "{}: unsupported model format {} v{}",
                    path.display(),
                    art.format,
                    art.format_version
                ),
            });
        }
        // Re-run the finiteness and shape checks serde bypassed.
        let f = &art.factors;
        FactorSet::from_matrices(f.u().clone(), f.o().clone(), f.m().clone())?;
        Ok(art)
    }
}
