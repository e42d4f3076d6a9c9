//! Coordinate-format storage for sparse 3-way tensors.
//!
//! A [`SparseTensor`] holds the known cells of an `I × J × K` tensor (time step
//! within day, meter, date for metering data). Entries are validated on
//! construction and kept sorted by `(k, i, j)`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_model::{FactorMatrix, FactorSet};
use crate::rng;

/// One known cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub value: f64,
}

impl Entry {
    pub fn new(i: usize, j: usize, k: usize, value: f64) -> Self {
        Entry { i, j, k, value }
    }

    fn sort_key(&self) -> (usize, usize, usize) {
        (self.k, self.i, self.j)
    }
}

impl From<(usize, usize, usize, f64)> for Entry {
    fn from((i, j, k, value): (usize, usize, usize, f64)) -> Self {
        Entry { i, j, k, value }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    dims: [usize; 3],
    entries: Vec<Entry>,
}

impl SparseTensor {
    /// Validates and sorts `entries`.
    ///
    /// Duplicate coordinates are rejected rather than merged.
    pub fn from_entries(dims: [usize; 3], entries: Vec<Entry>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidDims(dims));
        }
        if entries.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let mut entries = entries;
        for e in &entries {
            if e.i >= dims[0] || e.j >= dims[1] || e.k >= dims[2] {
                return Err(Error::IndexOutOfRange {
                    i: e.i,
                    j: e.j,
                    k: e.k,
                    dims,
                });
            }
            if !e.value.is_finite() {
                return Err(Error::NonFiniteValue {
                    i: e.i,
                    j: e.j,
                    k: e.k,
                    value: e.value,
                });
            }
        }
        entries.sort_by_key(Entry::sort_key);
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[0].sort_key() == w[1].sort_key())
        {
            return Err(Error::DuplicateIndex {
                i: w[1].i,
                j: w[1].j,
                k: w[1].k,
            });
        }
        Ok(SparseTensor { dims, entries })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Number of known entries, `|Λ|`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cell_count(&self) -> u128 {
        self.dims.iter().map(|&d| d as u128).product()
    }

    pub fn density(&self) -> f64 {
        self.len() as f64 / self.cell_count() as f64
    }

    /// Smallest and largest stored value.
    pub fn value_range(&self) -> (f64, f64) {
        self.entries
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e.value), hi.max(e.value))
            })
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        self.entries
            .binary_search_by_key(&(k, i, j), Entry::sort_key)
            .is_ok()
    }

    /// Same coordinates, values transformed by `f`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> SparseTensor {
        SparseTensor {
            dims: self.dims,
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    value: f(e.value),
                    ..*e
                })
                .collect(),
        }
    }

    /// Linearly maps values onto `[0, target_max]`.
    pub fn scale_linear(&self, target_max: f64) -> Result<(SparseTensor, ScalingParams)> {
        if !(target_max > 0.0 && target_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "target_max must be positive, got {target_max}"
            )));
        }
        let (y_min, y_max) = self.value_range();
        if y_max <= y_min {
            return Err(Error::DegenerateRange(y_min));
        }
        let params = ScalingParams {
            y_min,
            y_max,
            target_max,
        };
        Ok((self.map_values(|y| params.scale(y)), params))
    }

    /// Shuffles the entries with `seed` and partitions them into
    /// training / validation / test sets.
    ///
    /// Validation and test receive `floor(ratio · |Λ|)` entries each; the
    /// remainder goes to training. A set with a positive ratio whose floor is
    /// zero is given one entry, taken from training, as long as training keeps
    /// at least one.
    pub fn split(&self, ratios: [f64; 3], seed: u64) -> Result<SplitSets> {
        SplitSets::new(self.len(), ratios, seed)
    }
}

/// Parameters of the linear map `y ↦ target_max · (y − y_min) / (y_max − y_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub y_min: f64,
    pub y_max: f64,
    pub target_max: f64,
}

impl ScalingParams {
    pub const DEFAULT_TARGET_MAX: f64 = 10.0;

    /// The map that leaves values unchanged.
    pub fn identity(target_max: f64) -> Self {
        ScalingParams {
            y_min: 0.0,
            y_max: target_max,
            target_max,
        }
    }

    pub fn scale(&self, y: f64) -> f64 {
        self.target_max * ((y - self.y_min) / (self.y_max - self.y_min))
    }

    pub fn unscale(&self, value: f64) -> f64 {
        self.y_min + value * (self.y_max - self.y_min) / self.target_max
    }
}

pub fn unscale(value: f64, params: &ScalingParams) -> f64 {
    params.unscale(value)
}

/// Disjoint index sets into a tensor's entry list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSets {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSets {
    pub fn new(n: usize, ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0))
            || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::RatioSum(ratios));
        }
        let (n_train, n_val, n_test) = split_sizes(n, ratios);
        debug_assert_eq!(n_train + n_val + n_test, n);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(seed));

        let test = order.split_off(n - n_test);
        let validation = order.split_off(n - n_test - n_val);
        Ok(SplitSets {
            train: order,
            validation,
            test,
        })
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    /// Copies the three subsets out of `tensor`.
    pub fn materialize(&self, tensor: &SparseTensor) -> (Vec<Entry>, Vec<Entry>, Vec<Entry>) {
        let pick = |idx: &[usize]| idx.iter().map(|&n| tensor.entries[n]).collect();
        (pick(&self.train), pick(&self.validation), pick(&self.test))
    }
}

fn split_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    // The 1e-9 slack keeps e.g. 0.29 · 100 = 28.999… from flooring to 28.
    let floor = |r: f64| ((r * n as f64 + 1e-9).floor() as usize).min(n);
    let mut val = floor(ratios[1]);
    let mut test = floor(ratios[2]).min(n - val);
    let mut train = n - val - test;
    if val == 0 && ratios[1] > 0.0 && train > 1 {
        val = 1;
        train -= 1;
    }
    if test == 0 && ratios[2] > 0.0 && train > 1 {
        test = 1;
        train -= 1;
    }
    (train, val, test)
}

/// A synthetic instance drawn from the model family itself.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub tensor: SparseTensor,
    pub truth: FactorSet,
    /// Fewer known entries than free parameters, `true_rank · (I + J + K)`.
    pub underdetermined: bool,
}

/// Samples ground-truth factors uniformly from `[-1, 1]`, picks
/// `floor(density · I·J·K)` distinct cells and emits the sigmoid-CP value at
/// each, plus Gaussian noise with standard deviation `noise_sd`.
pub fn synth_low_rank(
    dims: [usize; 3],
    true_rank: usize,
    seed: u64,
    noise_sd: f64,
    density: f64,
) -> Result<SynthInstance> {
    if dims.contains(&0) {
        return Err(Error::InvalidDims(dims));
    }
    if true_rank == 0 {
        return Err(Error::InvalidParameter("true_rank must be at least 1".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise_sd must be non-negative, got {noise_sd}"
        )));
    }
    let cells = dims.iter().product::<usize>();
    let count = ((density * cells as f64 + 1e-9).floor() as usize).clamp(1, cells);

    let mut rng = rng::seeded(seed);
    let mut matrix = |rows: usize| {
        let data = (0..rows * true_rank)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        FactorMatrix::from_vec(rows, true_rank, data)
    };
    let truth = FactorSet::from_matrices(matrix(dims[0]), matrix(dims[1]), matrix(dims[2]))?;

    let noise = Normal::new(0.0, noise_sd)
        .map_err(|e| Error::InvalidParameter(format!("noise_sd: {e}")))?;
    let plane = dims[0] * dims[1];
    let mut entries = Vec::with_capacity(count);
    for cell in rand::seq::index::sample(&mut rng, cells, count) {
        let (k, rem) = (cell / plane, cell % plane);
        let (i, j) = (rem / dims[1], rem % dims[1]);
        let mut value = truth.predict_unchecked(i, j, k);
        if noise_sd > 0.0 {
            value += noise.sample(&mut rng);
        }
        entries.push(Entry { i, j, k, value });
    }

    let underdetermined = count < true_rank * (dims[0] + dims[1] + dims[2]);
    if underdetermined {
        log::warn!(
            "synthetic tensor has {count} entries for {} free parameters; recovery is under-determined",
            true_rank * (dims[0] + dims[1] + dims[2])
        );
    }
    let tensor = SparseTensor::from_entries(dims, entries)?;
    Ok(SynthInstance {
        tensor,
        truth,
        underdetermined,
    })
}
