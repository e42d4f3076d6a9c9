//! Sigmoid-mapped CP factor model.
//!
//! The raw factors `U (I×R)`, `O (J×R)` and `M (K×R)` are unconstrained; every
//! read goes through the logistic sigmoid, so the effective latent features
//! lie in `(0, 1)` and predictions
//!
//! ```text
//! ŷ_ijk = Σ_r σ(u_ir) σ(o_jr) σ(m_kr)
//! ```
//!
//! lie in `(0, R)`. The training objective over a set of known entries is
//!
//! ```text
//! ε = ½ Σ_(i,j,k) [ (y_ijk − ŷ_ijk)² + λ Σ_r (σ(u_ir)² + σ(o_jr)² + σ(m_kr)²) ]
//! ```
//!
//! with the regularizer charged once per known entry.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pid_optimizer::FirstVisitDerivative;
use crate::rng;
use crate::sparse_tensor::Entry;
use crate::trainer::StopMetric;

/// Range the raw factors are initialised from.
pub const INIT_RANGE: (f64, f64) = (-3.0, -2.0);

/// Overflow-safe logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major `rows × rank` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMatrix {
    rows: usize,
    rank: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, rank: usize) -> Self {
        FactorMatrix {
            rows,
            rank,
            data: vec![0.0; rows * rank],
        }
    }

    /// # Panics
    /// If `data.len() != rows * rank`.
    pub fn from_vec(rows: usize, rank: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * rank, "factor data does not match shape");
        FactorMatrix { rows, rank, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.rank..(r + 1) * self.rank]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.rank..(r + 1) * self.rank]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.rank + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.rank + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|p| (p / self.rank, p % self.rank))
    }
}

/// The three raw (pre-sigmoid) factor matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSet {
    u: FactorMatrix,
    o: FactorMatrix,
    m: FactorMatrix,
}

impl FactorSet {
    pub fn from_matrices(u: FactorMatrix, o: FactorMatrix, m: FactorMatrix) -> Result<Self> {
        if u.rank != o.rank || o.rank != m.rank || u.rank == 0 {
            return Err(Error::InvalidParameter(format!(
                "factor ranks disagree or are zero: {}, {}, {}",
                u.rank, o.rank, m.rank
            )));
        }
        let set = FactorSet { u, o, m };
        if let Some((matrix, row, col)) = set.first_non_finite() {
            return Err(Error::NonFiniteUpdate { matrix, row, col });
        }
        Ok(set)
    }

    /// Every raw entry drawn uniformly from `[-3, -2]`, so the mapped
    /// features start small and positive (σ ∈ ≈(0.047, 0.119)).
    pub fn init(dims: [usize; 3], rank: usize, seed: u64) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidDims(dims));
        }
        if rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut matrix = |rows: usize| {
            let data = (0..rows * rank)
                .map(|_| rng.random_range(INIT_RANGE.0..=INIT_RANGE.1))
                .collect();
            FactorMatrix::from_vec(rows, rank, data)
        };
        let u = matrix(dims[0]);
        let o = matrix(dims[1]);
        let m = matrix(dims[2]);
        Ok(FactorSet { u, o, m })
    }

    pub fn rank(&self) -> usize {
        self.u.rank
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.u.rows, self.o.rows, self.m.rows]
    }

    pub fn u(&self) -> &FactorMatrix {
        &self.u
    }

    pub fn o(&self) -> &FactorMatrix {
        &self.o
    }

    pub fn m(&self) -> &FactorMatrix {
        &self.m
    }

    pub(crate) fn matrices_mut(&mut self) -> (&mut FactorMatrix, &mut FactorMatrix, &mut FactorMatrix) {
        (&mut self.u, &mut self.o, &mut self.m)
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub(crate) fn first_non_finite(&self) -> Option<(&'static str, usize, usize)> {
        [("U", &self.u), ("O", &self.o), ("M", &self.m)]
            .into_iter()
            .find_map(|(name, mat)| mat.first_non_finite().map(|(r, c)| (name, r, c)))
    }

    pub fn check_index(&self, i: usize, j: usize, k: usize) -> Result<()> {
        let dims = self.dims();
        if i >= dims[0] || j >= dims[1] || k >= dims[2] {
            return Err(Error::IndexOutOfRange { i, j, k, dims });
        }
        Ok(())
    }

    pub fn predict(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        self.check_index(i, j, k)?;
        Ok(self.predict_unchecked(i, j, k))
    }

    /// Like [`predict`](Self::predict) but panics on out-of-range indices.
    #[inline]
    pub fn predict_unchecked(&self, i: usize, j: usize, k: usize) -> f64 {
        let (u, o, m) = (self.u.row(i), self.o.row(j), self.m.row(k));
        let mut acc = 0.0;
        for r in 0..u.len() {
            acc += sigmoid(u[r]) * sigmoid(o[r]) * sigmoid(m[r]);
        }
        acc
    }

    /// Regularized objective summed over `entries`.
    pub fn objective(&self, entries: &[Entry], lambda: f64) -> Result<f64> {
        let mut total = 0.0;
        for e in entries {
            self.check_index(e.i, e.j, e.k)?;
            total += self.instance_loss(e, lambda);
        }
        Ok(total)
    }

    /// `½ [(y − ŷ)² + λ Σ_r (σ(u)² + σ(o)² + σ(m)²)]` for one entry.
    pub fn instance_loss(&self, e: &Entry, lambda: f64) -> f64 {
        let (u, o, m) = (self.u.row(e.i), self.o.row(e.j), self.m.row(e.k));
        let mut pred = 0.0;
        let mut reg = 0.0;
        for r in 0..u.len() {
            let (su, so, sm) = (sigmoid(u[r]), sigmoid(o[r]), sigmoid(m[r]));
            pred += su * so * sm;
            reg += su * su + so * so + sm * sm;
        }
        let err = e.value - pred;
        0.5 * (err * err + lambda * reg)
    }

    /// Gradients of the single-entry loss with respect to row `e.i` of U,
    /// row `e.j` of O and row `e.k` of M.
    pub fn instance_gradients(
        &self,
        e: &Entry,
        lambda: f64,
        mode: RegMode,
    ) -> Result<InstanceGradients> {
        self.check_index(e.i, e.j, e.k)?;
        let r = self.rank();
        let mut g = InstanceGradients {
            u: vec![0.0; r],
            o: vec![0.0; r],
            m: vec![0.0; r],
            prediction: 0.0,
        };
        g.prediction = self.gradients_into(e, lambda, mode, &mut g.u, &mut g.o, &mut g.m);
        Ok(g)
    }

    /// Writes the three gradient rows into the given buffers and returns ŷ.
    /// Sigmoids are evaluated once per element.
    pub(crate) fn gradients_into(
        &self,
        e: &Entry,
        lambda: f64,
        mode: RegMode,
        gu: &mut [f64],
        go: &mut [f64],
        gm: &mut [f64],
    ) -> f64 {
        let (u, o, m) = (self.u.row(e.i), self.o.row(e.j), self.m.row(e.k));
        let rank = u.len();
        // Stash sigmoids in the output buffers, then overwrite.
        let mut pred = 0.0;
        for r in 0..rank {
            let (su, so, sm) = (sigmoid(u[r]), sigmoid(o[r]), sigmoid(m[r]));
            gu[r] = su;
            go[r] = so;
            gm[r] = sm;
            pred += su * so * sm;
        }
        let err = e.value - pred;
        for r in 0..rank {
            let (su, so, sm) = (gu[r], go[r], gm[r]);
            gu[r] = reg_term(mode, lambda, su, u[r]) - err * su * (1.0 - su) * so * sm;
            go[r] = reg_term(mode, lambda, so, o[r]) - err * so * (1.0 - so) * su * sm;
            gm[r] = reg_term(mode, lambda, sm, m[r]) - err * sm * (1.0 - sm) * su * so;
        }
        pred
    }
}

#[inline]
fn reg_term(mode: RegMode, lambda: f64, s: f64, raw: f64) -> f64 {
    match mode {
        RegMode::Analytic => lambda * s * s * (1.0 - s),
        RegMode::Paper => lambda * s * (1.0 - s) * raw,
    }
}

pub fn init_factors(dims: [usize; 3], rank: usize, seed: u64) -> Result<FactorSet> {
    FactorSet::init(dims, rank, seed)
}

pub fn predict(factors: &FactorSet, i: usize, j: usize, k: usize) -> Result<f64> {
    factors.predict(i, j, k)
}

pub fn objective(factors: &FactorSet, entries: &[Entry], lambda: f64) -> Result<f64> {
    factors.objective(entries, lambda)
}

pub fn instance_gradients(
    factors: &FactorSet,
    entry: &Entry,
    lambda: f64,
    mode: RegMode,
) -> Result<InstanceGradients> {
    factors.instance_gradients(entry, lambda, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGradients {
    pub u: Vec<f64>,
    pub o: Vec<f64>,
    pub m: Vec<f64>,
    /// ŷ at the point the gradients were taken.
    pub prediction: f64,
}

/// How the regularizer's derivative is formed.
///
/// `Analytic` is the exact derivative of the objective, `λ σ(x)² (1 − σ(x))`.
/// `Paper` uses `λ σ(x) (1 − σ(x)) x` instead, multiplying by the raw factor
/// rather than its sigmoid; kept for replicating runs that used that form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    #[default]
    Analytic,
    Paper,
}

impl std::str::FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(RegMode::Analytic),
            "paper" => Ok(RegMode::Paper),
            _ => Err(Error::InvalidParameter(format!(
                "reg_mode must be `analytic` or `paper`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for RegMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegMode::Analytic => "analytic",
            RegMode::Paper => "paper",
        })
    }
}

/// Training hyperparameters. `eta` doubles as the proportional gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub eta: f64,
    pub lambda: f64,
    pub c_i: f64,
    pub c_d: f64,
    /// Decay of the integral accumulator.
    pub alpha: f64,
    pub rank: usize,
    pub max_epochs: usize,
    pub tol: f64,
    pub reg_mode: RegMode,
    pub first_visit_derivative: FirstVisitDerivative,
    pub stop_metric: StopMetric,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            eta: 0.05,
            lambda: 0.001,
            c_i: 0.7,
            c_d: 0.1,
            alpha: 0.2,
            rank: 20,
            max_epochs: 200,
            tol: 1e-6,
            reg_mode: RegMode::Analytic,
            first_visit_derivative: FirstVisitDerivative::Zero,
            stop_metric: StopMetric::Rmse,
        }
    }
}

impl Hyperparams {
    /// Plain SGD with the same step size, regularization and schedule.
    pub fn without_pid(&self) -> Self {
        Hyperparams {
            c_i: 0.0,
            c_d: 0.0,
            ..*self
        }
    }

    pub fn has_pid(&self) -> bool {
        self.c_i != 0.0 || self.c_d != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.c_i >= 0.0 && self.c_i.is_finite()) {
            return bad("c_i must be non-negative");
        }
        if !(self.c_d >= 0.0 && self.c_d.is_finite()) {
            return bad("c_d must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return bad("tol must be non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(rank: usize) -> FactorSet {
        FactorSet::from_matrices(
            FactorMatrix::zeros(1, rank),
            FactorMatrix::zeros(1, rank),
            FactorMatrix::zeros(1, rank),
        )
        .unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1 / (1 + e²) to 17 significant digits.
        assert!((sigmoid(-2.0) - 0.119_202_922_022_117_57).abs() < 1e-16);
        for x in [0.3, 2.5, 17.0, 300.0, 709.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid(-709.0) > 0.0);
        assert!(sigmoid(-745.0).is_finite());
        assert!(sigmoid(1e6).is_finite());
    }

    #[test]
    fn init_range_and_determinism() {
        let f = init_factors([7, 5, 3], 4, 11).unwrap();
        for mat in [f.u(), f.o(), f.m()] {
            for &x in mat.data() {
                assert!((-3.0..=-2.0).contains(&x));
                let s = sigmoid(x);
                assert!(s > 0.047 && s < 0.120);
            }
        }
        assert_eq!(f, init_factors([7, 5, 3], 4, 11).unwrap());
        assert_ne!(f, init_factors([7, 5, 3], 4, 12).unwrap());
    }

    #[test]
    fn predict_known_values() {
        assert_eq!(zeros(1).predict(0, 0, 0).unwrap(), 0.125);
        assert_eq!(zeros(2).predict(0, 0, 0).unwrap(), 0.25);
        assert!(matches!(
            zeros(2).predict(1, 0, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn objective_known_values() {
        let f = zeros(1);
        let e = [Entry::new(0, 0, 0, 0.125)];
        assert_eq!(f.objective(&e, 0.0).unwrap(), 0.0);
        assert!((f.objective(&e, 0.01).unwrap() - 0.00375).abs() < 1e-15);
    }

    #[test]
    fn gradients_at_zero() {
        let f = zeros(1);
        let g = f
            .instance_gradients(&Entry::new(0, 0, 0, 1.125), 0.0, RegMode::Analytic)
            .unwrap();
        assert_eq!((g.u[0], g.o[0], g.m[0]), (-0.0625, -0.0625, -0.0625));
        assert_eq!(g.prediction, 0.125);
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let f = init_factors([3, 3, 3], 3, 5).unwrap();
        let y = f.predict(1, 2, 0).unwrap();
        let g = f
            .instance_gradients(&Entry::new(1, 2, 0, y), 0.0, RegMode::Analytic)
            .unwrap();
        assert!(g.u.iter().chain(&g.o).chain(&g.m).all(|&x| x == 0.0));
    }

    #[test]
    fn paper_mode_reg_vanishes_at_raw_zero() {
        let f = zeros(1);
        let g = f
            .instance_gradients(&Entry::new(0, 0, 0, 0.125), 1.0, RegMode::Paper)
            .unwrap();
        assert_eq!(g.u[0], 0.0);
        let a = f
            .instance_gradients(&Entry::new(0, 0, 0, 0.125), 1.0, RegMode::Analytic)
            .unwrap();
        assert_eq!(a.u[0], 0.125);
    }

    #[test]
    fn modes_agree_without_regularization() {
        let f = init_factors([4, 4, 4], 5, 9).unwrap();
        let e = Entry::new(3, 1, 2, 2.7);
        let a = f.instance_gradients(&e, 0.0, RegMode::Analytic).unwrap();
        let p = f.instance_gradients(&e, 0.0, RegMode::Paper).unwrap();
        assert_eq!(a, p);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let h = Hyperparams {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(h.validate().is_err());
        let h = Hyperparams {
            eta: 0.0,
            ..Default::default()
        };
        assert!(h.validate().is_err());
        assert!(!Hyperparams::default().without_pid().has_pid());
    }

    #[test]
    fn rejects_mismatched_ranks() {
        assert!(FactorSet::from_matrices(
            FactorMatrix::zeros(2, 2),
            FactorMatrix::zeros(2, 3),
            FactorMatrix::zeros(2, 2)
        )
        .is_err());
    }
}
