//! PID-adjusted stochastic gradient steps.
//!
//! Plain SGD moves a parameter by `η·g`, a proportional response to the
//! current gradient. Here each factor element additionally carries
//!
//! * an integral accumulator `I ← (1 − α)·I + α·g`, an exponentially decayed
//!   sum of its past gradients, and
//! * the gradient it saw on its previous update, `D`,
//!
//! and moves by `η·g + C_I·I_prev + C_D·(g − D_prev)`. The state of an element
//! advances only when a training entry touching it is processed, so "time"
//! counts visits to that element, not epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_model::{FactorMatrix, FactorSet, Hyperparams};
use crate::sparse_tensor::Entry;

/// Derivative term on an element's first-ever update.
///
/// `Zero` suppresses it (there is no previous gradient yet). `Literal` uses the
/// zero-initialised `D`, giving a first-step kick of `C_D·g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstVisitDerivative {
    #[default]
    Zero,
    Literal,
}

impl std::str::FromStr for FirstVisitDerivative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(FirstVisitDerivative::Zero),
            "literal" => Ok(FirstVisitDerivative::Literal),
            _ => Err(Error::InvalidParameter(format!(
                "first_visit_derivative must be `zero` or `literal`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for FirstVisitDerivative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FirstVisitDerivative::Zero => "zero",
            FirstVisitDerivative::Literal => "literal",
        })
    }
}

/// Integral, previous-gradient and visited flags for one factor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeState {
    pub integral: FactorMatrix,
    pub previous: FactorMatrix,
    pub visited: Vec<bool>,
}

impl ModeState {
    fn new(rows: usize, rank: usize) -> Self {
        ModeState {
            integral: FactorMatrix::zeros(rows, rank),
            previous: FactorMatrix::zeros(rows, rank),
            visited: vec![false; rows * rank],
        }
    }

    pub fn visited(&self, row: usize, col: usize) -> bool {
        self.visited[row * self.integral.rank() + col]
    }
}

/// Controller memory shaped like a [`FactorSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub u: ModeState,
    pub o: ModeState,
    pub m: ModeState,
}

impl ControllerState {
    pub fn new(dims: [usize; 3], rank: usize) -> Self {
        ControllerState {
            u: ModeState::new(dims[0], rank),
            o: ModeState::new(dims[1], rank),
            m: ModeState::new(dims[2], rank),
        }
    }

    pub fn for_factors(factors: &FactorSet) -> Self {
        Self::new(factors.dims(), factors.rank())
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.u.integral.rows(),
            self.o.integral.rows(),
            self.m.integral.rows(),
        ]
    }

    pub fn rank(&self) -> usize {
        self.u.integral.rank()
    }

    pub fn is_finite(&self) -> bool {
        [&self.u, &self.o, &self.m]
            .iter()
            .all(|s| s.integral.is_finite() && s.previous.is_finite())
    }
}

/// Reference discrete PID controller on a scalar error signal:
/// `C_P·e_t + C_I·Σ e + C_D·(e_t − e_{t−1})`, with `e_0 = 0`.
///
/// Not used by training; kept as the textbook form the per-element update
/// specializes.
///
/// # Panics
/// If `errors` is empty.
pub fn discrete_pid(errors: &[f64], c_p: f64, c_i: f64, c_d: f64) -> f64 {
    let (&last, rest) = errors.split_last().expect("error history is empty");
    let prev = rest.last().copied().unwrap_or(0.0);
    let sum: f64 = errors.iter().sum();
    c_p * last + c_i * sum + c_d * (last - prev)
}

/// Step size for one element given its gradient and controller memory.
#[inline]
pub fn pid_delta(g: f64, i_prev: f64, d_prev: f64, visited: bool, hyper: &Hyperparams) -> f64 {
    let p_and_i = hyper.eta * g + hyper.c_i * i_prev;
    if visited || hyper.first_visit_derivative == FirstVisitDerivative::Literal {
        p_and_i + hyper.c_d * (g - d_prev)
    } else {
        p_and_i
    }
}

/// New `(integral, previous)` after a visit with gradient `g`.
#[inline]
pub fn advance_state(i_prev: f64, g: f64, alpha: f64) -> (f64, f64) {
    ((1.0 - alpha) * i_prev + alpha * g, g)
}

/// Reusable gradient buffers for [`PidStepper::step`].
#[derive(Debug, Clone)]
pub struct PidStepper {
    gu: Vec<f64>,
    go: Vec<f64>,
    gm: Vec<f64>,
}

impl PidStepper {
    pub fn new(rank: usize) -> Self {
        PidStepper {
            gu: vec![0.0; rank],
            go: vec![0.0; rank],
            gm: vec![0.0; rank],
        }
    }

    /// One PID-SGD update on the rows touched by `entry`.
    ///
    /// All `3R` gradients are taken at the pre-update factors. Each element is
    /// then moved using its controller state from before this visit, after
    /// which the state advances.
    pub fn step(
        &mut self,
        factors: &mut FactorSet,
        state: &mut ControllerState,
        entry: &Entry,
        hyper: &Hyperparams,
    ) -> Result<f64> {
        factors.check_index(entry.i, entry.j, entry.k)?;
        let rank = factors.rank();
        if self.gu.len() != rank {
            *self = PidStepper::new(rank);
        }
        let prediction = factors.gradients_into(
            entry,
            hyper.lambda,
            hyper.reg_mode,
            &mut self.gu,
            &mut self.go,
            &mut self.gm,
        );
        let (u, o, m) = factors.matrices_mut();
        update_row(u, &mut state.u, entry.i, &self.gu, hyper, "U")?;
        update_row(o, &mut state.o, entry.j, &self.go, hyper, "O")?;
        update_row(m, &mut state.m, entry.k, &self.gm, hyper, "M")?;
        Ok(prediction)
    }
}

fn update_row(
    factor: &mut FactorMatrix,
    state: &mut ModeState,
    row: usize,
    grads: &[f64],
    hyper: &Hyperparams,
    matrix: &'static str,
) -> Result<()> {
    let base = row * grads.len();
    let values = factor.row_mut(row);
    let integral = state.integral.row_mut(row);
    let previous = state.previous.row_mut(row);
    let visited = &mut state.visited[base..base + grads.len()];
    for r in 0..grads.len() {
        let g = grads[r];
        values[r] -= pid_delta(g, integral[r], previous[r], visited[r], hyper);
        let (i_new, d_new) = advance_state(integral[r], g, hyper.alpha);
        integral[r] = i_new;
        previous[r] = d_new;
        visited[r] = true;
        if !(values[r].is_finite() && i_new.is_finite() && d_new.is_finite()) {
            return Err(Error::NonFiniteUpdate {
                matrix,
                row,
                col: r,
            });
        }
    }
    Ok(())
}

/// One update for `entry`; allocates fresh gradient buffers.
pub fn apply_instance_update(
    factors: &mut FactorSet,
    state: &mut ControllerState,
    entry: &Entry,
    hyper: &Hyperparams,
) -> Result<()> {
    PidStepper::new(factors.rank())
        .step(factors, state, entry, hyper)
        .map(|_| ())
}
