//! Sparse 3-way tensor completion with PID-controlled non-negative latent
//! factorization (PNLF).
//!
//! The crate is organised bottom-up:
//!
//! * [`sparse_tensor`] — COO storage, linear scaling, deterministic splits and
//!   synthetic low-rank instances.
//! * [`factor_model`] — sigmoid-mapped CP factors, prediction, the regularized
//!   objective and single-instance gradients.
//! * [`pid_optimizer`] — the per-element integral/derivative state and the
//!   PID-adjusted SGD step.
//! * [`trainer`] — epoch loop, validation-driven stopping, metrics, imputation,
//!   ablation and parameter sweeps.
//! * [`io`] and [`config`] — CSV ingestion, interchange formats, the model
//!   artifact and the flat `key = value` run configuration.
//!
//! All randomness flows through [`rng::seeded`], which is ChaCha8 seeded from a
//! `u64`; results are reproducible across platforms for a given seed.

pub mod config;
pub mod error;
pub mod factor_model;
pub mod io;
pub mod pid_optimizer;
pub mod rng;
pub mod sparse_tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use factor_model::{FactorMatrix, FactorSet, Hyperparams, RegMode};
pub use pid_optimizer::{ControllerState, FirstVisitDerivative};
pub use sparse_tensor::{Entry, ScalingParams, SparseTensor, SplitSets};
pub use trainer::{Metrics, StopMetric, StopReason, TrainReport};
