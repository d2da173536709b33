//! Adam, its continuous-time flow, and diagnostics for how its update
//! depends on the scale of the gradient.
//!
//! * [`optimizer`]: discrete Adam / AdamW, signSGD and gradient descent,
//!   each exposing the update vector `R_k`.
//! * [`flow`]: the continuous-time moment flow, a fixed-step RK4 integrator
//!   and closed-form oracles for exponential gradients.
//! * [`signal`] and [`drift`]: gradient signals, logarithmic drift and the
//!   first-order expansion of `m`, `v` and `R` with measured remainders.
//! * [`invariance`]: rescaling probes and the step-rescale experiment.
//! * [`metrics`]: EMA smoothing, oscillation metrics and the exact binomial
//!   test on diagonal selections.
//! * [`training`]: toy problems and the β-grid sweep.
//! * [`io`]: CSV readers and writers for every report.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod drift;
pub mod error;
pub mod flow;
pub mod invariance;
pub mod io;
pub mod metrics;
pub mod optimizer;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
