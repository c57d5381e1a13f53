//! Desk-scale engine for diffusion-based probabilistic forecasting of
//! spatio-temporal systems.
//!
//! The pieces, bottom-up:
//!
//! - [`grid`] — weighted grids, states, conditioning windows, ensembles
//! - [`edm`] — noise schedules and preconditioning coefficients
//! - [`rng`] — keyed, schedule-independent random streams
//! - [`noise`] — fixed, OU-correlated and iid driving noise
//! - [`denoiser`] — preconditioned backends: a trainable conv net with
//!   hand-written gradients, and an exact Gaussian-posterior oracle
//! - [`sampler`] — the probability-flow ODE and the Heun solver
//! - [`forecast`] — continuous, OU-extended, ARCI and baseline rollouts
//! - [`train`] — denoising objective, lead-time loss scales, optimizer
//! - [`metrics`] — latitude-weighted RMSE / Spread / SSR / CRPS / temporal
//!   difference
//!
//! Every sampling path is a pure function of explicit seeds: rerunning any
//! pipeline with the same configuration reproduces results bit-for-bit,
//! regardless of thread count or evaluation order.

pub mod dft;
pub mod denoiser;
pub mod edm;
pub mod error;
pub mod forecast;
pub mod grid;
pub mod metrics;
pub mod noise;
pub mod rng;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
