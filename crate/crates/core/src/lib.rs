//! Continuous-time delay network for signal detection.
//!
//! The model evolves a scalar state `y(t)` driven by a windowed integral over
//! its own recent past (or an external input stream): at each time `t` a
//! kernel `K(tau, t)` is integrated against delayed samples `y(t - tau)` for
//! `tau` in `[0, T_w]`, and the integral's value feeds a pointwise
//! nonlinearity that becomes `dy/dt`. The kernel is a trainable weight grid —
//! piecewise linear along the delay axis, piecewise constant in time — so the
//! network can learn time-varying correlators such as matched filters.
//!
//! Crate layout:
//! - [`signals`]: time grids, chirp/noise generation, scene composition, and
//!   the matched-filter oracle used as ground truth.
//! - [`kernel`]: the trainable kernel parameterization and its evaluation.
//! - [`dynamics`]: delay buffer, cumulative quadrature of the drive integral,
//!   ODE steppers, and the full simulation loop.
//! - [`training`]: losses, reverse-mode and finite-difference gradients, and
//!   the training loop.
//! - [`config`] / [`experiment`]: TOML experiment configs and the file-level
//!   commands behind the CLI (generate / simulate / train / gradcheck).

pub mod config;
pub mod dynamics;
pub mod experiment;
pub mod kernel;
pub mod signals;
pub mod training;

mod util;

/// Errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A time grid or signal was constructed with inconsistent parameters.
    #[error("invalid grid: {reason}")]
    InvalidGrid { reason: String },

    /// A sample rate too coarse for the requested frequency content.
    #[error("aliasing: dt = {dt} undersamples peak frequency {f_max} Hz (needs dt <= {limit})")]
    Aliasing { dt: f64, f_max: f64, limit: f64 },

    /// Two grids (or a grid and a window) that must line up do not.
    #[error("grid mismatch: {reason}")]
    GridMismatch { reason: String },

    /// A query outside the domain an object covers.
    #[error("{what} = {value} out of range [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    /// Structurally invalid parameters (counts, lengths, non-finite weights…).
    #[error("invalid parameters: {reason}")]
    InvalidParams { reason: String },

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    /// The delay line does not hold enough history for the requested lookback.
    #[error("insufficient history: need {needed} samples, have {got}")]
    InsufficientHistory { needed: usize, got: usize },

    /// A requested operation is not available for the given configuration.
    #[error("unsupported: {reason}")]
    Unsupported { reason: String },

    /// Training aborted because the loss left the finite range.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// A malformed experiment config file.
    #[error("config error: {reason}")]
    Config { reason: String },

    /// A malformed data file (CSV, JSON).
    #[error("parse error: {reason}")]
    Parse { reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
