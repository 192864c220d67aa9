//! Delay-network dynamics.
//!
//! The state obeys `dy/dt = f(u(t, T_w))` where the drive
//! `u(t, T) = integral over tau in [0, T] of K(tau, t) * x(t - tau)` runs
//! over the recent past of either the external input stream or the state
//! itself (closed loop). The drive is evaluated by cumulative quadrature
//! along the delay axis — u as a function of window depth, with `u(t, 0) = 0`
//! identically — and the outer ODE is advanced by an explicit stepper.

mod buffer;
mod stepper;

pub use buffer::DelayBuffer;
pub use stepper::{euler_step, rk4_step};

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::kernel::KernelParams;
use crate::signals::{Signal, TimeGrid};
use crate::util::{fmt_f64, snap_index, split_index, SNAP_TOL};
use crate::{Error, Result};

/// Pointwise activation applied to the drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Relu,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
        }
    }

    /// Derivative at `x`; relu uses the subgradient 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Nonlinearity::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Outer ODE stepper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stepper {
    Euler,
    Rk4,
}

/// Quadrature rule for the delay integral. Trapezoid is the default;
/// the left-rectangle rule exists to match plain delay-sum recurrences
/// term for term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    Trapezoid,
    LeftRectangle,
}

/// What the delay line carries: the external input stream, or the state
/// itself fed back (closed loop).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveMode {
    Buffer,
    ClosedLoop,
}

/// Pre-start contents of the delay line, in elapsed-time coordinates
/// (the simulation starts at 0; history covers `[-T_w, 0]`).
#[derive(Debug, Clone, Default)]
pub enum HistoryInit {
    #[default]
    Zeros,
    FromSignal(Signal),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Outer time step (must match the input grid spacing).
    pub dt: f64,
    /// Delay-axis quadrature spacing; must divide the kernel window.
    pub dtau: f64,
    pub stepper: Stepper,
    pub quadrature: Quadrature,
    pub history: HistoryInit,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("dt", self.dt), ("dtau", self.dtau)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams {
                    reason: format!("solver {name} = {v} must be positive and finite"),
                });
            }
        }
        Ok(())
    }
}

/// Cumulative drive along the delay axis at a fixed time: `values[j]` is the
/// integral truncated at depth `tau_j`, so `values[0] == 0` exactly and the
/// last entry is the full-window drive.
#[derive(Debug, Clone)]
pub struct DriveProfile {
    pub tau_grid: TimeGrid,
    pub values: Vec<f64>,
}

impl DriveProfile {
    /// Full-window drive `u(t, T_w)`.
    pub fn total(&self) -> f64 {
        *self.values.last().expect("grid has at least two nodes")
    }
}

/// Quadrature grid along the delay axis: `[0, window]` at spacing `dtau`.
pub fn drive_tau_grid(window: f64, dtau: f64) -> Result<TimeGrid> {
    if !(dtau.is_finite() && dtau > 0.0) {
        return Err(Error::InvalidParams { reason: format!("dtau = {dtau} must be positive") });
    }
    let steps = window / dtau;
    let rounded = steps.round();
    if (steps - rounded).abs() > 1e-9 * steps.max(1.0) || rounded < 1.0 {
        return Err(Error::GridMismatch {
            reason: format!("dtau = {dtau} does not divide the delay window {window}"),
        });
    }
    TimeGrid::new(0.0, dtau, rounded as usize + 1)
}

fn accumulate(quad: Quadrature, dtau: f64, prev: f64, cur: f64) -> f64 {
    match quad {
        Quadrature::Trapezoid => 0.5 * dtau * (prev + cur),
        Quadrature::LeftRectangle => dtau * prev,
    }
}

/// Cumulative quadrature of `K(tau, t) * x(t - tau)` over the delay grid.
pub fn integrate_drive(
    buf: &DelayBuffer,
    kernel: &KernelParams,
    t: f64,
    tau_grid: &TimeGrid,
    quad: Quadrature,
) -> Result<DriveProfile> {
    if tau_grid.t0() != 0.0 {
        return Err(Error::GridMismatch {
            reason: format!("delay grid must start at 0, got {}", tau_grid.t0()),
        });
    }
    if (tau_grid.span() - kernel.window()).abs() > SNAP_TOL * kernel.window().max(1.0) {
        return Err(Error::GridMismatch {
            reason: format!(
                "delay grid span {} does not cover the kernel window {}",
                tau_grid.span(),
                kernel.window()
            ),
        });
    }
    if tau_grid.span() > buf.window() + SNAP_TOL * buf.dt() {
        return Err(Error::InsufficientHistory {
            needed: history_len(kernel.window(), buf.dt()),
            got: buf.capacity(),
        });
    }
    let n = tau_grid.len();
    let mut values = vec![0.0; n];
    let sample = |j: usize| -> Result<f64> {
        let tau = tau_grid.node(j);
        Ok(kernel.eval(tau, t)? * buf.lookup(tau)?)
    };
    let mut prev = sample(0)?;
    for j in 1..n {
        let cur = sample(j)?;
        values[j] = values[j - 1] + accumulate(quad, tau_grid.dt(), prev, cur);
        prev = cur;
    }
    Ok(DriveProfile { tau_grid: *tau_grid, values })
}

/// Number of buffer samples needed to cover a delay window at spacing `dt`:
/// the lookback depth rounded to the grid (or up, when off it), plus the head.
pub(crate) fn history_len(window: f64, dt: f64) -> usize {
    let steps = window / dt;
    let rounded = steps.round();
    let k = if (steps - rounded).abs() <= 1e-9 * steps.max(1.0) {
        rounded as usize
    } else {
        steps.ceil() as usize
    };
    (k + 1).max(2)
}

/// Composite quadrature weight of each delay node in the full-window total.
pub(crate) fn composite_weights(quad: Quadrature, dtau: f64, n: usize) -> Vec<f64> {
    let mut w = vec![dtau; n];
    match quad {
        Quadrature::Trapezoid => {
            w[0] = 0.5 * dtau;
            w[n - 1] = 0.5 * dtau;
        }
        Quadrature::LeftRectangle => {
            w[n - 1] = 0.0;
        }
    }
    w
}

/// Precomputed sampling tables for the inner quadrature loop: kernel values
/// at each delay node per time block, and the ring offsets of each node.
pub(crate) struct DriveContext<'k> {
    pub(crate) kernel: &'k KernelParams,
    pub(crate) taus: Vec<f64>,
    /// `(age, frac)` per delay node, valid while the buffer spacing is `dt`.
    ages: Vec<(usize, f64)>,
    /// Kernel value at each delay node, one row per time block.
    pub(crate) k_rows: Vec<Vec<f64>>,
    dtau: f64,
    quad: Quadrature,
}

impl<'k> DriveContext<'k> {
    pub(crate) fn new(
        kernel: &'k KernelParams,
        cfg: &SolverConfig,
        tau_grid: &TimeGrid,
        buf: &DelayBuffer,
    ) -> Result<Self> {
        if (buf.dt() - cfg.dt).abs() > 1e-12 * cfg.dt {
            return Err(Error::GridMismatch {
                reason: format!("buffer spacing {} differs from solver dt {}", buf.dt(), cfg.dt),
            });
        }
        if tau_grid.span() > buf.window() + SNAP_TOL * buf.dt() {
            return Err(Error::InsufficientHistory {
                needed: history_len(kernel.window(), cfg.dt),
                got: buf.capacity(),
            });
        }
        let taus: Vec<f64> = (0..tau_grid.len()).map(|j| tau_grid.node(j)).collect();
        let ages = taus
            .iter()
            .map(|&tau| split_index(snap_index(tau / cfg.dt), buf.capacity()))
            .collect();
        let k_rows = (0..kernel.t_blocks())
            .map(|b| {
                let t_mid = (b as f64 + 0.5) * kernel.horizon() / kernel.t_blocks() as f64;
                taus.iter().map(|&tau| kernel.eval(tau, t_mid)).collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kernel, taus, ages, k_rows, dtau: tau_grid.dt(), quad: cfg.quadrature })
    }

    fn sample_node(&self, buf: &DelayBuffer, j: usize) -> f64 {
        let (k, frac) = self.ages[j];
        if frac == 0.0 {
            buf.value_at_age(k)
        } else {
            (1.0 - frac) * buf.value_at_age(k) + frac * buf.value_at_age(k + 1)
        }
    }

    /// Full-window drive at the buffer head. Same accumulation order as
    /// [`integrate_drive`], so the two agree bit for bit.
    pub(crate) fn drive_total(&self, buf: &DelayBuffer, block: usize) -> f64 {
        let row = &self.k_rows[block];
        let mut cum = 0.0;
        let mut prev = row[0] * self.sample_node(buf, 0);
        for j in 1..row.len() {
            let cur = row[j] * self.sample_node(buf, j);
            cum += accumulate(self.quad, self.dtau, prev, cur);
            prev = cur;
        }
        cum
    }

    /// Full-window drive at `head_time + delta`, extending the buffer with a
    /// provisional point (`ahead_offset` past the head, value `ahead_value`).
    fn drive_total_staged(
        &self,
        buf: &DelayBuffer,
        block: usize,
        delta: f64,
        ahead_offset: f64,
        ahead_value: f64,
    ) -> Result<f64> {
        let row = &self.k_rows[block];
        let ahead = Some((buf.head_time() + ahead_offset, ahead_value));
        let base = buf.head_time() + delta;
        let mut cum = 0.0;
        let mut prev = row[0] * buf.sample_at(base - self.taus[0], ahead)?;
        for j in 1..row.len() {
            let cur = row[j] * buf.sample_at(base - self.taus[j], ahead)?;
            cum += accumulate(self.quad, self.dtau, prev, cur);
            prev = cur;
        }
        Ok(cum)
    }
}

/// What enters the delay line when a step commits.
#[derive(Debug, Clone, Copy)]
pub enum StepDrive {
    /// Feed the state back (the step's own output).
    ClosedLoop,
    /// Feed the next input sample (value at `t + dt`).
    External { next_input: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    pub y_next: f64,
    /// Full-window drive at the step's start time.
    pub drive_total: f64,
}

/// Advance the state by one step from time `t` (elapsed since simulation
/// start) and push the next sample into the delay line.
pub fn step(
    y: f64,
    buf: &mut DelayBuffer,
    kernel: &KernelParams,
    t: f64,
    cfg: &SolverConfig,
    f: Nonlinearity,
    drive: StepDrive,
) -> Result<StepResult> {
    cfg.validate()?;
    let tau_grid = drive_tau_grid(kernel.window(), cfg.dtau)?;
    let ctx = DriveContext::new(kernel, cfg, &tau_grid, buf)?;
    step_with(&ctx, y, buf, t, cfg, f, drive)
}

pub(crate) fn step_with(
    ctx: &DriveContext,
    y: f64,
    buf: &mut DelayBuffer,
    t: f64,
    cfg: &SolverConfig,
    f: Nonlinearity,
    drive: StepDrive,
) -> Result<StepResult> {
    let horizon = ctx.kernel.horizon();
    if t < -SNAP_TOL * horizon || t > horizon + SNAP_TOL * horizon {
        return Err(Error::OutOfRange { what: "step time", value: t, min: 0.0, max: horizon });
    }
    let u0 = ctx.drive_total(buf, ctx.kernel.block_index(t));
    let h = cfg.dt;
    let y_next = match cfg.stepper {
        Stepper::Euler => y + h * f.apply(u0),
        Stepper::Rk4 => {
            let stage = |delta: f64, y_trial: f64| -> Result<f64> {
                let block = ctx.kernel.block_index(t + delta);
                let (off, val) = match drive {
                    StepDrive::ClosedLoop => (delta, y_trial),
                    StepDrive::External { next_input } => (h, next_input),
                };
                Ok(f.apply(ctx.drive_total_staged(buf, block, delta, off, val)?))
            };
            let k1 = f.apply(u0);
            let k2 = stage(0.5 * h, y + 0.5 * h * k1)?;
            let k3 = stage(0.5 * h, y + 0.5 * h * k2)?;
            let k4 = stage(h, y + h * k3)?;
            y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        }
    };
    buf.push(match drive {
        StepDrive::ClosedLoop => y_next,
        StepDrive::External { next_input } => next_input,
    });
    Ok(StepResult { y_next, drive_total: u0 })
}

/// Initial delay-line contents (newest first) for a simulation starting at
/// elapsed time 0. In buffer mode the head is the first input sample and the
/// pre-start past comes from the history init; in closed loop the whole line
/// is history.
pub(crate) fn initial_history(
    kernel: &KernelParams,
    cfg: &SolverConfig,
    input: &Signal,
    mode: DriveMode,
) -> Result<Vec<f64>> {
    let cap = history_len(kernel.window(), cfg.dt);
    let mut h = vec![0.0; cap];
    match &cfg.history {
        HistoryInit::Zeros => {}
        HistoryInit::FromSignal(s) => {
            for (k, slot) in h.iter_mut().enumerate() {
                *slot = s.sample(-(k as f64) * cfg.dt)?;
            }
        }
    }
    if mode == DriveMode::Buffer {
        h[0] = input.values()[0];
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// State trajectory `y(t)` on the input grid.
    pub state: Signal,
    /// Full-window drive `u(t, T_w)` on the same grid.
    pub drive: Signal,
}

/// Integrate the network over the input's grid. In closed-loop mode the
/// input supplies only the grid; the delay line carries the state.
pub fn simulate(
    input: &Signal,
    kernel: &KernelParams,
    cfg: &SolverConfig,
    f: Nonlinearity,
    mode: DriveMode,
) -> Result<SimOutput> {
    cfg.validate()?;
    let grid = *input.grid();
    if (grid.dt() - cfg.dt).abs() > 1e-12 * cfg.dt {
        return Err(Error::GridMismatch {
            reason: format!("input grid dt {} differs from solver dt {}", grid.dt(), cfg.dt),
        });
    }
    if kernel.horizon() < grid.span() - SNAP_TOL * grid.span().max(1.0) {
        return Err(Error::GridMismatch {
            reason: format!(
                "kernel horizon {} shorter than the simulated span {}",
                kernel.horizon(),
                grid.span()
            ),
        });
    }
    let tau_grid = drive_tau_grid(kernel.window(), cfg.dtau)?;
    let history = initial_history(kernel, cfg, input, mode)?;
    let mut buf = DelayBuffer::from_history(cfg.dt, 0.0, &history)?;
    let ctx = DriveContext::new(kernel, cfg, &tau_grid, &buf)?;
    let n = grid.len();
    let mut ys = vec![0.0; n];
    let mut us = vec![0.0; n];
    let mut y = match mode {
        DriveMode::Buffer => 0.0,
        DriveMode::ClosedLoop => history[0],
    };
    for i in 0..n {
        ys[i] = y;
        let t = i as f64 * cfg.dt;
        if i + 1 < n {
            let drive = match mode {
                DriveMode::Buffer => StepDrive::External { next_input: input.values()[i + 1] },
                DriveMode::ClosedLoop => StepDrive::ClosedLoop,
            };
            let r = step_with(&ctx, y, &mut buf, t, cfg, f, drive)?;
            us[i] = r.drive_total;
            y = r.y_next;
        } else {
            us[i] = ctx.drive_total(&buf, ctx.kernel.block_index(t));
        }
    }
    let state =
        Signal::new(grid, ys).map_err(|_| Error::NonFinite { what: "state trajectory" })?;
    let drive = Signal::new(grid, us).map_err(|_| Error::NonFinite { what: "drive trace" })?;
    Ok(SimOutput { state, drive })
}

/// Reference discrete delay network: `y[n+1] = f(sum_k w[k] * y[n-k])`.
/// Returns the history extended by `steps` new samples.
pub fn discrete_tdnn(
    history: &[f64],
    weights: &[f64],
    f: Nonlinearity,
    steps: usize,
) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidParams { reason: "discrete kernel must be non-empty".into() });
    }
    if history.len() < weights.len() {
        return Err(Error::InsufficientHistory { needed: weights.len(), got: history.len() });
    }
    let mut seq = history.to_vec();
    for _ in 0..steps {
        let last = seq.len() - 1;
        let mut acc = 0.0;
        for (tau, w) in weights.iter().enumerate() {
            acc += w * seq[last - tau];
        }
        seq.push(f.apply(acc));
    }
    Ok(seq)
}

/// Write a trajectory as CSV (`t,y,u_T`), floats at full precision.
pub fn write_trajectory_csv<W: Write>(mut w: W, out: &SimOutput) -> io::Result<()> {
    let grid = out.state.grid();
    writeln!(w, "t,y,u_T")?;
    for i in 0..grid.len() {
        writeln!(
            w,
            "{},{},{}",
            fmt_f64(grid.node(i)),
            fmt_f64(out.state.values()[i]),
            fmt_f64(out.drive.values()[i])
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * crate::util::unit_f64(rng.next_u64())
    }

    fn solver(dt: f64, dtau: f64) -> SolverConfig {
        SolverConfig {
            dt,
            dtau,
            stepper: Stepper::Euler,
            quadrature: Quadrature::Trapezoid,
            history: HistoryInit::Zeros,
        }
    }

    #[test]
    fn profile_starts_at_zero_and_grows_linearly_for_constants() {
        // Constant kernel c and constant history v: u(t, tau) = c * v * tau.
        let kernel = KernelParams::new(11, 1, 0.5, 1.0, vec![0.8; 11]).unwrap();
        let buf = DelayBuffer::new(101, 5e-3, 0.0, 1.5).unwrap();
        let tau_grid = drive_tau_grid(0.5, 0.05).unwrap();
        let p = integrate_drive(&buf, &kernel, 0.3, &tau_grid, Quadrature::Trapezoid).unwrap();
        assert_eq!(p.values[0], 0.0);
        for (j, &v) in p.values.iter().enumerate() {
            assert_relative_eq!(v, 0.8 * 1.5 * tau_grid.node(j), max_relative = 1e-12);
        }
    }

    #[test]
    fn profile_is_monotone_for_nonnegative_integrands() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let m = 2 + (rng.next_u64() % 30) as usize;
            let weights: Vec<f64> = (0..m).map(|_| uniform(&mut rng, 0.0, 2.0)).collect();
            let kernel = KernelParams::new(m, 1, 0.2, 1.0, weights).unwrap();
            let hist: Vec<f64> =
                (0..201).map(|_| uniform(&mut rng, 0.0, 3.0)).collect();
            let buf = DelayBuffer::from_history(1e-3, 0.0, &hist).unwrap();
            let tau_grid = drive_tau_grid(0.2, 1e-3).unwrap();
            let p =
                integrate_drive(&buf, &kernel, 0.5, &tau_grid, Quadrature::Trapezoid).unwrap();
            for pair in p.values.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-15);
            }
        }
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
        assert!(intervals % 2 == 0);
        let h = (b - a) / intervals as f64;
        let mut acc = f(a) + f(b);
        for i in 1..intervals {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn trapezoid_total_converges_at_second_order() {
        // K(tau) = sin(3 tau), x(t - tau) = cos(2 (t - tau)) over a unit
        // window; refine kernel nodes, buffer, and quadrature together and
        // compare against a dense Simpson oracle. Halving the spacing must
        // cut the error by about 4.
        let t = 2.0;
        let oracle = simpson(|tau| (3.0 * tau).sin() * (2.0 * (t - tau)).cos(), 0.0, 1.0, 1000);
        let err_at = |steps: usize| -> f64 {
            let h = 1.0 / steps as f64;
            let m = steps + 1;
            let weights: Vec<f64> = (0..m).map(|j| (3.0 * j as f64 * h).sin()).collect();
            let kernel = KernelParams::new(m, 1, 1.0, 3.0, weights).unwrap();
            let hist: Vec<f64> = (0..m).map(|k| (2.0 * (t - k as f64 * h)).cos()).collect();
            let buf = DelayBuffer::from_history(h, t, &hist).unwrap();
            let tau_grid = drive_tau_grid(1.0, h).unwrap();
            let p = integrate_drive(&buf, &kernel, t, &tau_grid, Quadrature::Trapezoid).unwrap();
            (p.total() - oracle).abs()
        };
        let (e1, e2, e3) = (err_at(50), err_at(100), err_at(200));
        for ratio in [e1 / e2, e2 / e3] {
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio} ({e1} {e2} {e3})");
        }
    }

    #[test]
    fn left_rectangle_total_matches_a_plain_delay_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let m = 6;
        let weights: Vec<f64> = (0..m).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let kernel = KernelParams::new(m, 1, 0.5, 1.0, weights.clone()).unwrap();
        let hist: Vec<f64> = (0..m).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let buf = DelayBuffer::from_history(0.1, 0.0, &hist).unwrap();
        let tau_grid = drive_tau_grid(0.5, 0.1).unwrap();
        let p =
            integrate_drive(&buf, &kernel, 0.2, &tau_grid, Quadrature::LeftRectangle).unwrap();
        let mut naive = 0.0;
        for k in 0..m - 1 {
            naive += 0.1 * (weights[k] * hist[k]);
        }
        assert_eq!(p.total(), naive);
    }

    #[test]
    fn euler_step_matches_the_hand_formula() {
        // Constant kernel and history: u = c * v * T_w (trapezoid is exact),
        // so one Euler step gives y + dt * tanh(u).
        let kernel = KernelParams::new(5, 1, 0.2, 1.0, vec![0.6; 5]).unwrap();
        let mut buf = DelayBuffer::new(5, 0.05, 0.0, 2.0).unwrap();
        let cfg = solver(0.05, 0.05);
        let r = step(
            0.3,
            &mut buf,
            &kernel,
            0.0,
            &cfg,
            Nonlinearity::Tanh,
            StepDrive::External { next_input: 2.0 },
        )
        .unwrap();
        let u = 0.6 * 2.0 * 0.2;
        assert_relative_eq!(r.drive_total, u, max_relative = 1e-12);
        assert_relative_eq!(r.y_next, 0.3 + 0.05 * u.tanh(), max_relative = 1e-12);
    }

    #[test]
    fn step_pushes_state_or_input_depending_on_mode() {
        let kernel = KernelParams::zeros(5, 1, 0.2, 1.0).unwrap();
        let cfg = solver(0.05, 0.05);
        let mut buf = DelayBuffer::new(5, 0.05, 0.0, 0.0).unwrap();
        let r = step(1.25, &mut buf, &kernel, 0.0, &cfg, Nonlinearity::Identity, StepDrive::ClosedLoop)
            .unwrap();
        assert_eq!(buf.head(), r.y_next);
        assert_eq!(buf.head_time(), 0.05);
        let mut buf2 = DelayBuffer::new(5, 0.05, 0.0, 0.0).unwrap();
        step(
            1.25,
            &mut buf2,
            &kernel,
            0.0,
            &cfg,
            Nonlinearity::Identity,
            StepDrive::External { next_input: 7.5 },
        )
        .unwrap();
        assert_eq!(buf2.head(), 7.5);
    }

    #[test]
    fn simulate_rejects_mismatched_grids() {
        let grid = TimeGrid::new(0.0, 1e-3, 100).unwrap();
        let input = Signal::zeros(grid);
        let kernel = KernelParams::zeros(5, 1, 0.02, 1.0).unwrap();
        // Solver dt differs from the grid spacing.
        let bad_dt = solver(2e-3, 0.005);
        assert!(matches!(
            simulate(&input, &kernel, &bad_dt, Nonlinearity::Identity, DriveMode::Buffer),
            Err(Error::GridMismatch { .. })
        ));
        // dtau does not divide the window.
        let bad_dtau = solver(1e-3, 0.003);
        assert!(matches!(
            simulate(&input, &kernel, &bad_dtau, Nonlinearity::Identity, DriveMode::Buffer),
            Err(Error::GridMismatch { .. })
        ));
        // Kernel horizon shorter than the simulated span.
        let short = KernelParams::zeros(5, 1, 0.02, 0.05).unwrap();
        assert!(matches!(
            simulate(&input, &short, &solver(1e-3, 0.005), Nonlinearity::Identity, DriveMode::Buffer),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn zero_input_zero_kernel_stays_quiescent() {
        let grid = TimeGrid::new(0.0, 1e-3, 200).unwrap();
        let kernel = KernelParams::zeros(11, 2, 0.05, 0.2).unwrap();
        let out = simulate(
            &Signal::zeros(grid),
            &kernel,
            &solver(1e-3, 5e-3),
            Nonlinearity::Tanh,
            DriveMode::Buffer,
        )
        .unwrap();
        assert!(out.state.values().iter().all(|&v| v == 0.0));
        assert!(out.drive.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_loop_exponential_tracks_the_analytic_solution() {
        // K(tau) = e^tau / T_w makes y(t) = e^t a solution when the history
        // is e^s: the integrand K(tau) e^(t-tau) is constant in tau, so the
        // trapezoid is exact and the error comes from the stepper alone.
        let t_w = 0.2;
        let dt = 1e-3;
        let m = 201;
        let weights: Vec<f64> = (0..m).map(|j| (j as f64 * dt).exp() / t_w).collect();
        let kernel = KernelParams::new(m, 1, t_w, 1.0, weights).unwrap();
        let grid = TimeGrid::new(0.0, dt, 1001).unwrap();
        let hist_grid = TimeGrid::new(-t_w, dt, m).unwrap();
        let history = Signal::from_fn(hist_grid, |s| s.exp()).unwrap();
        let cfg = SolverConfig {
            dt,
            dtau: dt,
            stepper: Stepper::Rk4,
            quadrature: Quadrature::Trapezoid,
            history: HistoryInit::FromSignal(history),
        };
        let out = simulate(
            &Signal::zeros(grid),
            &kernel,
            &cfg,
            Nonlinearity::Identity,
            DriveMode::ClosedLoop,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for (i, &y) in out.state.values().iter().enumerate() {
            let exact = (i as f64 * dt).exp();
            worst = worst.max((y - exact).abs() / exact);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn tdnn_requires_enough_history_and_matches_a_nested_loop() {
        assert!(discrete_tdnn(&[1.0, 2.0], &[0.5, 0.5, 0.5], Nonlinearity::Identity, 3).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &f in &[Nonlinearity::Identity, Nonlinearity::Tanh] {
            let weights: Vec<f64> = (0..4).map(|_| uniform(&mut rng, -0.6, 0.6)).collect();
            let history: Vec<f64> = (0..4).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let got = discrete_tdnn(&history, &weights, f, 12).unwrap();
            // Oracle: independent nested loops over the growing sequence.
            let mut oracle = history.clone();
            for _ in 0..12 {
                let t = oracle.len() - 1;
                let mut acc = 0.0;
                for (tau, w) in weights.iter().enumerate() {
                    acc += w * oracle[t - tau];
                }
                oracle.push(f.apply(acc));
            }
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn trajectory_csv_round_trips_values() {
        let grid = TimeGrid::new(0.0, 0.5, 4).unwrap();
        let out = SimOutput {
            state: Signal::new(grid, vec![0.0, 0.1, -0.2, 0.3]).unwrap(),
            drive: Signal::new(grid, vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        };
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &out).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,y,u_T"));
        for (i, line) in lines.enumerate() {
            let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cols[1].to_bits(), out.state.values()[i].to_bits());
            assert_eq!(cols[2].to_bits(), out.drive.values()[i].to_bits());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn simulate_is_deterministic(seed in any::<u64>()) {
            let grid = TimeGrid::new(0.0, 1e-2, 64).unwrap();
            let kernel = KernelParams::small_random(6, 2, 0.05, 0.64, seed, 0.4).unwrap();
            let input = crate::signals::add_noise(
                &Signal::zeros(grid),
                &crate::signals::NoiseSpec { sigma: 1.0, seed },
            ).unwrap();
            let cfg = solver(1e-2, 1e-2);
            let a = simulate(&input, &kernel, &cfg, Nonlinearity::Tanh, DriveMode::Buffer).unwrap();
            let b = simulate(&input, &kernel, &cfg, Nonlinearity::Tanh, DriveMode::Buffer).unwrap();
            prop_assert_eq!(a.state.values(), b.state.values());
            prop_assert_eq!(a.drive.values(), b.drive.values());
        }
    }
}
