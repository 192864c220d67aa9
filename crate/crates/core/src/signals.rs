//! Time grids, test signals, and the matched-filter oracle.
//!
//! Everything downstream (dynamics, training) consumes [`Signal`]s on uniform
//! [`TimeGrid`]s. This module generates the chirp scenes used as detection
//! benchmarks and computes the matched-filter responses that serve as ground
//! truth for what a trained kernel should converge to.

use std::f64::consts::TAU;
use std::io::{self, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::util::{fmt_f64, snap_index, split_index, unit_f64, unit_f64_open, SNAP_TOL};
use crate::{Error, Result};

/// Uniform sampling lattice: `n` nodes at `t0 + i * dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    n: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n: usize) -> Result<Self> {
        if !t0.is_finite() || !dt.is_finite() {
            return Err(Error::InvalidGrid {
                reason: format!("non-finite t0 = {t0} or dt = {dt}"),
            });
        }
        if dt <= 0.0 {
            return Err(Error::InvalidGrid {
                reason: format!("dt = {dt} must be positive"),
            });
        }
        if n < 2 {
            return Err(Error::InvalidGrid {
                reason: format!("n = {n} must be at least 2"),
            });
        }
        Ok(Self { t0, dt, n })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.node(self.n - 1)
    }

    /// Length of the covered interval, `(n - 1) * dt`.
    pub fn span(&self) -> f64 {
        (self.n - 1) as f64 * self.dt
    }

    /// Real-valued node index of time `t` (0 at `t0`, 1 per `dt`).
    pub fn position(&self, t: f64) -> f64 {
        snap_index((t - self.t0) / self.dt)
    }

    /// True when both grids describe the same lattice up to rounding noise.
    pub fn approx_same(&self, other: &TimeGrid) -> bool {
        self.n == other.n
            && (self.dt - other.dt).abs() <= 1e-12 * self.dt
            && (self.t0 - other.t0).abs() <= SNAP_TOL * self.dt
    }
}

/// Finite sampled signal on a [`TimeGrid`]. Single-channel for now; the
/// channel count is carried explicitly so the layout can widen later.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    grid: TimeGrid,
    values: Vec<f64>,
    channels: usize,
}

impl Signal {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid {
                reason: format!(
                    "value count {} does not match grid length {}",
                    values.len(),
                    grid.len()
                ),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "signal values" });
        }
        Ok(Self { grid, values, channels: 1 })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self { values: vec![0.0; grid.len()], grid, channels: 1 }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(grid.node(i))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Linear interpolation at time `t`; node-aligned queries return the
    /// stored value exactly. `t` must lie within the grid.
    pub fn sample(&self, t: f64) -> Result<f64> {
        let pos = self.grid.position(t);
        let max = (self.grid.len() - 1) as f64;
        if pos < -SNAP_TOL || pos > max + SNAP_TOL {
            return Err(Error::OutOfRange {
                what: "sample time",
                value: t,
                min: self.grid.t0(),
                max: self.grid.end(),
            });
        }
        let (k, frac) = split_index(pos, self.grid.len());
        if frac == 0.0 {
            Ok(self.values[k])
        } else {
            Ok((1.0 - frac) * self.values[k] + frac * self.values[k + 1])
        }
    }
}

/// Linear chirp: instantaneous frequency sweeps `f_start -> f_end` hertz over
/// `duration` seconds starting at `onset`. Zero outside its support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChirpSpec {
    pub f_start: f64,
    pub f_end: f64,
    pub duration: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub onset: f64,
}

impl ChirpSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("f_start", self.f_start),
            ("f_end", self.f_end),
            ("duration", self.duration),
            ("amplitude", self.amplitude),
            ("onset", self.onset),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::InvalidParams { reason: format!("chirp {name} is not finite") });
            }
        }
        if self.duration <= 0.0 {
            return Err(Error::InvalidParams {
                reason: format!("chirp duration {} must be positive", self.duration),
            });
        }
        if self.f_start < 0.0 || self.f_end < 0.0 {
            return Err(Error::InvalidParams {
                reason: "chirp frequencies must be non-negative".into(),
            });
        }
        if self.amplitude < 0.0 {
            return Err(Error::InvalidParams {
                reason: format!("chirp amplitude {} must be non-negative", self.amplitude),
            });
        }
        Ok(())
    }

    /// End of the support, `onset + duration`.
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }

    /// Accumulated phase in cycles at `t`, measured from the onset. Zero at
    /// the onset by construction.
    fn phase_cycles(&self, t: f64) -> f64 {
        let s = t - self.onset;
        s * (self.f_start + (self.f_end - self.f_start) * s / (2.0 * self.duration))
    }

    /// Waveform value at `t` (zero outside `[onset, onset + duration]`).
    pub fn value_at(&self, t: f64) -> f64 {
        if t < self.onset || t > self.end() {
            0.0
        } else {
            self.amplitude * (TAU * self.phase_cycles(t)).sin()
        }
    }
}

/// Additive white Gaussian noise: standard deviation `sigma`, generator seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidParams {
                reason: format!("noise sigma {} must be finite and non-negative", self.sigma),
            });
        }
        Ok(())
    }
}

/// One benchmark instance: the noisy input stream and the detection target
/// the network is trained to reproduce.
#[derive(Debug, Clone)]
pub struct Scene {
    pub input: Signal,
    pub target: Signal,
}

/// Sample a chirp onto a grid.
///
/// Errors when the grid undersamples the chirp's peak frequency
/// (`dt > 1 / (2 f_max)`).
pub fn make_chirp(spec: &ChirpSpec, grid: &TimeGrid) -> Result<Signal> {
    spec.validate()?;
    let f_max = spec.f_start.max(spec.f_end);
    if f_max > 0.0 {
        let limit = 1.0 / (2.0 * f_max);
        if grid.dt() > limit {
            return Err(Error::Aliasing { dt: grid.dt(), f_max, limit });
        }
    }
    Signal::from_fn(*grid, |t| spec.value_at(t))
}

/// Deterministic standard-normal draws (Box–Muller over a counter-based
/// generator), so scenes are reproducible bit-for-bit from the seed.
fn gaussian_draws(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1 = unit_f64_open(rng.next_u64());
        let u2 = unit_f64(rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        out.push(r * c);
        out.push(r * s);
    }
    out.truncate(n);
    out
}

/// Add white Gaussian noise to a signal. `sigma = 0` returns the input
/// unchanged (bit-for-bit).
pub fn add_noise(signal: &Signal, noise: &NoiseSpec) -> Result<Signal> {
    noise.validate()?;
    if noise.sigma == 0.0 {
        return Ok(signal.clone());
    }
    let draws = gaussian_draws(signal.values().len(), noise.seed);
    let values = signal
        .values()
        .iter()
        .zip(&draws)
        .map(|(v, z)| v + noise.sigma * z)
        .collect();
    Signal::new(*signal.grid(), values)
}

/// Detection target for an observed signal: the sum of each chirp's
/// matched-filter response to that signal over the alignment times where the
/// matched window overlaps the chirp, zero elsewhere, scaled so the strongest
/// peak is 1. Peaks sit at each chirp's end, where its window aligns fully.
/// Computing the response from the observed (noisy) input keeps the target
/// realizable by a linear read-out of the same input, and localizing it to
/// each event keeps distinct chirps' read-outs from bleeding into each
/// other's time ranges.
fn detection_target(chirps: &[ChirpSpec], observed: &Signal) -> Result<Signal> {
    let grid = *observed.grid();
    let tol = SNAP_TOL * grid.dt();
    let mut acc = vec![0.0; grid.len()];
    for spec in chirps {
        if spec.amplitude == 0.0 {
            continue;
        }
        let m = (spec.duration / grid.dt()).round() as usize + 1;
        let tau_grid = TimeGrid::new(0.0, grid.dt(), m.max(2))?;
        let template = kernel_template(spec, &tau_grid)?;
        let window = tau_grid.span();
        for (k, slot) in acc.iter_mut().enumerate() {
            let t = grid.node(k);
            let fits = t - window >= grid.t0() - tol;
            let overlaps = t >= spec.onset - tol && t <= spec.end() + window + tol;
            if fits && overlaps {
                *slot += matched_filter_response(observed, &template, t)?;
            }
        }
    }
    let peak = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak > 0.0 {
        for v in &mut acc {
            *v /= peak;
        }
    }
    Signal::new(grid, acc)
}

/// Build a benchmark scene: input is the chirp superposition plus noise, the
/// target is the matched-filter response of that input (peak-normalized).
pub fn compose_scene(chirps: &[ChirpSpec], noise: &NoiseSpec, grid: &TimeGrid) -> Result<Scene> {
    let mut clean = Signal::zeros(*grid);
    for spec in chirps {
        let c = make_chirp(spec, grid)?;
        for (acc, v) in clean.values.iter_mut().zip(c.values()) {
            *acc += v;
        }
    }
    let input = add_noise(&clean, noise)?;
    let target = detection_target(chirps, &input)?;
    Ok(Scene { input, target })
}

/// Correlate `input` against a delay-domain `template` anchored at `t_align`:
/// `sum_j template[j] * input(t_align - tau_j) * dtau`. The template's
/// support must fit inside the input grid at that alignment.
pub fn matched_filter_response(input: &Signal, template: &Signal, t_align: f64) -> Result<f64> {
    let tg = template.grid();
    if tg.t0() != 0.0 {
        return Err(Error::GridMismatch {
            reason: format!("template grid must start at 0, got {}", tg.t0()),
        });
    }
    let ig = input.grid();
    let tol = SNAP_TOL * ig.dt();
    if t_align - tg.span() < ig.t0() - tol || t_align > ig.end() + tol {
        return Err(Error::OutOfRange {
            what: "alignment time",
            value: t_align,
            min: ig.t0() + tg.span(),
            max: ig.end(),
        });
    }
    let mut acc = 0.0;
    for j in 0..tg.len() {
        acc += template.values()[j] * input.sample(t_align - tg.node(j))?;
    }
    Ok(acc * tg.dt())
}

/// Matched-filter template for a chirp on a delay grid: the chirp read
/// backwards from its end (`value(end - tau)`), normalized to unit L2 norm.
/// A kernel equal to this template maximizes response at the chirp's end.
pub fn kernel_template(spec: &ChirpSpec, tau_grid: &TimeGrid) -> Result<Signal> {
    spec.validate()?;
    if tau_grid.t0() != 0.0 {
        return Err(Error::GridMismatch {
            reason: format!("delay grid must start at 0, got {}", tau_grid.t0()),
        });
    }
    let t_ref = spec.end();
    let mut values: Vec<f64> =
        (0..tau_grid.len()).map(|j| spec.value_at(t_ref - tau_grid.node(j))).collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    Signal::new(*tau_grid, values)
}

/// Write a scene as CSV (`t,input,target`), floats at full precision.
pub fn write_scene_csv<W: Write>(mut w: W, scene: &Scene) -> io::Result<()> {
    let grid = scene.input.grid();
    writeln!(w, "t,input,target")?;
    for i in 0..grid.len() {
        writeln!(
            w,
            "{},{},{}",
            fmt_f64(grid.node(i)),
            fmt_f64(scene.input.values()[i]),
            fmt_f64(scene.target.values()[i])
        )?;
    }
    Ok(())
}

/// Check two signals share a lattice before pointwise comparison.
pub(crate) fn require_same_grid(a: &Signal, b: &Signal, context: &str) -> Result<()> {
    if !a.grid().approx_same(b.grid()) || a.channels() != b.channels() {
        return Err(Error::GridMismatch {
            reason: format!(
                "{context}: grids differ ({:?} vs {:?})",
                a.grid(),
                b.grid()
            ),
        });
    }
    Ok(())
}
