//! Ring buffer over the recent past of a sampled signal.
//!
//! The buffer stores `capacity` samples at fixed spacing `dt`, newest first:
//! age `k` means `head_time - k * dt`. Delayed reads interpolate linearly
//! between the two bracketing samples, so node-aligned lookbacks are exact.

use crate::util::{split_index, SNAP_TOL};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DelayBuffer {
    /// Ring storage; the sample with age `k` lives at `(head + k) % capacity`.
    entries: Vec<f64>,
    head: usize,
    head_time: f64,
    dt: f64,
}

impl DelayBuffer {
    /// Buffer filled with a constant (usually 0 for a quiet warm-up history).
    pub fn new(capacity: usize, dt: f64, head_time: f64, fill: f64) -> Result<Self> {
        Self::from_history(dt, head_time, &vec![fill; capacity])
    }

    /// Build from explicit history samples, newest first: `samples[k]` is the
    /// value at `head_time - k * dt`.
    pub fn from_history(dt: f64, head_time: f64, samples: &[f64]) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParams {
                reason: format!("buffer dt = {dt} must be positive and finite"),
            });
        }
        if samples.len() < 2 {
            return Err(Error::InsufficientHistory { needed: 2, got: samples.len() });
        }
        Ok(Self { entries: samples.to_vec(), head: 0, head_time, dt })
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time of the newest sample.
    pub fn head_time(&self) -> f64 {
        self.head_time
    }

    /// Newest stored value.
    pub fn head(&self) -> f64 {
        self.entries[self.head]
    }

    /// Deepest reachable lookback, `(capacity - 1) * dt`.
    pub fn window(&self) -> f64 {
        (self.capacity() - 1) as f64 * self.dt
    }

    /// Stored value with age `k` (0 = newest).
    pub fn value_at_age(&self, k: usize) -> f64 {
        self.entries[(self.head + k) % self.capacity()]
    }

    /// Append the next sample; the oldest entry falls out and the head time
    /// advances by `dt`.
    pub fn push(&mut self, value: f64) {
        let cap = self.capacity();
        self.head = (self.head + cap - 1) % cap;
        self.entries[self.head] = value;
        self.head_time += self.dt;
    }

    /// Value `tau` seconds before the head, by linear interpolation.
    pub fn lookup(&self, tau: f64) -> Result<f64> {
        let pos = tau / self.dt;
        let max = (self.capacity() - 1) as f64;
        if pos < -SNAP_TOL || pos > max + SNAP_TOL {
            return Err(Error::OutOfRange {
                what: "lookback",
                value: tau,
                min: 0.0,
                max: self.window(),
            });
        }
        let (k, frac) = split_index(pos, self.capacity());
        if frac == 0.0 {
            Ok(self.value_at_age(k))
        } else {
            Ok((1.0 - frac) * self.value_at_age(k) + frac * self.value_at_age(k + 1))
        }
    }

    /// Value at an absolute `time`, optionally extended past the head by one
    /// provisional point `(time, value)` — used by multi-stage steppers that
    /// need mid-step samples before anything is committed to the buffer.
    pub fn sample_at(&self, time: f64, ahead: Option<(f64, f64)>) -> Result<f64> {
        let tol = SNAP_TOL * self.dt;
        if let Some((t_ahead, v_ahead)) = ahead {
            if time > self.head_time + tol {
                if time > t_ahead + tol {
                    return Err(Error::OutOfRange {
                        what: "sample time",
                        value: time,
                        min: self.head_time - self.window(),
                        max: t_ahead,
                    });
                }
                if time >= t_ahead - tol || t_ahead <= self.head_time + tol {
                    return Ok(v_ahead);
                }
                let lambda = (time - self.head_time) / (t_ahead - self.head_time);
                return Ok((1.0 - lambda) * self.head() + lambda * v_ahead);
            }
        }
        self.lookup(self.head_time - time)
    }
}
