//! Trainable integration kernel `K(tau, t)`.
//!
//! The kernel is a `t_blocks x tau_nodes` weight grid over the delay window
//! `[0, T_w]` and the time horizon `[0, horizon]`: linear interpolation
//! between delay nodes, piecewise constant across equal time blocks. This is
//! the whole trainable state of the network.

use std::io::{self, BufRead, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::signals::Signal;
use crate::util::{fmt_f64, snap_index, split_index, unit_f64, SNAP_TOL};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    tau_nodes: usize,
    t_blocks: usize,
    window: f64,
    horizon: f64,
    /// Row-major `[block][node]`.
    weights: Vec<f64>,
}

impl KernelParams {
    pub fn new(
        tau_nodes: usize,
        t_blocks: usize,
        window: f64,
        horizon: f64,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if tau_nodes < 2 {
            return Err(Error::InvalidParams {
                reason: format!("tau_nodes = {tau_nodes} must be at least 2"),
            });
        }
        if t_blocks == 0 {
            return Err(Error::InvalidParams { reason: "t_blocks must be positive".into() });
        }
        if !(window.is_finite() && window > 0.0) {
            return Err(Error::InvalidParams {
                reason: format!("window = {window} must be positive and finite"),
            });
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParams {
                reason: format!("horizon = {horizon} must be positive and finite"),
            });
        }
        if weights.len() != tau_nodes * t_blocks {
            return Err(Error::InvalidParams {
                reason: format!(
                    "weight count {} does not match {t_blocks} blocks x {tau_nodes} nodes",
                    weights.len()
                ),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { what: "kernel weights" });
        }
        Ok(Self { tau_nodes, t_blocks, window, horizon, weights })
    }

    pub fn zeros(tau_nodes: usize, t_blocks: usize, window: f64, horizon: f64) -> Result<Self> {
        Self::new(tau_nodes, t_blocks, window, horizon, vec![0.0; tau_nodes * t_blocks])
    }

    /// Uniform weights in `[-scale, scale]`, reproducible from the seed.
    pub fn small_random(
        tau_nodes: usize,
        t_blocks: usize,
        window: f64,
        horizon: f64,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::InvalidParams {
                reason: format!("init scale = {scale} must be non-negative"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..tau_nodes * t_blocks)
            .map(|_| scale * (2.0 * unit_f64(rng.next_u64()) - 1.0))
            .collect();
        Self::new(tau_nodes, t_blocks, window, horizon, weights)
    }

    pub fn tau_nodes(&self) -> usize {
        self.tau_nodes
    }

    pub fn t_blocks(&self) -> usize {
        self.t_blocks
    }

    /// Delay window length `T_w`.
    pub fn window(&self) -> f64 {
        self.window
    }

    /// Time horizon the blocks partition.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Spacing between delay nodes.
    pub fn delta_tau(&self) -> f64 {
        self.window / (self.tau_nodes - 1) as f64
    }

    /// Delay coordinate of node `m`.
    pub fn node_tau(&self, m: usize) -> f64 {
        m as f64 * self.delta_tau()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight(&self, block: usize, node: usize) -> f64 {
        self.weights[block * self.tau_nodes + node]
    }

    pub fn block_weights(&self, block: usize) -> &[f64] {
        &self.weights[block * self.tau_nodes..(block + 1) * self.tau_nodes]
    }

    /// Time block holding `t`: literal `floor(t * B / horizon)`, clamped so
    /// `t = horizon` (and boundary rounding noise) lands in the last block.
    pub fn block_index(&self, t: f64) -> usize {
        let pos = (t * self.t_blocks as f64 / self.horizon).floor();
        (pos.max(0.0) as usize).min(self.t_blocks - 1)
    }

    /// Kernel value at `(tau, t)`: linear in `tau`, block-constant in `t`.
    /// Node-aligned delays return the stored weight exactly.
    pub fn eval(&self, tau: f64, t: f64) -> Result<f64> {
        let pos = snap_index(tau / self.delta_tau());
        let max = (self.tau_nodes - 1) as f64;
        if pos < -SNAP_TOL || pos > max + SNAP_TOL {
            return Err(Error::OutOfRange { what: "delay", value: tau, min: 0.0, max: self.window });
        }
        let t_tol = SNAP_TOL * self.horizon;
        if t < -t_tol || t > self.horizon + t_tol {
            return Err(Error::OutOfRange { what: "time", value: t, min: 0.0, max: self.horizon });
        }
        let row = self.block_weights(self.block_index(t));
        let (k, frac) = split_index(pos, self.tau_nodes);
        if frac == 0.0 {
            Ok(row[k])
        } else {
            Ok((1.0 - frac) * row[k] + frac * row[k + 1])
        }
    }

    /// Write as CSV (`block,tau,weight`), block-major, full float precision.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "block,tau,weight")?;
        for b in 0..self.t_blocks {
            for m in 0..self.tau_nodes {
                writeln!(w, "{b},{},{}", fmt_f64(self.node_tau(m)), fmt_f64(self.weight(b, m)))?;
            }
        }
        Ok(())
    }

    /// Read the CSV layout produced by [`write_csv`](Self::write_csv). The
    /// grid shape and window are inferred from the rows; the horizon is not
    /// stored in the file and must be supplied.
    pub fn read_csv<R: BufRead>(r: R, horizon: f64) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Parse { reason: "empty kernel file".into() })?;
        if header.trim() != "block,tau,weight" {
            return Err(Error::Parse {
                reason: format!("bad kernel header {:?}, expected block,tau,weight", header.trim()),
            });
        }
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let parse_err = |what: &str| Error::Parse {
                reason: format!("kernel row {}: bad {what}: {line:?}", idx + 2),
            };
            let block: usize = cols
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| parse_err("block"))?;
            let tau: f64 =
                cols.next().and_then(|c| c.trim().parse().ok()).ok_or_else(|| parse_err("tau"))?;
            let weight: f64 = cols
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| parse_err("weight"))?;
            if cols.next().is_some() {
                return Err(parse_err("column count"));
            }
            rows.push((block, tau, weight));
        }
        let t_blocks = rows.iter().map(|r| r.0).max().map_or(0, |b| b + 1);
        if t_blocks == 0 {
            return Err(Error::Parse { reason: "kernel file has no rows".into() });
        }
        if rows.len() % t_blocks != 0 {
            return Err(Error::Parse {
                reason: format!("{} rows do not split into {t_blocks} equal blocks", rows.len()),
            });
        }
        let tau_nodes = rows.len() / t_blocks;
        if tau_nodes < 2 {
            return Err(Error::Parse { reason: "kernel needs at least two delay nodes".into() });
        }
        let window = rows[tau_nodes - 1].1;
        if !(window.is_finite() && window > 0.0) {
            return Err(Error::Parse { reason: format!("bad delay window {window}") });
        }
        let delta = window / (tau_nodes - 1) as f64;
        let mut weights = Vec::with_capacity(rows.len());
        for (i, (block, tau, weight)) in rows.iter().enumerate() {
            let (eb, em) = (i / tau_nodes, i % tau_nodes);
            if *block != eb {
                return Err(Error::Parse {
                    reason: format!("row {}: block {block} out of order (expected {eb})", i + 2),
                });
            }
            if (tau - em as f64 * delta).abs() > SNAP_TOL * window.max(1.0) {
                return Err(Error::Parse {
                    reason: format!("row {}: tau {tau} off the uniform node grid", i + 2),
                });
            }
            weights.push(*weight);
        }
        Self::new(tau_nodes, t_blocks, window, horizon, weights)
    }
}

/// Cosine similarity between each block's weight row and a reference
/// template sampled on the same delay nodes. Returns one value per block in
/// `[-1, 1]`; zero when either side has zero norm.
pub fn kernel_similarity(params: &KernelParams, templates: &[Signal]) -> Result<Vec<f64>> {
    if templates.len() != params.t_blocks() {
        return Err(Error::InvalidParams {
            reason: format!(
                "{} templates for {} blocks; need one per block",
                templates.len(),
                params.t_blocks()
            ),
        });
    }
    let delta = params.delta_tau();
    let mut out = Vec::with_capacity(templates.len());
    for (b, template) in templates.iter().enumerate() {
        let g = template.grid();
        if g.len() != params.tau_nodes()
            || g.t0() != 0.0
            || (g.dt() - delta).abs() > SNAP_TOL * delta.max(1.0)
        {
            return Err(Error::GridMismatch {
                reason: format!(
                    "template {b}: grid does not match kernel nodes \
                     (len {} vs {}, dt {} vs {})",
                    g.len(),
                    params.tau_nodes(),
                    g.dt(),
                    delta
                ),
            });
        }
        let row = params.block_weights(b);
        let (mut dot, mut nw, mut nt) = (0.0, 0.0, 0.0);
        for (w, v) in row.iter().zip(template.values()) {
            dot += w * v;
            nw += w * w;
            nt += v * v;
        }
        out.push(if nw == 0.0 || nt == 0.0 { 0.0 } else { dot / (nw.sqrt() * nt.sqrt()) });
    }
    Ok(out)
}
