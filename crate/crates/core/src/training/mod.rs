//! Kernel training: losses, gradients, and the epoch loop.
//!
//! Each epoch evaluates loss and gradient on every scene with the current
//! kernel, averages the loss, sums the gradients in a fixed tree order (so
//! results are bit-identical regardless of thread count), applies one
//! optimizer update, and records the epoch. Loss entries therefore describe
//! the kernel *before* that epoch's update.

mod grad;
mod optimizer;

pub use grad::{grad_finite_difference, grad_unrolled_reverse};

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, DriveMode, Nonlinearity, SolverConfig};
use crate::kernel::KernelParams;
use crate::signals::{require_same_grid, Scene, Signal};
use crate::util::fmt_f64;
use crate::{Error, Result};

/// Mean squared error plus the per-sample residuals it averages.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub mse: f64,
    pub per_sample: Option<Vec<f64>>,
}

/// Pointwise squared error between two signals on the same grid.
pub fn loss_mse(output: &Signal, target: &Signal) -> Result<LossReport> {
    require_same_grid(output, target, "loss")?;
    let per: Vec<f64> = output
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    let mse = per.iter().sum::<f64>() / per.len() as f64;
    Ok(LossReport { mse, per_sample: Some(per) })
}

/// Which simulated trace the loss compares against the target: the drive
/// `u(t, T_w)` (a correlator readout) or the integrated state `y(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSignal {
    #[default]
    Drive,
    State,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_defaults() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradMode {
    UnrolledReverse,
    FiniteDifference { step: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub grad_mode: GradMode,
    pub loss_signal: LossSignal,
    /// Scale the summed gradient down to this L2 norm when it exceeds it.
    pub clip: Option<f64>,
    /// Reserved for stochastic training variants; nothing draws from it yet,
    /// but it participates in config hashing so runs stay labeled.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParams {
                reason: format!("learning rate {} must be non-negative", self.learning_rate),
            });
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParams {
                    reason: format!("gradient clip {c} must be positive"),
                });
            }
        }
        if let GradMode::FiniteDifference { step } = self.grad_mode {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::InvalidParams {
                    reason: format!("finite-difference step {step} must be positive"),
                });
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return Err(Error::InvalidParams {
                    reason: format!("bad adam parameters ({beta1}, {beta2}, {epsilon})"),
                });
            }
        }
        Ok(())
    }
}

/// Everything about *how* scenes are simulated during training.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub solver: SolverConfig,
    pub mode: DriveMode,
    pub nonlinearity: Nonlinearity,
    /// Worker threads for per-scene evaluation; results do not depend on it.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean scene loss under the kernel entering this epoch.
    pub loss: f64,
    /// L2 norm of the summed (pre-clip) gradient.
    pub grad_norm: f64,
    /// Snapshot file reference, when one was written this epoch.
    pub snapshot: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Write as CSV (`epoch,loss,grad_norm`), floats at full precision.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,loss,grad_norm")?;
        for r in &self.records {
            writeln!(w, "{},{},{}", r.epoch, fmt_f64(r.loss), fmt_f64(r.grad_norm))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: KernelParams,
    pub trace: TrainTrace,
    /// Epoch at which the loss left the finite range, if training aborted.
    pub diverged_at: Option<usize>,
}

/// Pairwise (tree-shaped) sum: a fixed reduction order independent of how
/// work was distributed across threads.
fn tree_sum_vecs(mut items: Vec<Vec<f64>>) -> Vec<f64> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        items = next;
    }
    items.pop().expect("at least one item")
}

fn tree_sum_scalars(mut items: Vec<f64>) -> f64 {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            next.push(if let Some(b) = it.next() { a + b } else { a });
        }
        items = next;
    }
    items[0]
}

type SceneEval = Result<(f64, Vec<f64>)>;

fn eval_scene(
    params: &KernelParams,
    scene: &Scene,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> SceneEval {
    match cfg.grad_mode {
        GradMode::UnrolledReverse => grad::reverse_loss_grad(params, scene, ctx, cfg),
        GradMode::FiniteDifference { .. } => grad::fd_loss_grad(params, scene, ctx, cfg),
    }
}

fn eval_all_scenes(
    params: &KernelParams,
    scenes: &[Scene],
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Vec<SceneEval> {
    if ctx.threads <= 1 || scenes.len() <= 1 {
        return scenes.iter().map(|s| eval_scene(params, s, ctx, cfg)).collect();
    }
    let chunk = scenes.len().div_ceil(ctx.threads);
    let mut out: Vec<Option<SceneEval>> = (0..scenes.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (slots, chunk_scenes) in out.chunks_mut(chunk).zip(scenes.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, scene) in slots.iter_mut().zip(chunk_scenes) {
                    *slot = Some(eval_scene(params, scene, ctx, cfg));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Mean scene loss under fixed parameters (no gradients), reduced in the
/// same tree order the epoch loop uses, so the value matches a trace entry
/// for the same kernel bit for bit.
pub fn mean_loss(
    params: &KernelParams,
    scenes: &[Scene],
    ctx: &TrainContext,
    loss_signal: LossSignal,
) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::InvalidParams { reason: "loss needs at least one scene".into() });
    }
    let mut losses = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let out = simulate(&scene.input, params, &ctx.solver, ctx.nonlinearity, ctx.mode)?;
        let observed = match loss_signal {
            LossSignal::Drive => &out.drive,
            LossSignal::State => &out.state,
        };
        losses.push(loss_mse(observed, &scene.target)?.mse);
    }
    Ok(tree_sum_scalars(losses) / scenes.len() as f64)
}

/// Train a kernel on a set of scenes. Equivalent to [`train_observed`] with
/// no snapshot hook.
pub fn train(
    init: &KernelParams,
    scenes: &[Scene],
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    train_observed(init, scenes, ctx, cfg, &mut |_, _| None)
}

/// Full training loop. `observer` runs after each epoch's update with the
/// fresh kernel and may return a snapshot reference to record. A non-finite
/// loss (or a trajectory that blows up mid-simulation) stops training at
/// that epoch; the partial trace and last good kernel are returned with
/// `diverged_at` set.
pub fn train_observed(
    init: &KernelParams,
    scenes: &[Scene],
    ctx: &TrainContext,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, &KernelParams) -> Option<String>,
) -> Result<TrainRun> {
    cfg.validate()?;
    ctx.solver.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidParams { reason: "training needs at least one scene".into() });
    }
    let mut params = init.clone();
    let mut opt = optimizer::OptimizerState::new(cfg.optimizer, params.weights().len());
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::with_capacity(scenes.len());
        let mut grads = Vec::with_capacity(scenes.len());
        let mut diverged = false;
        for r in eval_all_scenes(&params, scenes, ctx, cfg) {
            match r {
                Ok((loss, grad)) => {
                    losses.push(loss);
                    grads.push(grad);
                }
                Err(Error::NonFinite { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let loss = if diverged {
            f64::NAN
        } else {
            tree_sum_scalars(losses) / scenes.len() as f64
        };
        if !loss.is_finite() {
            return Ok(TrainRun { params, trace, diverged_at: Some(epoch) });
        }
        let mut grad = tree_sum_vecs(grads);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(limit) = cfg.clip {
            if grad_norm > limit {
                let scale = limit / grad_norm;
                for g in &mut grad {
                    *g *= scale;
                }
            }
        }
        opt.apply(params.weights_mut(), &grad, cfg.learning_rate);
        let snapshot = observer(epoch, &params);
        trace.records.push(EpochRecord { epoch, loss, grad_norm, snapshot });
    }
    Ok(TrainRun { params, trace, diverged_at: None })
}
