//! Gradients of the scene loss with respect to the kernel weights.
//!
//! The reverse pass differentiates the discrete forward computation exactly
//! as the Euler solver executes it (discretize-then-differentiate): adjoints
//! flow backward through the state recurrence, the activation, the
//! quadrature weights, the kernel's delay interpolation stencils, and — in
//! closed loop — the delay-line taps back into earlier state values. The
//! finite-difference path exists as the slow, independent check.

use super::{loss_mse, LossSignal, TrainConfig, TrainContext};
use crate::dynamics::{
    composite_weights, drive_tau_grid, history_len, initial_history, simulate, DriveMode, Stepper,
};
use crate::kernel::KernelParams;
use crate::signals::Scene;
use crate::util::{snap_index, split_index};
use crate::{Error, Result};

/// Central-difference step used when the config does not pin one.
const DEFAULT_FD_STEP: f64 = 1e-5;

/// Scene loss under a given kernel (forward simulation + MSE).
fn loss_of(
    params: &KernelParams,
    scene: &Scene,
    ctx: &TrainContext,
    loss_signal: LossSignal,
) -> Result<f64> {
    let out = simulate(&scene.input, params, &ctx.solver, ctx.nonlinearity, ctx.mode)?;
    let observed = match loss_signal {
        LossSignal::Drive => &out.drive,
        LossSignal::State => &out.state,
    };
    Ok(loss_mse(observed, &scene.target)?.mse)
}

/// Central finite differences over every weight: `2 * B * M` simulations.
pub fn grad_finite_difference(
    params: &KernelParams,
    scene: &Scene,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    fd_loss_grad(params, scene, ctx, cfg).map(|(_, g)| g)
}

pub(crate) fn fd_loss_grad(
    params: &KernelParams,
    scene: &Scene,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let h = match cfg.grad_mode {
        super::GradMode::FiniteDifference { step } => step,
        super::GradMode::UnrolledReverse => DEFAULT_FD_STEP,
    };
    let loss = loss_of(params, scene, ctx, cfg.loss_signal)?;
    let mut work = params.clone();
    let mut grad = vec![0.0; params.weights().len()];
    for i in 0..grad.len() {
        let orig = work.weights()[i];
        work.weights_mut()[i] = orig + h;
        let plus = loss_of(&work, scene, ctx, cfg.loss_signal)?;
        work.weights_mut()[i] = orig - h;
        let minus = loss_of(&work, scene, ctx, cfg.loss_signal)?;
        work.weights_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok((loss, grad))
}

/// Reverse-mode gradient through the unrolled Euler recurrence.
///
/// Only the Euler stepper is supported: its one-stage update keeps a clean
/// correspondence between forward values and adjoints. Multi-stage steppers
/// would need their provisional delay reads recorded too.
pub fn grad_unrolled_reverse(
    params: &KernelParams,
    scene: &Scene,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    reverse_loss_grad(params, scene, ctx, cfg).map(|(_, g)| g)
}

pub(crate) fn reverse_loss_grad(
    params: &KernelParams,
    scene: &Scene,
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    if ctx.solver.stepper != Stepper::Euler {
        return Err(Error::Unsupported {
            reason: "reverse-mode gradients require the euler stepper".into(),
        });
    }
    let solver = &ctx.solver;
    let f = ctx.nonlinearity;
    let out = simulate(&scene.input, params, solver, f, ctx.mode)?;
    let y = out.state.values();
    let u = out.drive.values();
    let observed = match cfg.loss_signal {
        LossSignal::Drive => &out.drive,
        LossSignal::State => &out.state,
    };
    let loss = loss_mse(observed, &scene.target)?.mse;
    let target = scene.target.values();
    let n = y.len();
    let inv_n = 1.0 / n as f64;
    let dt = solver.dt;

    // Sampling tables, identical arithmetic to the forward pass.
    let tau_grid = drive_tau_grid(params.window(), solver.dtau)?;
    let n_tau = tau_grid.len();
    let qw = composite_weights(solver.quadrature, tau_grid.dt(), n_tau);
    let cap = history_len(params.window(), dt);
    let ages: Vec<(usize, f64)> =
        (0..n_tau).map(|j| split_index(snap_index(tau_grid.node(j) / dt), cap)).collect();
    let delta_tau = params.delta_tau();
    let stencils: Vec<(usize, f64)> = (0..n_tau)
        .map(|j| split_index(snap_index(tau_grid.node(j) / delta_tau), params.tau_nodes()))
        .collect();
    let m_nodes = params.tau_nodes();
    let k_rows: Vec<Vec<f64>> = (0..params.t_blocks())
        .map(|b| {
            let row = params.block_weights(b);
            stencils
                .iter()
                .map(|&(m, frac)| {
                    if frac == 0.0 {
                        row[m]
                    } else {
                        (1.0 - frac) * row[m] + frac * row[m + 1]
                    }
                })
                .collect()
        })
        .collect();
    let history = initial_history(params, solver, &scene.input, ctx.mode)?;
    let closed = ctx.mode == DriveMode::ClosedLoop;
    let series: &[f64] = match ctx.mode {
        DriveMode::Buffer => scene.input.values(),
        DriveMode::ClosedLoop => y,
    };
    // Delay-line sample at trajectory index `idx` (negative = pre-start
    // history, stored newest first).
    let value_at = |idx: isize| -> f64 {
        if idx >= 0 {
            series[idx as usize]
        } else {
            history[(-idx) as usize]
        }
    };

    let mut ybar = vec![0.0; n];
    if cfg.loss_signal == LossSignal::State {
        for i in 0..n {
            ybar[i] = 2.0 * (y[i] - target[i]) * inv_n;
        }
    }
    let mut grad = vec![0.0; params.weights().len()];
    for i in (0..n).rev() {
        let mut ubar = match cfg.loss_signal {
            LossSignal::Drive => 2.0 * (u[i] - target[i]) * inv_n,
            LossSignal::State => 0.0,
        };
        if i + 1 < n {
            // y[i+1] = y[i] + dt * f(u[i])
            let downstream = ybar[i + 1];
            ybar[i] += downstream;
            ubar += downstream * dt * f.derivative(u[i]);
        }
        if ubar == 0.0 {
            continue;
        }
        let block = params.block_index(i as f64 * dt);
        let row = &k_rows[block];
        let base = block * m_nodes;
        for j in 0..n_tau {
            let w = qw[j];
            if w == 0.0 {
                continue;
            }
            let gbar = ubar * w;
            let (age, afrac) = ages[j];
            let idx = i as isize - age as isize;
            let v = if afrac == 0.0 {
                value_at(idx)
            } else {
                (1.0 - afrac) * value_at(idx) + afrac * value_at(idx - 1)
            };
            let (m, kfrac) = stencils[j];
            if kfrac == 0.0 {
                grad[base + m] += gbar * v;
            } else {
                grad[base + m] += gbar * v * (1.0 - kfrac);
                grad[base + m + 1] += gbar * v * kfrac;
            }
            if closed {
                // The tap also reaches back into earlier state values.
                let pbar = gbar * row[j];
                if afrac == 0.0 {
                    if idx >= 0 {
                        ybar[idx as usize] += pbar;
                    }
                } else {
                    if idx >= 0 {
                        ybar[idx as usize] += pbar * (1.0 - afrac);
                    }
                    if idx - 1 >= 0 {
                        ybar[(idx - 1) as usize] += pbar * afrac;
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::super::{GradMode, OptimizerKind, TrainConfig, TrainContext};
    use super::*;
    use crate::dynamics::{HistoryInit, Nonlinearity, Quadrature, SolverConfig};
    use crate::signals::{compose_scene, ChirpSpec, NoiseSpec, TimeGrid};

    fn ctx(mode: DriveMode, f: Nonlinearity) -> TrainContext {
        TrainContext {
            solver: SolverConfig {
                dt: 1e-2,
                dtau: 1e-2,
                stepper: Stepper::Euler,
                quadrature: Quadrature::Trapezoid,
                history: HistoryInit::Zeros,
            },
            mode,
            nonlinearity: f,
            threads: 1,
        }
    }

    fn cfg(loss_signal: LossSignal) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            grad_mode: GradMode::FiniteDifference { step: 1e-5 },
            loss_signal,
            clip: None,
            seed: 0,
        }
    }

    fn scene(seed: u64) -> Scene {
        let grid = TimeGrid::new(0.0, 1e-2, 50).unwrap();
        let spec =
            ChirpSpec { f_start: 3.0, f_end: 8.0, duration: 0.25, amplitude: 1.0, onset: 0.1 };
        compose_scene(&[spec], &NoiseSpec { sigma: 0.2, seed }, &grid).unwrap()
    }

    fn assert_grads_close(a: &[f64], b: &[f64]) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let tol = 1e-7f64.max(1e-4 * x.abs().max(y.abs()));
            assert!((x - y).abs() <= tol, "component {i}: {x} vs {y}");
        }
    }

    #[test]
    fn reverse_matches_finite_differences_in_buffer_mode() {
        let kernel = KernelParams::small_random(4, 1, 0.03, 0.5, 2, 0.3).unwrap();
        for f in [Nonlinearity::Identity, Nonlinearity::Tanh] {
            for ls in [LossSignal::Drive, LossSignal::State] {
                let c = ctx(DriveMode::Buffer, f);
                let fd = grad_finite_difference(&kernel, &scene(5), &c, &cfg(ls)).unwrap();
                let rv = grad_unrolled_reverse(&kernel, &scene(5), &c, &cfg(ls)).unwrap();
                assert_grads_close(&rv, &fd);
            }
        }
    }

    #[test]
    fn reverse_matches_finite_differences_in_closed_loop() {
        let kernel = KernelParams::small_random(4, 2, 0.03, 0.5, 7, 0.4).unwrap();
        let mut c = ctx(DriveMode::ClosedLoop, Nonlinearity::Tanh);
        c.solver.history = HistoryInit::FromSignal(
            crate::signals::Signal::from_fn(TimeGrid::new(-0.03, 1e-2, 4).unwrap(), |s| {
                (7.0 * s).cos()
            })
            .unwrap(),
        );
        for ls in [LossSignal::Drive, LossSignal::State] {
            let fd = grad_finite_difference(&kernel, &scene(6), &c, &cfg(ls)).unwrap();
            let rv = grad_unrolled_reverse(&kernel, &scene(6), &c, &cfg(ls)).unwrap();
            assert_grads_close(&rv, &fd);
        }
    }

    #[test]
    fn reverse_handles_coarser_quadrature_than_the_state_grid() {
        // dtau = 2 dt: delay nodes sit on even buffer slots only.
        let kernel = KernelParams::small_random(4, 1, 0.06, 0.5, 3, 0.3).unwrap();
        let mut c = ctx(DriveMode::Buffer, Nonlinearity::Tanh);
        c.solver.dtau = 2e-2;
        let fd = grad_finite_difference(&kernel, &scene(8), &c, &cfg(LossSignal::Drive)).unwrap();
        let rv = grad_unrolled_reverse(&kernel, &scene(8), &c, &cfg(LossSignal::Drive)).unwrap();
        assert_grads_close(&rv, &fd);
    }

    #[test]
    fn reverse_handles_off_grid_kernel_nodes() {
        // Kernel nodes at spacing 0.015 vs quadrature at 0.0075: alternating
        // nodes interpolate mid-span between weights.
        let kernel = KernelParams::small_random(3, 1, 0.03, 0.5, 4, 0.3).unwrap();
        let mut c = ctx(DriveMode::Buffer, Nonlinearity::Tanh);
        c.solver.dt = 7.5e-3;
        c.solver.dtau = 7.5e-3;
        let grid = TimeGrid::new(0.0, 7.5e-3, 60).unwrap();
        let spec =
            ChirpSpec { f_start: 3.0, f_end: 9.0, duration: 0.2, amplitude: 1.0, onset: 0.05 };
        let sc = compose_scene(&[spec], &NoiseSpec { sigma: 0.1, seed: 12 }, &grid).unwrap();
        let fd = grad_finite_difference(&kernel, &sc, &c, &cfg(LossSignal::Drive)).unwrap();
        let rv = grad_unrolled_reverse(&kernel, &sc, &c, &cfg(LossSignal::Drive)).unwrap();
        assert_grads_close(&rv, &fd);
    }

    #[test]
    fn reverse_rejects_multi_stage_steppers() {
        let kernel = KernelParams::small_random(4, 1, 0.03, 0.5, 2, 0.3).unwrap();
        let mut c = ctx(DriveMode::Buffer, Nonlinearity::Tanh);
        c.solver.stepper = Stepper::Rk4;
        assert!(matches!(
            grad_unrolled_reverse(&kernel, &scene(5), &c, &cfg(LossSignal::Drive)),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn gradient_of_an_insensitive_weight_is_zero() {
        // With a left-rectangle rule the last delay node never enters the
        // total, so its weight gradient must vanish identically.
        let kernel = KernelParams::small_random(4, 1, 0.03, 0.5, 2, 0.3).unwrap();
        let mut c = ctx(DriveMode::Buffer, Nonlinearity::Tanh);
        c.solver.quadrature = Quadrature::LeftRectangle;
        let rv = grad_unrolled_reverse(&kernel, &scene(5), &c, &cfg(LossSignal::Drive)).unwrap();
        assert_eq!(rv[3], 0.0);
        let fd = grad_finite_difference(&kernel, &scene(5), &c, &cfg(LossSignal::Drive)).unwrap();
        assert_eq!(fd[3], 0.0);
    }
}
