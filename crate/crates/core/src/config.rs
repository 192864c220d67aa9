//! Experiment configuration: a strict TOML file describing the scenes, the
//! kernel shape, the solver, and (optionally) training.
//!
//! Parsing is deliberately unforgiving — unknown keys are errors — so a typo
//! cannot silently fall back to a default. The semantic sections hash to a
//! stable identifier that labels every artifact produced from the config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    drive_tau_grid, history_len, DriveMode, HistoryInit, Nonlinearity, Quadrature, SolverConfig,
    Stepper,
};
use crate::kernel::KernelParams;
use crate::signals::{compose_scene, ChirpSpec, NoiseSpec, Scene, Signal, TimeGrid};
use crate::training::{GradMode, LossSignal, OptimizerKind, TrainConfig, TrainContext};
use crate::{Error, Result};

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSection,
    pub kernel: KernelSection,
    pub solver: SolverSection,
    #[serde(default)]
    pub train: Option<TrainSection>,
    /// Where commands write artifacts; `--out` overrides it.
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// The signal ensemble: one chirp layout, `count` independent noise draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    /// Total simulated span in seconds; must be a whole number of `dt` steps.
    pub duration: f64,
    /// Noise standard deviation (0 disables noise).
    pub sigma: f64,
    /// Base RNG seed; scene `i` uses `seed + i`.
    pub seed: u64,
    /// Number of noise realizations of the same chirp layout.
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub chirps: Vec<ChirpSpec>,
}

fn default_count() -> usize {
    1
}

/// Kernel discretization and initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub tau_nodes: usize,
    pub t_blocks: usize,
    /// Delay window `T_w` in seconds.
    pub window: f64,
    #[serde(default)]
    pub init: KernelInit,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelInit {
    #[default]
    Zeros,
    SmallRandom,
    /// `K(τ) = e^τ / T_w`, identical in every block: the kernel whose
    /// closed-loop fixed point (with `exp` history) is `y(t) = e^t`.
    Exp,
}

/// Numerics: step sizes, stepper, drive topology, activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub dt: f64,
    pub dtau: f64,
    pub stepper: Stepper,
    pub drive: DriveMode,
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub quadrature: QuadratureChoice,
    #[serde(default)]
    pub history: HistoryChoice,
}

/// Mirrors `Quadrature` with a serde default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureChoice {
    #[default]
    Trapezoid,
    LeftRectangle,
}

impl From<QuadratureChoice> for Quadrature {
    fn from(q: QuadratureChoice) -> Quadrature {
        match q {
            QuadratureChoice::Trapezoid => Quadrature::Trapezoid,
            QuadratureChoice::LeftRectangle => Quadrature::LeftRectangle,
        }
    }
}

/// Pre-start delay-line contents. `Exp` fills with `e^s` for `s ≤ 0`, the
/// history that pairs with an exponential-kernel closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryChoice {
    #[default]
    Zeros,
    Exp,
}

/// Training hyperparameters; flat keys so the TOML stays hand-editable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerChoice,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_epsilon")]
    pub adam_epsilon: f64,
    #[serde(default)]
    pub grad: GradChoice,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub loss: LossSignal,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Write a kernel snapshot every this many epochs (0 = none).
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_epsilon() -> f64 {
    1e-8
}

fn default_fd_step() -> f64 {
    1e-5
}

fn default_snapshot_every() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradChoice {
    #[default]
    UnrolledReverse,
    FiniteDifference,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse { reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Structural checks beyond what parsing enforces. Everything here is
    /// also caught later by the domain constructors; failing early gives the
    /// line of the config, not the middle of a run.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let horizon = grid.span();
        if self.scene.count == 0 {
            return Err(Error::Config { reason: "scene.count must be at least 1".into() });
        }
        if !self.scene.sigma.is_finite() || self.scene.sigma < 0.0 {
            return Err(Error::Config {
                reason: format!("scene.sigma = {} must be non-negative", self.scene.sigma),
            });
        }
        for (i, c) in self.scene.chirps.iter().enumerate() {
            c.validate().map_err(|e| Error::Config { reason: format!("chirp {i}: {e}") })?;
            let f_max = c.f_start.max(c.f_end);
            if f_max > 0.0 && self.solver.dt > 0.5 / f_max {
                return Err(Error::Aliasing {
                    dt: self.solver.dt,
                    f_max,
                    limit: 0.5 / f_max,
                });
            }
            if c.end() > horizon + 1e-9 * horizon.max(1.0) {
                return Err(Error::Config {
                    reason: format!(
                        "chirp {i} ends at {} but the scene spans only {horizon}",
                        c.end()
                    ),
                });
            }
        }
        if self.kernel.window > horizon + 1e-9 * horizon.max(1.0) {
            return Err(Error::Config {
                reason: format!(
                    "kernel.window = {} exceeds the scene span {horizon}",
                    self.kernel.window
                ),
            });
        }
        // Shape check (node count, positivity) without allocating for real.
        KernelParams::zeros(self.kernel.tau_nodes, self.kernel.t_blocks, self.kernel.window, horizon)
            .map_err(|e| Error::Config { reason: format!("kernel: {e}") })?;
        if !self.kernel.init_scale.is_finite() || self.kernel.init_scale < 0.0 {
            return Err(Error::Config {
                reason: format!("kernel.init_scale = {} must be non-negative", self.kernel.init_scale),
            });
        }
        self.solver_config()?.validate()?;
        drive_tau_grid(self.kernel.window, self.solver.dtau)
            .map_err(|e| Error::Config { reason: format!("solver.dtau: {e}") })?;
        if let Some(t) = &self.train {
            self.train_config_from(t)?.validate()?;
        }
        Ok(())
    }

    /// The shared time grid (elapsed time, starting at 0).
    pub fn grid(&self) -> Result<TimeGrid> {
        let dt = self.solver.dt;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config { reason: format!("solver.dt = {dt} must be positive") });
        }
        let steps = self.scene.duration / dt;
        let rounded = steps.round();
        if !(steps.is_finite() && rounded >= 1.0) || (steps - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(Error::Config {
                reason: format!(
                    "scene.duration = {} is not a whole number of dt = {dt} steps",
                    self.scene.duration
                ),
            });
        }
        TimeGrid::new(0.0, dt, rounded as usize + 1)
    }

    /// Kernel horizon == scene span: blocks tile exactly the simulated range.
    pub fn horizon(&self) -> Result<f64> {
        Ok(self.grid()?.span())
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        self.scene.seed.wrapping_add(index as u64)
    }

    /// Scene `index`: same chirps, the index-th noise draw.
    pub fn build_scene(&self, index: usize) -> Result<Scene> {
        let grid = self.grid()?;
        let noise = NoiseSpec { sigma: self.scene.sigma, seed: self.scene_seed(index) };
        compose_scene(&self.scene.chirps, &noise, &grid)
    }

    pub fn build_kernel(&self) -> Result<KernelParams> {
        let horizon = self.horizon()?;
        let k = &self.kernel;
        match k.init {
            KernelInit::Zeros => KernelParams::zeros(k.tau_nodes, k.t_blocks, k.window, horizon),
            KernelInit::SmallRandom => KernelParams::small_random(
                k.tau_nodes,
                k.t_blocks,
                k.window,
                horizon,
                k.init_seed,
                k.init_scale,
            ),
            KernelInit::Exp => {
                let base = KernelParams::zeros(k.tau_nodes, k.t_blocks, k.window, horizon)?;
                let row: Vec<f64> =
                    (0..k.tau_nodes).map(|j| base.node_tau(j).exp() / k.window).collect();
                let weights = row.iter().copied().cycle().take(k.tau_nodes * k.t_blocks).collect();
                KernelParams::new(k.tau_nodes, k.t_blocks, k.window, horizon, weights)
            }
        }
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let history = match self.solver.history {
            HistoryChoice::Zeros => HistoryInit::Zeros,
            HistoryChoice::Exp => {
                let cap = history_len(self.kernel.window, self.solver.dt);
                let grid = TimeGrid::new(-((cap - 1) as f64) * self.solver.dt, self.solver.dt, cap)?;
                HistoryInit::FromSignal(Signal::from_fn(grid, f64::exp)?)
            }
        };
        Ok(SolverConfig {
            dt: self.solver.dt,
            dtau: self.solver.dtau,
            stepper: self.solver.stepper,
            quadrature: self.solver.quadrature.into(),
            history,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = self.train.as_ref().ok_or_else(|| Error::Config {
            reason: "this command needs a [train] section".into(),
        })?;
        self.train_config_from(t)
    }

    fn train_config_from(&self, t: &TrainSection) -> Result<TrainConfig> {
        let optimizer = match t.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::Adam {
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                epsilon: t.adam_epsilon,
            },
        };
        let grad_mode = match t.grad {
            GradChoice::UnrolledReverse => GradMode::UnrolledReverse,
            GradChoice::FiniteDifference => GradMode::FiniteDifference { step: t.fd_step },
        };
        Ok(TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            optimizer,
            grad_mode,
            loss_signal: t.loss,
            clip: t.clip,
            seed: t.seed,
        })
    }

    pub fn train_context(&self, threads: usize) -> Result<TrainContext> {
        Ok(TrainContext {
            solver: self.solver_config()?,
            mode: self.solver.drive,
            nonlinearity: self.solver.nonlinearity,
            threads,
        })
    }

    /// Hex SHA-256 over the canonical JSON of the semantic sections.
    /// `output_dir` (and CLI flags) are excluded: they relocate artifacts
    /// without changing what gets computed.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&(&self.scene, &self.kernel, &self.solver, &self.train))
            .expect("config sections serialize infallibly");
        let digest = Sha256::digest(&canonical);
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}
