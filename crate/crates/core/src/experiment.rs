//! Experiment commands shared by the CLI and the test suites: scene
//! generation, simulation, training, and the gradient cross-check. Each
//! command is a pure function of (config, flags) and writes its artifacts
//! under an output directory; reruns produce byte-identical files apart
//! from the wall-clock field in the training report.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dynamics::{simulate, write_trajectory_csv, Stepper};
use crate::kernel::{kernel_similarity, KernelParams};
use crate::signals::{kernel_template, write_scene_csv, Scene, Signal, TimeGrid};
use crate::training::{
    grad_finite_difference, grad_unrolled_reverse, mean_loss, train_observed, GradMode,
    OptimizerKind, TrainConfig, TrainRun,
};
use crate::{Error, Result};

/// Elementwise gradient-check tolerances: a component passes when
/// `|reverse - fd| <= max(ABS, REL * max(|reverse|, |fd|))`.
pub const GRADCHECK_ABS_TOL: f64 = 1e-7;
pub const GRADCHECK_REL_TOL: f64 = 1e-4;

/// Record of what `cmd_generate` wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub scene_seeds: Vec<u64>,
    pub files: Vec<String>,
}

/// Summary of a training run; non-finite losses serialize as JSON null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub epochs_run: usize,
    pub diverged_at_epoch: Option<usize>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Cosine similarity of each learned block row against its matched
    /// template (0 for blocks with no chirp, null if degenerate).
    pub block_similarity: Vec<Option<f64>>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config_hash: String,
    pub weights: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub pass: bool,
}

/// Everything `cmd_train` produced, for callers that inspect the run.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub report: TrainReport,
    pub run: TrainRun,
    pub report_path: PathBuf,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config { reason: format!("report serialization: {e}") })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Write every scene the config describes plus a manifest of what was done.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..cfg.scene.count {
        let scene = cfg.build_scene(i)?;
        let name = format!("scene_{i}.csv");
        write_scene_csv(BufWriter::new(File::create(out.join(&name))?), &scene)?;
        seeds.push(cfg.scene_seed(i));
        files.push(name);
    }
    let manifest = Manifest { config_hash: cfg.hash(), scene_seeds: seeds, files };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Read a kernel CSV and require it to match the discretization the config
/// declares; anything else would silently reinterpret the weights.
pub fn load_kernel_checked(cfg: &ExperimentConfig, path: &Path) -> Result<KernelParams> {
    let horizon = cfg.horizon()?;
    let k = KernelParams::read_csv(BufReader::new(File::open(path)?), horizon)?;
    if k.tau_nodes() != cfg.kernel.tau_nodes || k.t_blocks() != cfg.kernel.t_blocks {
        return Err(Error::GridMismatch {
            reason: format!(
                "kernel file holds {} blocks x {} nodes but the config declares {} x {}",
                k.t_blocks(),
                k.tau_nodes(),
                cfg.kernel.t_blocks,
                cfg.kernel.tau_nodes
            ),
        });
    }
    if (k.window() - cfg.kernel.window).abs() > 1e-9 * cfg.kernel.window.max(1.0) {
        return Err(Error::GridMismatch {
            reason: format!(
                "kernel file window {} does not match the config window {}",
                k.window(),
                cfg.kernel.window
            ),
        });
    }
    Ok(k)
}

/// Simulate every scene under one kernel (loaded from `kernel_file` when
/// given, otherwise the config's init) and write the trajectories.
pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    out: &Path,
    kernel_file: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let kernel = match kernel_file {
        Some(p) => load_kernel_checked(cfg, p)?,
        None => cfg.build_kernel()?,
    };
    fs::create_dir_all(out)?;
    let solver = cfg.solver_config()?;
    let mut written = Vec::new();
    for i in 0..cfg.scene.count {
        let scene = cfg.build_scene(i)?;
        let sim =
            simulate(&scene.input, &kernel, &solver, cfg.solver.nonlinearity, cfg.solver.drive)?;
        let path = out.join(format!("trajectory_{i}.csv"));
        write_trajectory_csv(BufWriter::new(File::create(&path)?), &sim)?;
        written.push(path);
    }
    Ok(written)
}

/// Matched template for each kernel block on the kernel's τ grid: block `b`
/// gets the time-reversed copy of the first chirp whose end falls in its
/// span, or an all-zero template when no chirp does. A kernel row that
/// learned to detect its block's chirp converges toward this shape.
pub fn block_templates(cfg: &ExperimentConfig) -> Result<Vec<Signal>> {
    let kernel = cfg.build_kernel()?;
    let tau_grid = TimeGrid::new(0.0, kernel.delta_tau(), kernel.tau_nodes())?;
    let mut out = Vec::with_capacity(kernel.t_blocks());
    for b in 0..kernel.t_blocks() {
        let spec = cfg.scene.chirps.iter().find(|c| kernel.block_index(c.end()) == b);
        out.push(match spec {
            Some(c) => kernel_template(c, &tau_grid)?,
            None => Signal::zeros(tau_grid),
        });
    }
    Ok(out)
}

/// Train the configured kernel, writing `trace.csv`, periodic
/// `kernel_epoch_{n}.csv` snapshots, `kernel_final.csv`, and `report.json`.
/// A diverged run still writes all artifacts (the report records the epoch);
/// the caller decides what exit status that deserves.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let train_cfg = cfg.train_config()?;
    let snapshot_every = cfg.train.as_ref().map_or(0, |t| t.snapshot_every);
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let scenes: Vec<Scene> =
        (0..cfg.scene.count).map(|i| cfg.build_scene(i)).collect::<Result<_>>()?;
    let init = cfg.build_kernel()?;
    let ctx = cfg.train_context(threads)?;

    // The observer cannot return an error, so the first write failure is
    // parked and re-raised after the loop.
    let mut snapshot_err: Option<Error> = None;
    let mut observer = |epoch: usize, params: &KernelParams| -> Option<String> {
        if snapshot_every == 0 || (epoch + 1) % snapshot_every != 0 {
            return None;
        }
        let name = format!("kernel_epoch_{}.csv", epoch + 1);
        let result = File::create(out.join(&name))
            .and_then(|f| params.write_csv(BufWriter::new(f)));
        match result {
            Ok(()) => Some(name),
            Err(e) => {
                snapshot_err.get_or_insert(e.into());
                None
            }
        }
    };
    let run = train_observed(&init, &scenes, &ctx, &train_cfg, &mut observer)?;
    if let Some(e) = snapshot_err {
        return Err(e);
    }

    run.trace.write_csv(BufWriter::new(File::create(out.join("trace.csv"))?))?;
    run.params.write_csv(BufWriter::new(File::create(out.join("kernel_final.csv"))?))?;

    let initial_loss = match run.trace.records.first() {
        Some(r) => finite(r.loss),
        None if run.diverged_at.is_some() => None,
        None => finite(mean_loss(&init, &scenes, &ctx, train_cfg.loss_signal)?),
    };
    let final_loss = if run.diverged_at.is_some() {
        run.trace.records.last().and_then(|r| finite(r.loss))
    } else {
        finite(mean_loss(&run.params, &scenes, &ctx, train_cfg.loss_signal)?)
    };
    let block_similarity = kernel_similarity(&run.params, &block_templates(cfg)?)?
        .into_iter()
        .map(finite)
        .collect();
    let report = TrainReport {
        config_hash: cfg.hash(),
        epochs_run: run.trace.records.len(),
        diverged_at_epoch: run.diverged_at,
        initial_loss,
        final_loss,
        block_similarity,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    Ok(TrainArtifacts { report, run, report_path })
}

/// Cross-check the reverse-mode gradient against central finite differences
/// on scene 0 and write the discrepancy report. `pass` is false when any
/// component exceeds tolerance; the caller maps that to its exit status.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<GradcheckReport> {
    cfg.validate()?;
    let dim = cfg.kernel.tau_nodes * cfg.kernel.t_blocks;
    if dim > 64 {
        return Err(Error::Config {
            reason: format!(
                "gradient check is for small kernels (tau_nodes * t_blocks <= 64), got {dim}"
            ),
        });
    }
    if cfg.solver.stepper != Stepper::Euler {
        return Err(Error::Config {
            reason: "gradient check requires the euler stepper".into(),
        });
    }
    fs::create_dir_all(out)?;
    let scene = cfg.build_scene(0)?;
    let kernel = cfg.build_kernel()?;
    let ctx = cfg.train_context(1)?;
    let (loss_signal, fd_step) =
        cfg.train.as_ref().map_or((Default::default(), 1e-5), |t| (t.loss, t.fd_step));
    let train_cfg = TrainConfig {
        epochs: 0,
        learning_rate: 0.0,
        optimizer: OptimizerKind::Sgd,
        grad_mode: GradMode::FiniteDifference { step: fd_step },
        loss_signal,
        clip: None,
        seed: 0,
    };
    let mut reverse = grad_unrolled_reverse(&kernel, &scene, &ctx, &train_cfg)?;
    corrupt_for_tests(&mut reverse);
    let fd = grad_finite_difference(&kernel, &scene, &ctx, &train_cfg)?;
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut pass = true;
    for (a, b) in reverse.iter().zip(&fd) {
        let diff = (a - b).abs();
        let scale = a.abs().max(b.abs());
        max_abs = max_abs.max(diff);
        if scale > 0.0 {
            max_rel = max_rel.max(diff / scale);
        }
        if diff > GRADCHECK_ABS_TOL.max(GRADCHECK_REL_TOL * scale) {
            pass = false;
        }
    }
    let report = GradcheckReport {
        config_hash: cfg.hash(),
        weights: dim,
        abs_tol: GRADCHECK_ABS_TOL,
        rel_tol: GRADCHECK_REL_TOL,
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        pass,
    };
    write_json(&out.join("gradcheck_report.json"), &report)?;
    Ok(report)
}

/// Negative-control hook for integration tests (debug builds only): with
/// `CCNN_GRADCHECK_CORRUPT` set, the reverse gradient is nudged so the
/// check must report failure.
#[cfg(debug_assertions)]
fn corrupt_for_tests(grad: &mut [f64]) {
    if std::env::var_os("CCNN_GRADCHECK_CORRUPT").is_some() {
        if let Some(g) = grad.first_mut() {
            *g += 1e-3;
        }
    }
}

#[cfg(not(debug_assertions))]
fn corrupt_for_tests(_: &mut [f64]) {}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn toml_small(train: bool) -> String {
        let mut s = r#"
            [scene]
            duration = 0.5
            sigma = 0.3
            seed = 40
            count = 2
            [[scene.chirps]]
            f_start = 4.0
            f_end = 12.0
            duration = 0.2
            amplitude = 1.0
            onset = 0.15

            [kernel]
            tau_nodes = 6
            t_blocks = 1
            window = 0.05
            init = "small_random"
            init_seed = 5
            init_scale = 0.05

            [solver]
            dt = 0.005
            dtau = 0.01
            stepper = "euler"
            drive = "buffer"
            nonlinearity = "tanh"
        "#
        .to_string();
        if train {
            s.push_str(
                r#"
                [train]
                epochs = 6
                learning_rate = 0.05
                snapshot_every = 3
            "#,
            );
        }
        s
    }

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ccnn-exp-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn generate_writes_scenes_and_manifest() {
        let cfg = ExperimentConfig::from_toml_str(&toml_small(false)).unwrap();
        let out = tmp_dir("gen");
        let m = cmd_generate(&cfg, &out).unwrap();
        assert_eq!(m.files, vec!["scene_0.csv", "scene_1.csv"]);
        assert_eq!(m.scene_seeds, vec![40, 41]);
        assert_eq!(m.config_hash, cfg.hash());
        let manifest_text = fs::read_to_string(out.join("manifest.json")).unwrap();
        let back: Manifest = serde_json::from_str(&manifest_text).unwrap();
        assert_eq!(back.config_hash, m.config_hash);
        // Reruns are byte-identical.
        let first = fs::read(out.join("scene_0.csv")).unwrap();
        cmd_generate(&cfg, &out).unwrap();
        assert_eq!(fs::read(out.join("scene_0.csv")).unwrap(), first);
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn simulate_writes_one_trajectory_per_scene() {
        let cfg = ExperimentConfig::from_toml_str(&toml_small(false)).unwrap();
        let out = tmp_dir("sim");
        let paths = cmd_simulate(&cfg, &out, None).unwrap();
        assert_eq!(paths.len(), 2);
        let text = fs::read_to_string(&paths[0]).unwrap();
        assert!(text.starts_with("t,y,u_T\n"));
        assert_eq!(text.lines().count(), 102);
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn train_writes_trace_snapshots_final_kernel_and_report() {
        let cfg = ExperimentConfig::from_toml_str(&toml_small(true)).unwrap();
        let out = tmp_dir("train");
        let art = cmd_train(&cfg, &out, 1).unwrap();
        assert_eq!(art.report.epochs_run, 6);
        assert_eq!(art.report.diverged_at_epoch, None);
        assert!(art.report.initial_loss.unwrap() > 0.0);
        assert!(art.report.final_loss.unwrap().is_finite());
        assert_eq!(art.report.block_similarity.len(), 1);
        for name in ["trace.csv", "kernel_final.csv", "kernel_epoch_3.csv", "kernel_epoch_6.csv", "report.json"] {
            assert!(out.join(name).exists(), "{name} missing");
        }
        assert_eq!(
            art.run.trace.records[2].snapshot.as_deref(),
            Some("kernel_epoch_3.csv")
        );
        // The trace's first entry is the loss of the untouched init kernel.
        assert_eq!(art.report.initial_loss, Some(art.run.trace.records[0].loss));
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn train_without_a_train_section_is_a_config_error() {
        let cfg = ExperimentConfig::from_toml_str(&toml_small(false)).unwrap();
        let out = tmp_dir("train-miss");
        assert!(matches!(cmd_train(&cfg, &out, 1), Err(Error::Config { .. })));
        let _ = fs::remove_dir_all(&out);
    }

    #[test]
    fn loaded_kernel_must_match_the_config_discretization() {
        let cfg = ExperimentConfig::from_toml_str(&toml_small(false)).unwrap();
        let out = tmp_dir("mismatch");
        fs::create_dir_all(&out).unwrap();
        // A kernel with the wrong node count.
        let wrong = KernelParams::zeros(5, 1, 0.05, 0.5).unwrap();
        let path = out.join("wrong.csv");
        wrong.write_csv(BufWriter::new(File::create(&path).unwrap())).unwrap();
        assert!(matches!(
            cmd_simulate(&cfg, &out, Some(path.as_path())),
            Err(Error::GridMismatch { .. })
        ));
        // The right shape loads.
        let right = KernelParams::zeros(6, 1, 0.05, 0.5).unwrap();
        right.write_csv(BufWriter::new(File::create(&path).unwrap())).unwrap();
        assert!(cmd_simulate(&cfg, &out, Some(path.as_path())).is_ok());
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn gradcheck_passes_and_reports_small_discrepancy() {
        let cfg = ExperimentConfig::from_toml_str(&toml_small(false)).unwrap();
        let out = tmp_dir("gradcheck");
        let r = cmd_gradcheck(&cfg, &out).unwrap();
        assert!(r.pass, "max_abs {} max_rel {}", r.max_abs_diff, r.max_rel_diff);
        assert_eq!(r.weights, 6);
        assert!(out.join("gradcheck_report.json").exists());
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn gradcheck_rejects_large_kernels() {
        let toml = toml_small(false).replace("tau_nodes = 6", "tau_nodes = 65");
        let cfg = ExperimentConfig::from_toml_str(&toml).unwrap();
        let out = tmp_dir("gradcheck-big");
        assert!(matches!(cmd_gradcheck(&cfg, &out), Err(Error::Config { .. })));
        let _ = fs::remove_dir_all(&out);
    }

    #[test]
    fn zero_kernel_and_empty_scene_gradcheck_is_exact() {
        // No chirps, no noise, zero kernel: the loss is identically zero
        // everywhere, so both gradient modes are exactly zero.
        let base = toml_small(false)
            .replace("init = \"small_random\"", "init = \"zeros\"")
            .replace("sigma = 0.3", "sigma = 0.0");
        let chirp_start = base.find("[[scene.chirps]]").unwrap();
        let kernel_start = base.find("[kernel]").unwrap();
        let toml = format!("{}{}", &base[..chirp_start], &base[kernel_start..]);
        let cfg = ExperimentConfig::from_toml_str(&toml).unwrap();
        let out = tmp_dir("gradcheck-zero");
        let r = cmd_gradcheck(&cfg, &out).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_abs_diff, 0.0);
        assert_eq!(r.max_rel_diff, 0.0);
        fs::remove_dir_all(&out).unwrap();
    }

    #[test]
    fn divergent_training_still_writes_artifacts_and_records_the_epoch() {
        // Closed-loop identity dynamics with an enormous learning rate: the
        // first update makes the feedback blow up during epoch 1.
        let toml = toml_small(true)
            .replace("drive = \"buffer\"", "drive = \"closed_loop\"\nhistory = \"exp\"")
            .replace("nonlinearity = \"tanh\"", "nonlinearity = \"identity\"")
            .replace("learning_rate = 0.05", "learning_rate = 1e200\noptimizer = \"sgd\"");
        let cfg = ExperimentConfig::from_toml_str(&toml).unwrap();
        let out = tmp_dir("diverge");
        let art = cmd_train(&cfg, &out, 1).unwrap();
        assert_eq!(art.report.diverged_at_epoch, Some(1));
        assert_eq!(art.report.epochs_run, 1);
        assert!(out.join("trace.csv").exists());
        assert!(out.join("report.json").exists());
        let text = fs::read_to_string(out.join("report.json")).unwrap();
        let back: TrainReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.diverged_at_epoch, Some(1));
        fs::remove_dir_all(&out).unwrap();
    }
}
