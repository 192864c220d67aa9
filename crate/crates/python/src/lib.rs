//! Python bindings: a thin `Experiment` class over the core crate, driven by
//! the same TOML configs as the command-line tool.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ccnn_core::config::ExperimentConfig;
use ccnn_core::dynamics::simulate;
use ccnn_core::experiment::{block_templates, cmd_gradcheck};
use ccnn_core::kernel::kernel_similarity;
use ccnn_core::signals::TimeGrid;
use ccnn_core::training::train;
use ccnn_core::Error;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn nodes(grid: &TimeGrid) -> Vec<f64> {
    (0..grid.len()).map(|i| grid.node(i)).collect()
}

/// One experiment, parsed from the same TOML text the `ccnn` binary reads.
#[pyclass]
struct Experiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[new]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self { cfg: ExperimentConfig::from_toml_str(toml).map_err(err)? })
    }

    /// Hash of the semantic config fields; changes iff results may change.
    fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    /// Scene `i` as three lists: times, noisy input, detection target.
    fn scene(&self, i: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let scene = self.cfg.build_scene(i).map_err(err)?;
        let t = nodes(scene.input.grid());
        Ok((t, scene.input.values().to_vec(), scene.target.values().to_vec()))
    }

    /// Integrate scene `i` under the config's kernel: times, state y,
    /// full-window drive u_T.
    fn simulate(&self, i: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let scene = self.cfg.build_scene(i).map_err(err)?;
        let kernel = self.cfg.build_kernel().map_err(err)?;
        let solver = self.cfg.solver_config().map_err(err)?;
        let out = simulate(
            &scene.input,
            &kernel,
            &solver,
            self.cfg.solver.nonlinearity,
            self.cfg.solver.drive,
        )
        .map_err(err)?;
        let t = nodes(out.state.grid());
        Ok((t, out.state.values().to_vec(), out.drive.values().to_vec()))
    }

    /// Run the config's training loop in memory and summarize the run.
    /// Requires a `[train]` section.
    #[pyo3(signature = (threads = 1))]
    fn train<'py>(&self, py: Python<'py>, threads: usize) -> PyResult<Bound<'py, PyDict>> {
        let cfg = &self.cfg;
        let scenes = (0..cfg.scene.count)
            .map(|i| cfg.build_scene(i))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let init = cfg.build_kernel().map_err(err)?;
        let train_cfg = cfg.train_config().map_err(err)?;
        let ctx = cfg.train_context(threads).map_err(err)?;
        let run = train(&init, &scenes, &ctx, &train_cfg).map_err(err)?;
        let losses: Vec<f64> = run.trace.records.iter().map(|r| r.loss).collect();
        let similarity = kernel_similarity(&run.params, &block_templates(cfg).map_err(err)?)
            .map_err(err)?
            .into_iter()
            .map(|s| s.is_finite().then_some(s))
            .collect::<Vec<_>>();
        let kernel: Vec<Vec<f64>> =
            (0..run.params.t_blocks()).map(|b| run.params.block_weights(b).to_vec()).collect();
        let out = PyDict::new(py);
        out.set_item("epochs_run", run.trace.records.len())?;
        out.set_item("diverged_at", run.diverged_at)?;
        out.set_item("initial_loss", losses.first().copied())?;
        out.set_item("final_loss", losses.last().copied())?;
        out.set_item("losses", losses)?;
        out.set_item("block_similarity", similarity)?;
        out.set_item("kernel", kernel)?;
        Ok(out)
    }

    /// Compare reverse-mode against finite-difference gradients on scene 0.
    /// Writes `gradcheck_report.json` to `out` (default: the system temp
    /// directory) and returns the report as a dict.
    #[pyo3(signature = (out = None))]
    fn gradcheck<'py>(&self, py: Python<'py>, out: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let dir = match out {
            Some(p) => PathBuf::from(p),
            None => std::env::temp_dir().join(format!("ccnn-gradcheck-{}", std::process::id())),
        };
        let report = cmd_gradcheck(&self.cfg, &dir).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("pass", report.pass)?;
        d.set_item("weights", report.weights)?;
        d.set_item("max_abs_diff", report.max_abs_diff)?;
        d.set_item("max_rel_diff", report.max_rel_diff)?;
        d.set_item("abs_tol", report.abs_tol)?;
        d.set_item("rel_tol", report.rel_tol)?;
        d.set_item("report_dir", dir.to_string_lossy().into_owned())?;
        Ok(d)
    }
}

#[pymodule]
fn ccnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    Ok(())
}
