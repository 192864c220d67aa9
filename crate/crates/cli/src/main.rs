//! Command-line front end: scene generation, simulation, training, and the
//! gradient cross-check, all driven by a TOML experiment config.
//!
//! Exit codes are part of the contract: 0 success, 2 config/usage problems,
//! 3 kernel/config mismatch, 4 training divergence, 5 gradient-check
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccnn_core::config::ExperimentConfig;
use ccnn_core::experiment::{cmd_generate, cmd_gradcheck, cmd_simulate, cmd_train};
use ccnn_core::Error;

#[derive(Parser)]
#[command(name = "ccnn", version, about = "Continuous-time delay network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured scenes as CSV plus a manifest.
    Generate(CommonArgs),
    /// Simulate every scene under a kernel and write trajectory CSVs.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Kernel CSV to simulate with (default: the config's init kernel).
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
    /// Train the kernel; writes trace.csv, snapshots, and report.json.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Worker threads for scene evaluation; the results are identical
        /// for any value.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Cross-check reverse-mode gradients against finite differences.
    Gradcheck(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's output_dir, else ".").
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve_out(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    fn load(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let cfg = ExperimentConfig::load(Path::new(&self.config))?;
        let out = self.resolve_out(&cfg);
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Generate(common) => {
            let (cfg, out) = common.load()?;
            let manifest = cmd_generate(&cfg, &out)?;
            println!("wrote {} scene file(s) to {}", manifest.files.len(), out.display());
            Ok(0)
        }
        Command::Simulate { common, kernel } => {
            let (cfg, out) = common.load()?;
            let paths = cmd_simulate(&cfg, &out, kernel.as_deref())?;
            println!("wrote {} trajectory file(s) to {}", paths.len(), out.display());
            Ok(0)
        }
        Command::Train { common, threads } => {
            let (cfg, out) = common.load()?;
            let art = cmd_train(&cfg, &out, threads.max(1))?;
            if let Some(epoch) = art.report.diverged_at_epoch {
                eprintln!(
                    "error: training diverged at epoch {epoch}; partial artifacts in {}",
                    out.display()
                );
                return Ok(4);
            }
            match (art.report.initial_loss, art.report.final_loss) {
                (Some(i), Some(f)) => println!(
                    "trained {} epoch(s): loss {i:.6} -> {f:.6}; report at {}",
                    art.report.epochs_run,
                    art.report_path.display()
                ),
                _ => println!(
                    "trained {} epoch(s); report at {}",
                    art.report.epochs_run,
                    art.report_path.display()
                ),
            }
            Ok(0)
        }
        Command::Gradcheck(common) => {
            let (cfg, out) = common.load()?;
            let report = cmd_gradcheck(&cfg, &out)?;
            if report.pass {
                println!(
                    "gradcheck passed over {} weight(s): max abs diff {:.3e}, max rel diff {:.3e}",
                    report.weights, report.max_abs_diff, report.max_rel_diff
                );
                Ok(0)
            } else {
                eprintln!(
                    "error: gradient modes disagree beyond tolerance: max abs diff {:.3e}, max rel diff {:.3e}",
                    report.max_abs_diff, report.max_rel_diff
                );
                Ok(5)
            }
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::GridMismatch { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
