//! Command-line front end for the labelnoise experiment harness.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when
//! training diverged.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use labelnoise::config::ExperimentConfig;
use labelnoise::metrics::{entropy_score, inlier_pr_curve, q_recovery_error, test_error};
use labelnoise::model::Mlp;
use labelnoise::noise::read_q_csv;
use labelnoise::runner::{
    run_single, run_sweep, write_run_artifacts, write_sweep_artifacts, RunStatus,
};
use labelnoise::synth::Dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Parser)]
#[command(
    name = "labelnoise",
    version,
    about = "Train softmax classifiers on noisy labels with a noise-adaptation layer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the datasets a config describes and write them as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's out_dir, then `runs`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment and write report.json, model.json and Q matrices.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the config's noise-level x training-size sweep grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-score a trained model checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Path to a model.json checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Score this dataset CSV instead of regenerating the test set.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write eval.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a Q checkpoint and, given a reference, its recovery error.
    InspectQ {
        #[arg(long)]
        q: PathBuf,
        /// Reference matrix to compare against.
        #[arg(long = "q-star")]
        q_star: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::from_path(path).map_err(|e| format!("{path:?}: {e}"))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Run the CLI against an explicit argv; returns the process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/version through the error path too.
            let _ = err.print();
            return if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, String> {
    match cli.cmd {
        Cmd::Generate { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(out, &cfg);
            labelnoise::runner::generate_datasets(&cfg, &dir).map_err(|e| e.to_string())?;
            println!("wrote datasets to {}", dir.display());
            Ok(EXIT_OK)
        }
        Cmd::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(out, &cfg);
            let outcome = run_single(&cfg).map_err(|e| e.to_string())?;
            write_run_artifacts(&outcome, &dir).map_err(|e| e.to_string())?;
            println!(
                "variant={} status={:?} test_error={} wall_clock={:.2}s -> {}",
                outcome.report.variant.as_str(),
                outcome.report.status,
                outcome
                    .report
                    .test_error
                    .map(|e| format!("{e:.4}"))
                    .unwrap_or_else(|| "n/a".into()),
                outcome.report.wall_clock_secs,
                dir.display()
            );
            if outcome.report.status == RunStatus::Diverged {
                return Ok(EXIT_DIVERGED);
            }
            Ok(EXIT_OK)
        }
        Cmd::Sweep { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(out, &cfg);
            let outcome = run_sweep(&cfg).map_err(|e| e.to_string())?;
            write_sweep_artifacts(&outcome, &dir).map_err(|e| e.to_string())?;
            let diverged = outcome
                .cells
                .iter()
                .flat_map(|c| &c.reports)
                .filter(|r| r.status == RunStatus::Diverged)
                .count();
            println!(
                "{} cells, {} runs ({} diverged) -> {}",
                outcome.cells.len(),
                outcome.summary.len(),
                diverged,
                dir.display()
            );
            if diverged > 0 {
                return Ok(EXIT_DIVERGED);
            }
            Ok(EXIT_OK)
        }
        Cmd::Eval {
            config,
            seed,
            model,
            data,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let model = Mlp::load_json(&model).map_err(|e| e.to_string())?;
            let dataset = match data {
                Some(path) => Dataset::read_csv(&path).map_err(|e| e.to_string())?,
                None => labelnoise::runner::regenerate_test_set(&cfg).map_err(|e| e.to_string())?,
            };
            let err = test_error(&model, &dataset).map_err(|e| e.to_string())?;
            let mut eval = serde_json::json!({
                "test_error": err,
                "samples": dataset.len(),
                "seed": cfg.seed,
            });
            // When the set contains outliers, score inlier detection too.
            if dataset.inlier.iter().any(|&b| !b) && dataset.inlier.iter().any(|&b| b) {
                let probs = model.forward(&dataset.features).map_err(|e| e.to_string())?;
                let k = cfg.dataset.classes;
                let scores: Vec<f64> = if model.output_dim() == k + 1 {
                    probs.rows().into_iter().map(|r| 1.0 - r[k]).collect()
                } else {
                    probs.rows().into_iter().map(|r| -entropy_score(&r)).collect()
                };
                let pr = inlier_pr_curve(&scores, &dataset.inlier).map_err(|e| e.to_string())?;
                eval["average_precision"] = serde_json::json!(pr.average_precision);
            }
            let text = serde_json::to_string_pretty(&eval).map_err(|e| e.to_string())?;
            println!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
                std::fs::write(dir.join("eval.json"), text + "\n").map_err(|e| e.to_string())?;
            }
            Ok(EXIT_OK)
        }
        Cmd::InspectQ { q, q_star } => {
            let q = read_q_csv(&q).map_err(|e| e.to_string())?;
            println!("K={} mode={:?}", q.dim(), q.mode());
            for row in q.matrix().rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                println!("{}", cells.join(" "));
            }
            if let Some(path) = q_star {
                let reference = read_q_csv(&path).map_err(|e| e.to_string())?;
                let err = q_recovery_error(q.matrix(), reference.matrix())
                    .map_err(|e| e.to_string())?;
                println!("q_recovery_error={err}");
            }
            Ok(EXIT_OK)
        }
    }
}
