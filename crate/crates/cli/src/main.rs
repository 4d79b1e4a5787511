//! `vicl` — train and evaluate a desk-scale multimodal in-context learner.
//!
//! Subcommands run the pipeline stage by stage (`prepare`, `train`,
//! `eval`, `report`) or gate the environment (`selftest`). Configuration
//! comes from a profile, an optional config file, then flag and
//! environment overrides; exit codes are 0 (success), 2 (config error),
//! 3 (missing dependency), 4 (failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vicl_core::config::{self, RunConfig};
use vicl_core::pipeline::{self, PipelineError};
use vicl_core::selftest;
use vicl_core::tensor::{Dtype, Scalar};

#[derive(Parser)]
#[command(
    name = "vicl",
    version,
    about = "Meta-trained LM with a trainable visual prefix, on synthetic scenes"
)]
struct Cli {
    /// Config file (`key = value` lines, `#` comments, `include <path>`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Starting profile: `toy` (runnable) or `paper-scale-reference`.
    #[arg(long, global = true)]
    profile: Option<String>,

    /// Master seed of the seed matrix.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Where artifacts land (also: VICL_OUT_DIR).
    #[arg(long = "out-dir", global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads for evaluation; 0 = one per core (also: VICL_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate the config and write the run manifest.
    Prepare,
    /// Train all stages for every seed (resumes from checkpoints).
    Train,
    /// Evaluate every trained variant over all datasets and shot counts.
    Eval,
    /// Aggregate evaluation cells into metrics.json / metrics.csv.
    Report,
    /// Run the fast oracle battery and exit non-zero on any failure.
    Selftest,
}

/// Precedence, least to most specific: profile defaults, config file,
/// environment (out dir and threads only), explicit flags.
fn resolve_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::for_profile(cli.profile.as_deref().unwrap_or("toy"))
        .map_err(PipelineError::Config)?;
    if let Some(path) = &cli.config {
        let pairs = config::parse_file(path).map_err(PipelineError::Config)?;
        cfg.apply(&pairs).map_err(PipelineError::Config)?;
    }
    cfg.apply_env().map_err(PipelineError::Config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out_dir) = &cli.out_dir {
        cfg.out_dir = out_dir.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn run_selftest<S: Scalar>() -> Result<(), PipelineError> {
    let mut failed = 0usize;
    for check in selftest::run_checks::<S>() {
        let status = if check.passed { "pass" } else { "FAIL" };
        println!("{status}  {:<32} {}", check.name, check.detail);
        if !check.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        // Exit code 4 without a config error or missing artifact.
        return Err(PipelineError::Malformed {
            path: PathBuf::from("<selftest>"),
            detail: format!("{failed} check(s) failed"),
        });
    }
    println!("selftest: all checks passed");
    Ok(())
}

fn run<S: Scalar>(cmd: &Cmd, cfg: &RunConfig) -> Result<(), PipelineError> {
    let seeds = pipeline::seed_list(cfg, None);
    match cmd {
        Cmd::Prepare => {
            pipeline::prepare(cfg)?;
            println!(
                "prepare: ok (fingerprint {}, out dir {})",
                cfg.fingerprint(),
                cfg.out_dir.display()
            );
        }
        Cmd::Train => {
            pipeline::train::<S>(cfg, &seeds)?;
            println!("train: ok (seeds {seeds:?})");
        }
        Cmd::Eval => {
            pipeline::eval::<S>(cfg, &seeds)?;
            println!("eval: ok (seeds {seeds:?})");
        }
        Cmd::Report => {
            let report = pipeline::report(cfg, &seeds)?;
            let paths = pipeline::Paths::new(&cfg.out_dir);
            println!("report: wrote {}", paths.metrics_json().display());
            let st = &report.shot_trend;
            println!(
                "shot trend ({}, k={} vs k={}): improved {}/{} datasets, min p = {:.4}, pass = {}",
                st.variant, st.k_hi, st.k_lo, st.datasets_improved, st.n_datasets, st.min_p, st.pass
            );
            let vt = &report.variant_trend;
            println!(
                "variant trend ({} vs {} at k={}): improved {}/{} datasets, pass = {}",
                vt.meta_variant, vt.plain_variant, vt.k, vt.datasets_improved, vt.n_datasets, vt.pass
            );
        }
        Cmd::Selftest => run_selftest::<S>()?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cfg.dtype {
        Dtype::F32 => run::<f32>(&cli.cmd, &cfg),
        Dtype::F64 => run::<f64>(&cli.cmd, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
