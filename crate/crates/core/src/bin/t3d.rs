use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use t3d_core::cli::{
    cmd_ablate, cmd_eval, cmd_pretrain, cmd_synth, default_report_path, summarize, Axis, RunConfig, Task,
};
use t3d_core::Result;

/// Volume-report pretraining toolkit.
///
/// Exit codes: 0 success, 1 internal error, 2 config or spec error, 3 I/O
/// error, 4 diverged run, 5 checkpoint fingerprint or architecture mismatch.
#[derive(Parser)]
#[command(name = "t3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus.
    Synth {
        /// Phantom spec JSON; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Defaults to the spec's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the encoders on a corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-key override, e.g. `tma_weight=0` or `train.base_lr=5e-4`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many optimizer steps have run in total.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Report path; defaults to `<output_dir>/eval-<task>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare the variants of one ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, n, seed } => {
            let records = cmd_synth(spec.as_deref(), &out, n, seed)?;
            println!("wrote {} samples to {}", records.len(), out.display());
        }
        Command::Pretrain {
            config,
            overrides,
            resume,
            stop_after,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let out = cmd_pretrain(&cfg, resume, stop_after)?;
            println!(
                "trained {} steps; checkpoint {}; metrics {}",
                out.state.step,
                out.checkpoint.display(),
                out.metrics.display()
            );
        }
        Command::Eval {
            task,
            checkpoint,
            config,
            overrides,
            out,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let out = out.unwrap_or_else(|| default_report_path(&cfg, task));
            let report = cmd_eval(&cfg, task, &checkpoint, &out)?;
            println!("{} -> {}", summarize(&report), out.display());
        }
        Command::Ablate {
            config,
            axis,
            overrides,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            print!("{}", cmd_ablate(&cfg, axis)?.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
