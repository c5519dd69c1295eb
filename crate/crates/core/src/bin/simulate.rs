use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pfl::cli::{parse_config, run, RunError, SolverKind};

/// Multiphase porous-media flow with the ALG2-JKO and finite-volume solvers.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Configuration file, or the name of a built-in preset.
    config: PathBuf,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    solver: Option<SolverKind>,
    /// Comma-separated snapshot times.
    #[arg(long, value_delimiter = ',')]
    snapshots: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = parse_config(&args.config).map_err(RunError::from).and_then(|mut cfg| {
        if let Some(out) = args.out {
            cfg.output.dir = out;
        }
        if let Some(s) = args.solver {
            cfg.solver = s;
        }
        if let Some(times) = args.snapshots {
            cfg.output.snapshots = times;
        }
        let report = run(&cfg)?;
        for c in &report.checks {
            println!("{c}");
        }
        println!("outputs written to {}", cfg.output.dir.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
