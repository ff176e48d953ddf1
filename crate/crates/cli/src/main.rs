use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sepdiff::harness::{cmd_benchmark, cmd_selfcheck, cmd_separate, WORKERS_ENV};
use sepdiff::Error;

/// Exit code for invalid configuration or parameters.
const EXIT_CONFIG: u8 = 78;
/// Exit code for unreadable or unwritable files.
const EXIT_IO: u8 = 74;
/// Exit code when a sampler produced non-finite values.
const EXIT_DIVERGENCE: u8 = 70;
/// Exit code when any self-check suite fails.
const EXIT_SELFCHECK: u8 = 1;

#[derive(Parser)]
#[command(name = "sepdiff", version, about = "Diffusion posterior sampling for source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Separate one mixture into K source WAVs plus a run.json record.
    Separate {
        #[arg(long)]
        config: PathBuf,
        /// Mono WAV to separate; a mixture is synthesized from the config when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured variant over N synthesized mixtures.
    #[command(after_help = format!("Set {WORKERS_ENV} to cap the number of worker threads."))]
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle suites.
    Selfcheck,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Wav { .. } => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Config(_) | Error::Parameter(_) | Error::Shape { .. } | Error::Index { .. } => {
            EXIT_CONFIG
        }
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Separate { config, input, out } => {
            let outcome = cmd_separate(&config, input.as_deref(), out.as_deref())?;
            let r = &outcome.record;
            println!(
                "separated {} samples into {} sources, residual {:.3e}",
                r.samples,
                r.sources,
                r.residual_l2.unwrap_or(f64::NAN)
            );
            if let Some(si) = &r.si_sdr_db {
                let parts: Vec<String> = si.iter().map(|v| format!("{v:.2}")).collect();
                println!("SI-SDR (dB): {}", parts.join(", "));
            }
            println!("record: {}", outcome.record_path.display());
            Ok(0)
        }
        Command::Benchmark { config, out } => {
            let outcome = cmd_benchmark(&config, out.as_deref())?;
            print!("{}", outcome.report.to_table());
            println!("rows: {}", outcome.csv_path.display());
            println!("summary: {}", outcome.summary_path.display());
            Ok(0)
        }
        Command::Selfcheck => {
            let results = cmd_selfcheck();
            let mut failed = 0;
            for r in &results {
                let mark = if r.passed { "PASS" } else { "FAIL" };
                println!("{mark}  {:<20} {:>7.2}s  {}", r.name, r.seconds, r.detail);
                failed += usize::from(!r.passed);
            }
            println!("{} of {} suites passed", results.len() - failed, results.len());
            Ok(if failed == 0 { 0 } else { EXIT_SELFCHECK })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
