//! Command-line front end for `smc-search`: configuration loading, run
//! directories (JSONL event log, transcripts, summary, diagnostics), resume
//! after interruption, CSV export of plot data, and the oracle checks.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod export;
pub mod oracle_check;
pub mod run;
pub mod rundir;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::CliError;
use export::ExportKind;
use run::{RunOptions, RunOutcome};

#[derive(Debug, Parser)]
#[command(name = "smc-search", version, about = "Sequential Monte Carlo search over programs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start a new run from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `sampler.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and build the backends, then stop.
        #[arg(long)]
        dry_run: bool,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        stop_after_epochs: Option<usize>,
    },
    /// Run exact checks on enumerable spaces.
    OracleCheck {
        /// invariance, ergodicity, bridge, path, theorem1 or all
        suite: String,
    },
    /// Write CSV plot data under `<run-dir>/export/`.
    Export {
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
    },
    /// Continue an interrupted run from its last checkpoint.
    Resume {
        run_dir: PathBuf,
        #[arg(long, hide = true)]
        stop_after_epochs: Option<usize>,
    },
}

/// Runs a parsed command, writing human output to `out`.
pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            config,
            seed,
            dry_run,
            out: out_dir,
            stop_after_epochs,
        } => {
            let opts = RunOptions {
                seed,
                out: out_dir,
                dry_run,
                stop_after_epochs,
            };
            report(run::cmd_run(&config, &opts)?, out)
        }
        Command::Resume {
            run_dir,
            stop_after_epochs,
        } => report(run::cmd_resume(&run_dir, stop_after_epochs)?, out),
        Command::Export { run_dir, what } => {
            for p in export::cmd_export(&run_dir, what)? {
                writeln!(out, "{}", p.display())?;
            }
            Ok(())
        }
        Command::OracleCheck { suite } => {
            let suite: oracle_check::Suite = suite.parse()?;
            let results = oracle_check::run_suite(suite);
            for r in &results {
                writeln!(out, "{r}")?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::ChecksFailed {
                    failed,
                    total: results.len(),
                });
            }
            Ok(())
        }
    }
}

fn report(outcome: RunOutcome, out: &mut dyn Write) -> Result<(), CliError> {
    match outcome {
        RunOutcome::DryRun(cfg) => {
            writeln!(out, "config ok")?;
            serde_json::to_writer_pretty(&mut *out, &cfg).map_err(std::io::Error::other)?;
            writeln!(out)?;
        }
        RunOutcome::Finished { dir, summary } => {
            match &summary.best {
                Some(b) => writeln!(
                    out,
                    "best reward {} (island {}, iteration {})",
                    b.reward, b.island, b.iteration
                )?,
                None => writeln!(out, "no valid program found")?,
            }
            writeln!(
                out,
                "llm calls {}, proposals {}",
                summary.total_llm_calls, summary.total_proposals
            )?;
            writeln!(out, "run directory {}", dir.display())?;
        }
        RunOutcome::Stopped { dir, epochs } => {
            writeln!(
                out,
                "stopped after epoch {epochs}; resume with `smc-search resume {}`",
                dir.display()
            )?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors go to stderr as one JSON object; failures inside a run directory
/// are also written to its `error.json`.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            let rec = e.record();
            let json = serde_json::to_string(&rec).unwrap_or_else(|_| e.to_string());
            eprintln!("{json}");
            e.exit_code()
        }
    }
}
