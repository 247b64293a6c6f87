//! `adaagg` command line: run experiments, collect cue statistics, summarize
//! result directories.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use adaagg_core::experiment::{cue_statistics, run_experiment, ExperimentConfig, Report};
use adaagg_core::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adaagg", version, about = "Federated poisoning arena with adaptive aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every seed (and grid cell) of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set federation.rounds=20`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Suppress per-round progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Run with passive cue logging on, writing cues.csv per run directory.
    Cues {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Summarize finished run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write accuracy.csv, timing.csv and series.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn logger(quiet: bool) -> impl FnMut(&str) {
    move |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    }
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, set, quiet } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            for cell in run_experiment(&cfg, &mut logger(quiet))? {
                let accs: Vec<String> = cell.final_accs().iter().map(|a| format!("{a:.4}")).collect();
                println!("{}: final test_acc [{}]", cell.dir.display(), accs.join(", "));
            }
        }
        Command::Cues { config, set, quiet } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            for path in cue_statistics(&cfg, &mut logger(quiet))? {
                println!("{}", path.display());
            }
        }
        Command::Report { dirs, out } => {
            let report = Report::collect(&dirs)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.render_text());
            if let Some(out) = out {
                report.write_csv(&out)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
