use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use recsep_cli::commands;
use recsep_cli::config::config_dir;
use recsep_cli::{CliError, RunConfig};

/// Continuous speech separation experiments driven by a TOML run config.
#[derive(Parser)]
#[command(name = "recsep", version)]
struct Cli {
    /// Run config file.
    #[arg(short, long, env = "RECSEP_CONFIG")]
    config: PathBuf,

    /// Override a config field, e.g. `--set window.dependency=true`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize every session into <out_dir>/sessions.
    Generate,
    /// Separate the generated sessions into <out_dir>/separated.
    Separate,
    /// Score <out_dir>/separated and write report.csv / report.json.
    Evaluate {
        /// Another run directory to diff against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Re-run separate + evaluate for each value of one parameter.
    Sweep {
        /// stop_threshold, dependency, block, lambda or channels.
        parameter: String,
        #[arg(required = true)]
        values: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Sweep { parameter, values } = &cli.command {
        let doc = RunConfig::load_table(&cli.config, &cli.overrides)?;
        let rows = commands::sweep(&doc, config_dir(&cli.config), parameter, values)?;
        commands::write_csv_rows(&rows, std::io::stdout().lock())?;
        return Ok(());
    }
    let cfg = RunConfig::load(&cli.config, &cli.overrides)?;
    match cli.command {
        Command::Generate => {
            let dirs = commands::generate(&cfg)?;
            log::info!("generated {} sessions", dirs.len());
        }
        Command::Separate => commands::separate(&cfg, &cfg.separated_dir())?,
        Command::Evaluate { compare } => {
            let report = commands::evaluate(&cfg, &cfg.separated_dir())?;
            commands::write_report(&report, &cfg.out_dir)?;
            println!(
                "{} sessions: SI-SNR {:.2} dB, SI-SNRi {:.2} dB",
                report.overall.sessions, report.overall.si_snr, report.overall.si_snri
            );
            if let Some(other) = compare {
                let base = commands::read_report(&other)?;
                let rows = commands::compare(&base, &report);
                let path = cfg.out_dir.join("delta.csv");
                commands::write_csv_rows(
                    &rows,
                    BufWriter::new(File::create(&path).with_context(|| path.display().to_string())?),
                )?;
                commands::write_csv_rows(&rows, std::io::stdout().lock())?;
            }
        }
        Command::Sweep { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
