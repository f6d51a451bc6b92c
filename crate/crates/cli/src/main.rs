use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use impact_cli::commands::{self, CliError, LambdaSource, ReportArgs, SimulateArgs, Source, API_KEYS_ENV, API_KEY_ENV};
use impact_core::analytics::DEFAULT_HIGH_THRESHOLD_G;

/// Cargo impact tracking: simulate a tracker, run the ingest service,
/// calibrate the sensor and render reports.
#[derive(Parser)]
#[command(name = "impact", version)]
struct Cli {
    /// Seed for the ambient vibration noise.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a tracker across a journey scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Device configuration JSON; defaults to the scenario's own.
        #[arg(long)]
        config: Option<PathBuf>,
        /// POST batches to a running ingest service.
        #[arg(long, conflicts_with = "out", required_unless_present = "out")]
        ingest_url: Option<String>,
        /// Write batches, the journey log and the battery curve here instead.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = API_KEY_ENV, hide_env_values = true)]
        api_key: Option<String>,
    },
    /// Fit the counts-to-g constant from drop trials.
    Calibrate {
        /// CSV with header `known_g,x,y,z`.
        #[arg(long)]
        drops: PathBuf,
    },
    /// Run the ingest service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory holding the record log.
        #[arg(long)]
        data: PathBuf,
    },
    /// Render the impact chart and per-leg summaries for one device.
    Report(ReportCmd),
}

#[derive(Args)]
struct ReportCmd {
    /// Ingest service URL, or a directory with records.jsonl and/or batches/.
    #[arg(long)]
    source: String,
    #[arg(long)]
    device: String,
    /// RFC 3339 or epoch milliseconds.
    #[arg(long, value_parser = commands::parse_time)]
    from: Option<i64>,
    #[arg(long, value_parser = commands::parse_time)]
    to: Option<i64>,
    /// Scenario JSON or a JSON array of legs.
    #[arg(long)]
    legs: Option<PathBuf>,
    #[arg(long, required_unless_present = "drops", conflicts_with = "drops")]
    lambda: Option<f64>,
    /// Calibrate from these drop trials instead of giving --lambda.
    #[arg(long)]
    drops: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HIGH_THRESHOLD_G)]
    threshold: f64,
    #[arg(long, default_value = "report")]
    out: PathBuf,
    #[arg(long, env = API_KEY_ENV, hide_env_values = true)]
    api_key: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { scenario, config, ingest_url, out, api_key } => {
            let summary = commands::simulate(&SimulateArgs { scenario, config, ingest_url, api_key, out, seed: cli.seed })?;
            println!("{summary}");
        }
        Command::Calibrate { drops } => println!("{}", commands::calibrate(&drops)?),
        Command::Serve { port, data } => {
            let keys = commands::parse_keys(&std::env::var(API_KEYS_ENV).unwrap_or_default());
            commands::serve(port, &data, &keys)?;
        }
        Command::Report(r) => {
            let lambda = match (r.lambda, r.drops) {
                (Some(l), _) => LambdaSource::Value(l),
                (None, Some(d)) => LambdaSource::Drops(d),
                (None, None) => unreachable!("clap requires one of --lambda/--drops"),
            };
            let out = commands::report(&ReportArgs {
                source: Source::parse(&r.source),
                api_key: r.api_key,
                device: r.device,
                from: r.from,
                to: r.to,
                legs: r.legs,
                lambda,
                threshold_g: r.threshold,
                out: r.out.clone(),
            })?;
            print!("{}", out.table);
            println!("{} records; wrote impacts.svg, legs.csv, impacts.csv to {}", out.records, r.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
