use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedreid::{Error, Result};
use fedreid_cli::config::{load, ExperimentConfig};
use fedreid_cli::experiment::{cmd_eval, cmd_report, cmd_sweep, cmd_synth, cmd_train, SweepAxis};

#[derive(Parser)]
#[command(name = "fedreid", version, about = "Federated visible-infrared re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Base preset (full-ci, desk-ci, desk-ei, desk-es); overrides the file's `preset`.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config value, e.g. `--set federation.top_k=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        load(self.config.as_deref(), self.preset.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic entity manifests and tensors.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to `<output_dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, checkpoint and evaluate every repetition.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a saved parameter file.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test manifest; defaults to the config's test target.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Repetition whose seeds select the default test target.
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        /// Directory for metrics files; printed only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// lambda or top_k.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Tabulate the summaries of finished runs.
    Report {
        /// Run output directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "input" => 3,
        "load" => 4,
        "io" => 5,
        "state" => 6,
        "numeric" => 7,
        "sampling" => 8,
        "evaluation" => 9,
        _ => 1,
    }
}

/// Returns true when the effective config was printed instead of running.
fn print_config(args: &ConfigArgs, cfg: &ExperimentConfig) -> Result<bool> {
    if args.print_config {
        print!("{}", cfg.to_toml()?);
    }
    Ok(args.print_config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg)? {
                return Ok(());
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            for path in cmd_synth(&cfg.data.synthetic, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Train { config } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg)? {
                return Ok(());
            }
            let summary = cmd_train(&cfg, true)?;
            println!("{}", fedreid_cli::experiment::SUMMARY_CSV_HEADER);
            println!("{}", summary.csv_row());
        }
        Command::Eval {
            config,
            checkpoint,
            manifest,
            repetition,
            out,
        } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg)? {
                return Ok(());
            }
            let m = cmd_eval(&cfg, &checkpoint, manifest.as_deref(), repetition, out.as_deref())?;
            println!("{}", fedreid::evaluation::REPORT_CSV_HEADER);
            println!("{}", m.csv_row(&cfg.run_id, cfg.federation.protocol.name(), cfg.federation.seed + repetition as u64));
        }
        Command::Sweep { config, axis, values } => {
            let cfg = config.resolve()?;
            if print_config(&config, &cfg)? {
                return Ok(());
            }
            let axis: SweepAxis = axis.parse()?;
            let (_, table) = cmd_sweep(&cfg, axis, &values, true)?;
            print!("{table}");
        }
        Command::Report { runs } => print!("{}", cmd_report(&runs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "category": e.category(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
