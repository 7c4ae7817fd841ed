use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rpu_core::Mode;
use rpu_cli::compare::{compare, render as render_comparison, MetricsTable};
use rpu_cli::inspect::{inspect_file, render as render_report};
use rpu_cli::run::run;
use rpu_cli::sweep::sweep;
use rpu_cli::{CliError, ExperimentConfig, Overrides, PRESETS};

/// Training simulator for neural networks on analog resistive crossbars.
#[derive(Debug, Parser)]
#[command(name = "rpusim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write metrics.csv, checkpoints and the resolved config.
    Run(ExperimentArgs),
    /// Run one experiment for several seeds.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Print the resolved configuration without running it.
    Config(ExperimentArgs),
    /// Weight histograms, saturation, state use and SNR of a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 21)]
        bins: usize,
        /// Seed of the random SNR probe inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Align two metrics files by epoch and print the differences.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write every cell as `epoch,column,a,b,delta`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Analog,
    Float,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment file (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment; see `rpusim presets`.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Base directory for relative dataset paths; defaults to $RPU_DATA_ROOT.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::from_file(path)?,
            (None, Some(name)) => ExperimentConfig::from_preset(name)?,
            (None, None) => return Err(CliError::Config("one of --config or --preset is required".into())),
        };
        cfg.resolve(&Overrides {
            out: self.out.clone(),
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                ModeArg::Analog => Mode::Analog,
                ModeArg::Float => Mode::FloatReference,
            }),
            epochs: self.epochs,
            data_root: self.data_root.clone(),
        })
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match command {
        Command::Run(args) => {
            let summary = run(&args.load()?, &mut out)?;
            println!("wrote {}", summary.out_dir.display());
        }
        Command::Sweep { exp, seeds } => {
            for r in sweep(&exp.load()?, &seeds, &mut out)? {
                println!(
                    "seed {:>6}  final test {:6.2}%  best {:6.2}%",
                    r.seed, r.final_test_err, r.best_test_err
                );
            }
        }
        Command::Config(args) => print!("{}", args.load()?.to_toml()?),
        Command::Inspect {
            checkpoint,
            bins,
            seed,
            json,
        } => {
            let report = inspect_file(&checkpoint, bins, seed)?;
            if json {
                let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
                println!("{text}");
            } else {
                print!("{}", render_report(&report));
            }
        }
        Command::Compare { a, b, csv } => {
            let c = compare(&MetricsTable::read(&a)?, &MetricsTable::read(&b)?);
            print!("{}", render_comparison(&c));
            if let Some(path) = csv {
                c.write_csv(std::fs::File::create(&path)?)?;
            }
        }
        Command::Presets => {
            for (name, text) in PRESETS {
                let title = text.lines().next().unwrap_or("").trim_start_matches('#').trim();
                println!("{name:<16} {title}");
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
            let kind = match e {
                CliError::Config(_) => "config error",
                CliError::Runtime(_) => "error",
            };
            eprintln!("rpusim: {kind}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
