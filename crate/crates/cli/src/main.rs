use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedpet_cli::config::ExperimentConfig;
use fedpet_cli::error::{CliError, Result};
use fedpet_cli::{experiment, presets, report};
use fedpet_core::delta::DeltaSpec;

const USAGE_EXIT: u8 = 64;

#[derive(Parser)]
#[command(name = "fedpet", version, about = "Federated parameter-efficient tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Config file (JSON)
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a config file
    #[arg(long)]
    preset: Option<String>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the global seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the repeat count
    #[arg(long)]
    repeat: Option<usize>,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => presets::preset(name)?,
            (None, None) => return Err(CliError::Config("either --config or --preset is required".into())),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(r) = self.repeat {
            cfg.repeat = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build and pretrain the backbone, one checkpoint per seed
    Pretrain(Source),
    /// Write partition plans and JS distance matrices
    Partition(Source),
    /// Federated and centralized runs: metrics.jsonl and summary.csv
    Run(Source),
    /// Capture uploads and reconstruct inputs: attack.json
    Attack(Source),
    /// Communication cost table for a model shape
    Account {
        /// Shape file; defaults to the bundled roberta-base shape
        #[arg(long)]
        shape: Option<PathBuf>,
        /// JSON array of delta specs; defaults to FT, BitFit, LoRA and Adapter
        #[arg(long)]
        methods: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        clients: usize,
        #[arg(long, default_value_t = 100)]
        rounds: usize,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison table and plot data from a run directory
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Defaults to `<dir>/report`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a preset as a config file
    Preset { name: String },
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(src) => print_paths(&experiment::pretrain(&src.load()?)?),
        Command::Partition(src) => print_paths(&experiment::partition(&src.load()?)?),
        Command::Run(src) => print_paths(&experiment::run(&src.load()?)?),
        Command::Attack(src) => {
            let (path, report) = experiment::attack(&src.load()?)?;
            for c in &report.cells {
                let leak = c.mean_leak_f1.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                println!("{:<20} bs={:<3} dlg_f1={:.3} leak_f1={leak}", c.method, c.batch_size, c.mean_f1);
            }
            println!("{}", path.display());
        }
        Command::Account {
            shape,
            methods,
            clients,
            rounds,
            out,
        } => {
            let shape = report::load_shape(shape.as_deref())?;
            let methods: Vec<DeltaSpec> = match methods {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("methods file: {e}")))?
                }
                None => report::account_methods(),
            };
            let csv = report::account(&shape, &methods, clients, rounds)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;
                    println!("{}", p.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Report { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("report"));
            print_paths(&report::report(&dir, &out)?);
        }
        Command::Preset { name } => println!("{}", presets::preset(&name)?.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE_EXIT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
