use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod manifest;
mod plot;

use commands::RunDir;
use error::CliResult;

#[derive(Parser)]
#[command(name = "modaltune", version, about = "Modal Adapter tuning and evaluation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run directory holding every output.
    #[arg(long)]
    out: PathBuf,
    /// JSON config; defaults to `<out>/config.json`, then the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohorts listed in the config.
    GenData(Common),
    /// Tune the adapter on the generated training splits.
    Train(Common),
    /// Write general-prompt features plus label and survival tables.
    Extract(Common),
    /// Fit the subtype probe on train rows and score test rows.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Fit CPH on train rows; C-index, Kaplan-Meier and log-rank on test rows.
    EvalSurv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        survival: PathBuf,
    },
    /// Integrated gradients and attention maps for one patient.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        site: String,
        #[arg(long)]
        patient: String,
    },
    /// Summarize every metrics file of the run.
    Report(Common),
}

fn load(common: &Common) -> CliResult<(RunDir, modaltune_core::pipeline::RunConfig)> {
    let run = RunDir::new(&common.out)?;
    let stored = run.config();
    let path = common.config.clone().or_else(|| stored.exists().then_some(stored));
    let cfg = config::resolve(path.as_deref(), &common.sets, std::env::var(config::SEED_ENV).ok())?;
    cfg.train.validate()?;
    Ok((run, cfg))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(c) => {
            let (run, cfg) = load(&c)?;
            let out = commands::gen_data(&run, &cfg)?;
            println!("gen-data: {} files", out.len());
        }
        Command::Train(c) => {
            let (run, cfg) = load(&c)?;
            let out = commands::train(&run, &cfg)?;
            println!("train: {} files", out.len());
        }
        Command::Extract(c) => {
            let (run, cfg) = load(&c)?;
            let out = commands::extract(&run, &cfg)?;
            println!("extract: {} files", out.len());
        }
        Command::Probe { common, features, labels } => {
            let (run, cfg) = load(&common)?;
            let (ba, out) = commands::probe(&run, &cfg, &features, &labels)?;
            println!("balanced_accuracy={ba:.6} file={}", out.display());
        }
        Command::EvalSurv { common, features, survival } => {
            let (run, cfg) = load(&common)?;
            let (c, out) = commands::eval_surv(&run, &cfg, &features, &survival)?;
            println!("c_index={c:.6} file={}", out[0].display());
        }
        Command::Attribute { common, site, patient } => {
            let (run, cfg) = load(&common)?;
            let out = commands::attribute(&run, &cfg, &site, &patient)?;
            println!("attribute: {} files", out.len());
        }
        Command::Report(c) => {
            let (run, cfg) = load(&c)?;
            let out = commands::report(&run, &cfg)?;
            println!("report: {}", out[0].display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code().0 as u8)
        }
    }
}
