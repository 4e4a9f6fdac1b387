use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tripvec::pipeline::{self, PipelineConfig};
use tripvec::traveler::ModelKind;
use tripvec::{Error, Result};

#[derive(Parser)]
#[command(name = "tripvec", version, about = "Listing and traveler embeddings from clickstream sessions")]
struct Cli {
    /// JSON pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic session log with its ground truth and geography.
    Generate,
    /// Split by traveler and train listing embeddings on the train side.
    TrainEmbeddings,
    /// Extrapolate embeddings for cold listings.
    Coldstart,
    /// Train a traveler model.
    TrainTraveler {
        #[arg(long)]
        kind: String,
    },
    /// Downstream reports and a comparison table for comma-separated settings.
    Evaluate {
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<String>>,
    },
    /// Finite-difference check of every trainable model.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Run every stage in order.
    Pipeline,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.paths.out_dir = o.clone();
    }
    Ok(c)
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Generate => print_written(&pipeline::cmd_generate(&cfg)?),
        Command::TrainEmbeddings => print_written(&pipeline::cmd_train_embeddings(&cfg)?),
        Command::Coldstart => {
            let (path, n) = pipeline::cmd_coldstart(&cfg)?;
            println!("wrote {} ({n} cold rows)", path.display());
        }
        Command::TrainTraveler { kind } => {
            let kind: ModelKind = kind.parse()?;
            print_written(&pipeline::cmd_train_traveler(&cfg, kind)?);
        }
        Command::Evaluate { settings } => {
            let settings = match settings {
                Some(s) => pipeline::parse_settings(s)?,
                None => cfg.settings()?,
            };
            for r in pipeline::cmd_evaluate(&cfg, &settings)? {
                println!("{}\tauc {:.4}\tf1 {:.4}", r.feature_set, r.auc, r.f1);
            }
        }
        Command::Gradcheck { trials, corrupt_gradient } => {
            let lines = pipeline::gradient_check_suite(*trials, *corrupt_gradient, cfg.seed)?;
            for l in &lines {
                println!("{}", l.render());
            }
            return Ok(lines.iter().all(|l| l.passed()));
        }
        Command::Pipeline => {
            for r in pipeline::cmd_pipeline(&cfg)? {
                println!("{}\tauc {:.4}\tf1 {:.4}", r.feature_set, r.auc, r.f1);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if Error::is_config(&e) { 2 } else { 1 })
        }
    }
}
