//! `venomguard` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 training
//! abort, 4 contract violation.

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use venomguard::models::ArchName;
use venomguard::{Error, Result, Task};

use crate::commands::ForgeArgs;
use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "venomguard", version, about = "Poison face data against manipulation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Perturbation budget
    #[arg(long, global = true)]
    epsilon: Option<f64>,

    /// attribute_editing or reenactment
    #[arg(long, global = true)]
    task: Option<String>,

    /// Surrogate architecture (defend) or target architecture (forge)
    #[arg(long, global = true)]
    arch: Option<String>,

    /// Attribute list for defend/eval, target domain for forge
    /// (`own`, `inverse` or a bit string)
    #[arg(long, global = true)]
    domains: Option<String>,

    /// Continue from the latest checkpoint in --out
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest
    Generate {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the perturbation generator
    Defend {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
    },
    /// Apply a trained generator to a folder or dataset
    Poison {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run a manipulation model, training it first when no checkpoint is given
    Forge {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset to train on and, without --input, to forge from
        #[arg(long)]
        data: Option<PathBuf>,
        /// Folder of images (editing) or landmark maps (reenactment)
        #[arg(long)]
        input: Option<PathBuf>,
        /// Label the trained model as the infected one
        #[arg(long)]
        infected: bool,
    },
    /// Score forgeries: pairwise from two folders, or a full epsilon sweep
    Eval {
        #[arg(long, requires = "infected", conflicts_with_all = ["data", "generator"])]
        clean: Option<PathBuf>,
        #[arg(long, requires = "clean")]
        infected: Option<PathBuf>,
        #[arg(long, requires = "generator")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        generator: Option<PathBuf>,
    },
    /// Stack the editing and reenactment perturbations
    Stack {
        #[arg(long)]
        editing_generator: PathBuf,
        #[arg(long)]
        reenactment_generator: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eps1: f64,
        #[arg(long, default_value_t = 0.02)]
        eps2: f64,
    },
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("VENOMGUARD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("VENOMGUARD_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        epsilon: cli.epsilon,
        task: cli.task.as_deref().map(str::parse::<Task>).transpose()?,
        arch: cli.arch.as_deref().map(str::parse::<ArchName>).transpose()?,
    };
    let cfg = RunConfig::load(cli.config.as_deref())?.resolve(&overrides)?;
    let domains = cli.domains.as_deref();
    match &cli.command {
        Command::Generate { count } => commands::generate(&cfg, *count),
        Command::Defend { data } => commands::defend(&cfg, data, domains, cli.resume),
        Command::Poison { generator, input } => commands::poison(&cfg, generator, input),
        Command::Forge {
            model,
            data,
            input,
            infected,
        } => commands::forge(
            &cfg,
            &ForgeArgs {
                model: model.as_deref(),
                data: data.as_deref(),
                input: input.as_deref(),
                domains,
                infected: *infected,
            },
        ),
        Command::Eval {
            clean,
            infected,
            data,
            generator,
        } => match (clean, infected, data, generator) {
            (Some(c), Some(i), _, _) => commands::eval_pairs(&cfg, c, i),
            (_, _, Some(d), Some(g)) => commands::eval_sweep(&cfg, d, g, domains),
            _ => Err(Error::Config("eval needs --clean/--infected or --data/--generator".into())),
        },
        Command::Stack {
            editing_generator,
            reenactment_generator,
            input,
            eps1,
            eps2,
        } => commands::stack(&cfg, editing_generator, reenactment_generator, input, *eps1, *eps2),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Format { .. } | Error::Shape(_) => 2,
        Error::Diverged(_) => 3,
        Error::Contract(_) => 4,
        Error::Io(_) | Error::Image(_) | Error::Csv(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("venomguard: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
