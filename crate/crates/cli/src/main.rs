use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vlprobe::Error;

mod commands;
mod config;

use config::RunConfig;

/// Spatial-bias probes for a small vision-language transformer.
#[derive(Debug, Parser)]
#[command(name = "vlprobe", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the dataset (`gen`) or the model (`train`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Position scheme: `sequential` or `bapa`.
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation worker threads (1 = deterministic single-thread mode).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the pattern library and probe dataset.
    Gen,
    /// Train a model on a dataset's training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Override the number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-slot accuracy report for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Region occlusion importance over positive evaluation samples.
    Occlude {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Region grid as ROWSxCOLS.
        #[arg(long)]
        regions: Option<String>,
    },
    /// Encoder-side similarity of each evaluation key at every slot.
    Simprobe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Text→image attention flow over the evaluation split.
    Flow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Compare reports; repeat both flags to compare several seeds.
    Compare {
        #[arg(long, required = true)]
        baseline: Vec<PathBuf>,
        #[arg(long, required = true)]
        candidate: Vec<PathBuf>,
    },
    /// gen, then train/eval/flow both schemes for every seed, then compare.
    Pipeline,
}

/// Exit codes, one per error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Io { .. } => 4,
        Error::Corrupt { .. } => 5,
        Error::Version { .. } => 6,
        Error::UnknownScheme(_) => 7,
        Error::Data(_) => 8,
        Error::Shape(_) => 9,
        Error::Degenerate(_) => 10,
    }
}

fn resolve(global: &GlobalArgs) -> vlprobe::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &global.scheme {
        cfg.scheme = s.clone();
    }
    if let Some(o) = &global.out {
        cfg.out = o.clone();
    }
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
    if let Some(s) = global.seed {
        cfg.dataset.seed = s;
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> vlprobe::Result<()> {
    let mut cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Gen => commands::gen(&cfg),
        Command::Train { dataset, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            commands::train(&cfg, &dataset)
        }
        Command::Eval { checkpoint, dataset } => commands::eval(&cfg, &checkpoint, &dataset),
        Command::Occlude {
            checkpoint,
            dataset,
            regions,
        } => {
            if let Some(r) = regions {
                let (rows, cols) = r
                    .split_once('x')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| Error::Config(format!("regions must look like 3x3, got {r:?}")))?;
                cfg.analysis.region_rows = rows;
                cfg.analysis.region_cols = cols;
            }
            commands::occlude(&cfg, &checkpoint, &dataset)
        }
        Command::Simprobe { checkpoint, dataset } => commands::simprobe(&cfg, &checkpoint, &dataset),
        Command::Flow { checkpoint, dataset } => commands::flow(&cfg, &checkpoint, &dataset),
        Command::Compare { baseline, candidate } => commands::compare(&cfg, &baseline, &candidate),
        Command::Pipeline => commands::pipeline(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
