use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coseg_core::pipeline::{Pipeline, PipelineConfig, StageOutcome, Status};
use coseg_core::Error;

#[derive(Parser)]
#[command(name = "coseg", version, about = "Weakly-supervised lesion co-segmentation from RECIST diameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute even when up to date and proceed past stale upstream stages.
    #[arg(long, global = true)]
    force: bool,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration.
    DefaultConfig,
    /// Synthesize phantom images, ground truth and RECIST annotations.
    GenPhantoms,
    /// GrabCut initial masks from the RECIST annotations.
    GenMasks,
    /// Appearance features and k-means clusters.
    Cluster,
    /// Cluster-stratified train/val/test split.
    Split,
    /// Training, validation and test pairs.
    Pair,
    /// Train the co-segmentation network.
    Train,
    /// Predict masks for the test lesions.
    Infer,
    /// Dense-CRF refinement of the predictions.
    Refine,
    /// Score masks against ground truth.
    Evaluate {
        /// Print a mean ± std table.
        #[arg(long)]
        table: bool,
    },
    /// Ground truth and prediction contours side by side.
    Overlay,
    /// All stages in order.
    Run {
        /// Generate phantom data first.
        #[arg(long)]
        phantoms: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Stale(_) => 4,
        Error::IdMismatch(_) => 5,
        _ => 1,
    }
}

fn report(o: &StageOutcome) {
    let status = match o.status {
        Status::Ran => "done",
        Status::UpToDate => "up-to-date",
    };
    println!("{}: {status} ({} outputs)", o.stage, o.outputs);
}

fn execute(cli: Cli) -> coseg_core::Result<()> {
    if let Command::DefaultConfig = cli.command {
        print!("{}", PipelineConfig::default().to_toml());
        return Ok(());
    }
    let path = cli.config.ok_or_else(|| Error::Config("--config <file> is required".into()))?;
    let mut cfg = PipelineConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.output = out;
    }
    let p = Pipeline::new(cfg, cli.force)?;
    match cli.command {
        Command::DefaultConfig => unreachable!(),
        Command::GenPhantoms => report(&p.gen_phantoms()?),
        Command::GenMasks => report(&p.gen_masks()?),
        Command::Cluster => report(&p.cluster()?),
        Command::Split => report(&p.split()?),
        Command::Pair => report(&p.pair()?),
        Command::Train => report(&p.train()?),
        Command::Infer => report(&p.infer()?),
        Command::Refine => report(&p.refine()?),
        Command::Evaluate { table } => {
            let (o, eval) = p.evaluate()?;
            report(&o);
            if table {
                print!("{}", eval.table());
            }
        }
        Command::Overlay => report(&p.overlay()?),
        Command::Run { phantoms } => {
            let (done, eval) = p.run(phantoms)?;
            done.iter().for_each(report);
            print!("{}", eval.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(exit_code(&e))
        }
    }
}
