use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mimalloc::MiMalloc;
use patchblender_cli::{commands, CliError, ExperimentConfig};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "patchblender", version, about = "PatchBlender experiments on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to read (overrides io.checkpoint).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory (overrides io.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; with --checkpoint, resume a saved run.
    Train,
    /// Plain, 5-crop and shuffled evaluation of a checkpoint.
    Eval,
    /// Accuracy with and without frame shuffling.
    AblateShuffle {
        /// Second checkpoint reported as the baseline row.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train no-blend and the three blend variants on identical data.
    AblateVariants,
    /// Multiply-accumulate breakdown and blend overhead.
    Flops,
    /// Finite-difference check of every parameter group.
    Gradcheck {
        /// Use a deliberately wrong blend backward (negative control).
        #[arg(long, hide = true)]
        corrupt_blend: bool,
    },
    /// Ratio CSV and graymap per blend layer of a checkpoint.
    ExportHeatmap,
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Command::ExportHeatmap = cli.command {
        let ck = cli.checkpoint.ok_or_else(|| CliError::config("export-heatmap needs --checkpoint"))?;
        let out = cli.out.ok_or_else(|| CliError::config("export-heatmap needs --out"))?;
        return commands::export_heatmap(&ck, &out);
    }
    let path = cli.config.ok_or_else(|| CliError::config("--config is required"))?;
    let loaded = ExperimentConfig::load(&path)?;
    let mut cfg = loaded.config;
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    if let Some(c) = cli.checkpoint.clone() {
        cfg.io.checkpoint = Some(c);
    }
    if let Some(o) = cli.out {
        cfg.io.out_dir = Some(o);
    }
    let seed = cli.seed.or(cfg.train.as_ref().map(|p| p.seed)).unwrap_or(0);
    match cli.command {
        Command::Train => commands::train(&cfg, &loaded.text, cli.checkpoint.is_some()),
        Command::Eval => commands::eval(&cfg, seed).map(|r| r.0),
        Command::AblateShuffle { baseline } => commands::ablate_shuffle(&cfg, baseline.as_deref(), seed),
        Command::AblateVariants => commands::ablate_variants(&cfg).map(|r| r.0),
        Command::Flops => commands::flops(&cfg.model),
        Command::Gradcheck { corrupt_blend } => commands::gradcheck(&cfg.model, corrupt_blend),
        Command::ExportHeatmap => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
