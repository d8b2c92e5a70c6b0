//! The `ofdiff` command line: dataset generation, training, optional
//! policy-gradient fine-tuning, sampling and evaluation.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod logging;
pub mod manifest;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ofdiff", version, about = "Shape-conditioned diffusion toy pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and val splits and the training mask pool.
    GenData,
    /// Train (or resume training) on DATA/train.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Fine-tune a checkpoint with policy-gradient updates.
    Ddpo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use the brightness reward instead of the KNN/KL reward.
        #[arg(long)]
        toy_reward: bool,
    },
    /// Render images for a layouts file or for random layouts.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask pool directory written by gen-data.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, conflicts_with = "random_layouts", required_unless_present = "random_layouts")]
        layouts: Option<PathBuf>,
        #[arg(long)]
        random_layouts: Option<usize>,
    },
    /// Compare generated images with references over a layouts file.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        layouts: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        ofdiff_core::parallel::set_sequential(true);
    }
    let cfg = commands::load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.clone().context("--out DIR is required")?;
    match cli.command {
        Command::GenData => {
            commands::gen_data(&cfg, &out, cli.force)?;
        }
        Command::Train { data, max_steps } => {
            commands::train(&cfg, &data, &out, commands::TrainOptions { max_steps })?;
        }
        Command::Ddpo {
            checkpoint,
            data,
            toy_reward,
        } => {
            commands::ddpo(&cfg, &checkpoint, &data, &out, commands::DdpoOptions { toy_reward })?;
        }
        Command::Sample {
            checkpoint,
            pool,
            layouts,
            random_layouts,
        } => {
            let source = match (layouts, random_layouts) {
                (Some(p), _) => commands::LayoutSource::File(p),
                (None, Some(n)) => commands::LayoutSource::Random(n),
                (None, None) => unreachable!("clap requires one layout source"),
            };
            commands::sample_images(&cfg, &checkpoint, &pool, &source, &out, cli.force)?;
        }
        Command::Eval {
            generated,
            reference,
            layouts,
        } => {
            let report = commands::eval(&cfg, &generated, &reference, &layouts, &out)?;
            print!("{}", report.shape.to_table());
        }
    }
    Ok(())
}
