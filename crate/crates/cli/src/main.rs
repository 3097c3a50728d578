//! `advcap`: build toy datasets, pretrain and adversarially train caption
//! models, decode captions and report their diversity.

mod commands;
mod settings;
mod stats;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "advcap", version, about = "Adversarial caption-set generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML file with [data], [model], [train] and [eval] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides one configuration field, e.g. `--set train.n_d=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Sample,
    Greedy,
    Beam,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sample => "sample",
            Mode::Greedy => "greedy",
            Mode::Beam => "beam",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a toy-world dataset into a directory.
    MakeData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Maximum-likelihood generator pretraining and discriminator pretraining.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory written by `make-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adversarial training from pretrained checkpoints.
    TrainGan {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `generator.ckpt` and `discriminator.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode captions for one split.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// A generator checkpoint, or a directory containing `generator.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diversity reports, n-gram count ratios and plot data for caption files.
    Stats {
        #[command(flatten)]
        config: ConfigArgs,
        /// Line-delimited JSON caption files written by `generate`.
        #[arg(long = "generated", required = true, num_args = 1..)]
        generated: Vec<PathBuf>,
        /// Dataset whose training references form the comparison corpus.
        #[arg(long, required_unless_present = "coco")]
        data: Option<PathBuf>,
        /// A COCO caption annotation file to use as the training corpus instead.
        #[arg(long, conflicts_with = "data")]
        coco: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData { config, out } => commands::make_data(&config, &out),
        Command::Pretrain { config, data, out } => commands::pretrain(&config, &data, &out),
        Command::TrainGan {
            config,
            data,
            checkpoint,
            out,
        } => commands::train_gan(&config, &data, &checkpoint, &out),
        Command::Generate {
            config,
            data,
            checkpoint,
            mode,
            beam_width,
            p,
            split,
            out,
        } => commands::generate(
            &config,
            &data,
            &checkpoint,
            commands::DecodeFlags {
                mode,
                beam_width,
                p,
                split,
            },
            &out,
        ),
        Command::Stats {
            config,
            generated,
            data,
            coco,
            out,
        } => stats::run(&config, &generated, data.as_deref(), coco.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
