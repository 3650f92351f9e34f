use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcore::cli::{self, FeatureChoice};

#[derive(Parser)]
#[command(name = "tcore", about = "Desk-scale temporal-correspondence video pretraining")]
struct Cli {
    /// Worker threads; 1 forces the bit-deterministic sequential path.
    /// The TCORE_THREADS env var is the fallback.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults are used for anything unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted key=value overrides, e.g. trainer.epochs=1
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        videos: usize,
        /// Frames per video (overrides scene.n_frames).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate label propagation with frozen features.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Use ground-truth one-hot features instead of a checkpoint.
        #[arg(long, conflicts_with = "static_copy")]
        oracle_features: bool,
        /// Copy the frame-0 mask everywhere (lower-bound baseline).
        #[arg(long)]
        static_copy: bool,
        #[arg(long)]
        force: bool,
    },
    /// Run the gradient-check, oracle and statistics suite.
    Verify {
        /// Monte-Carlo draws for the sampling statistics.
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Export cross-attention heatmaps for masked patches of one frame.
    Attn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        video: usize,
        #[arg(long)]
        frame: usize,
        /// Comma-separated masked patch indices.
        #[arg(long, value_delimiter = ',')]
        mask: Vec<usize>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cmd: Command) -> cli::Result<()> {
    match cmd {
        Command::GenData { cfg, out, videos, frames, seed, force } => {
            let mut cfg = cli::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            if let Some(f) = frames {
                cfg.scene.n_frames = f;
            }
            cli::cmd_gen_data(&cfg, &out, videos, seed, force)
        }
        Command::Train { cfg, data, out, resume, force } => {
            let cfg = cli::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            cli::cmd_train(&cfg, &data, &out, resume.as_deref(), force)
        }
        Command::Eval { cfg, data, out, ckpt, oracle_features, static_copy, force } => {
            let cfg = cli::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            let choice = if oracle_features {
                FeatureChoice::Oracle
            } else if static_copy {
                FeatureChoice::StaticCopy
            } else {
                FeatureChoice::Checkpoint
            };
            cli::cmd_eval(&cfg, &data, &out, ckpt.as_deref(), choice, force)
        }
        Command::Verify { draws } => {
            let report = cli::cmd_verify(draws)?;
            print!("{report}");
            Ok(())
        }
        Command::Attn { cfg, ckpt, data, out, video, frame, mask, force } => {
            let cfg = cli::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            cli::cmd_attn(&cfg, &ckpt, &data, video, frame, &mask, &out, force)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    cli::apply_thread_setting(args.threads);
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
