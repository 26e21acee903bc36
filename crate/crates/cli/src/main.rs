mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, InferArgs, Outcome, TrainArgs, UsageError};
use config::{ConfigErrors, EmbedderKind, ParserKind, RemoverKind, RunConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

/// Mask-guided makeup inpainting.
///
/// Configuration keys can be overridden with environment variables named
/// MAKEUP__<SECTION>__<KEY>, e.g. MAKEUP__TRAIN__BATCH_SIZE=4.
#[derive(Parser)]
#[command(name = "makeup", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive and cache masks and bare faces, then summarize the dataset.
    Prepare {
        /// Dataset root; overrides data.root.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Train the generator and discriminator.
    Train {
        #[arg(long)]
        root: Option<PathBuf>,
        /// Run directory for the log and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the configuration differs from the checkpoint's.
        #[arg(long)]
        force: bool,
    },
    /// Apply makeup to one image or a directory of PNGs.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        num_styles: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        parser: Option<ParserKind>,
        #[arg(long, value_enum)]
        remover: Option<RemoverKind>,
    },
    /// Score generated images for style distance and identity preservation.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        /// Reference makeup images (a dataset root resolves to its images/).
        #[arg(long)]
        reference: PathBuf,
        /// Bare faces named <id>.png.
        #[arg(long)]
        bare: PathBuf,
        /// Extra output directory to score alongside, as name=dir.
        #[arg(long = "baseline", value_parser = commands::parse_baseline)]
        baselines: Vec<(String, PathBuf)>,
        /// Embedder for both metrics; overrides the eval section.
        #[arg(long, value_enum)]
        embedder: Option<EmbedderKind>,
        /// Row label for --generated.
        #[arg(long, default_value = "generated")]
        label: String,
        /// Directory for eval_report.json and eval_report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    log::info!("resolved configuration:\n{}", cfg.to_toml());
    match cli.command {
        Command::Prepare { root } => commands::prepare(&cfg, root),
        Command::Train { root, out, resume, force } => commands::train_cmd(&cfg, TrainArgs { root, out, resume, force }),
        Command::Infer { input, checkpoint, seed, num_styles, out, parser, remover } => {
            commands::infer(&cfg, InferArgs { input, checkpoint, seed, num_styles, out, parser, remover })
        }
        Command::Evaluate { generated, reference, bare, baselines, embedder, label, out } => commands::evaluate(
            &cfg,
            EvaluateArgs { generated, reference, bare, baselines, embedder, label, out },
        ),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigErrors>()
            || c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<makeup_core::Error>(),
                Some(makeup_core::Error::Config(_) | makeup_core::Error::ConfigMismatch(_))
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial { failed, total }) => {
            eprintln!("error: {failed} of {total} items failed");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
