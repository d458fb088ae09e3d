//! `quatrain` — train, generate and evaluate from the command line.
//! Every error exits non-zero with a single machine-parsable line:
//! `error[CODE]: message`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "quatrain", version, about = "Three-stage quatrain generation pipeline")]
struct Cli {
    /// Pipeline configuration file (key = value lines)
    #[arg(long, global = true, default_value = "quatrain.conf")]
    config: PathBuf,

    /// Overrides the command's seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides checkpoint_dir from the config
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train character embeddings (skip-gram with NCE)
    TrainEmbed,
    /// Train the LDA topic model on segmented poems
    TrainLda,
    /// Train the backward/forward language models
    TrainBflm,
    /// Train the hierarchy-attention seq2seq model
    TrainHie,
    /// Generate one quatrain with a title
    Generate {
        /// Theme name from the taxonomy; a phrase is picked at random
        #[arg(long, conflicts_with = "phrase")]
        theme: Option<String>,
        /// Explicit theme phrase (its theme supplies title candidates)
        #[arg(long)]
        phrase: Option<String>,
        /// Line length, 5 or 7 (default from config)
        #[arg(long)]
        len: Option<usize>,
        /// Beam width (default from config)
        #[arg(long)]
        beam: Option<usize>,
        /// Append the generated poem to this JSONL file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated poems (BLEU-2 and RHYTHM) against the corpus
    Evaluate {
        /// JSONL of generated poems with their themes
        #[arg(long)]
        generated: PathBuf,
        /// Swap each theme for a seeded-random different theme
        #[arg(long)]
        negative_control: Option<u64>,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for model layers
    GradCheck {
        /// A single layer name (default: every registered layer)
        #[arg(long)]
        layer: Option<String>,
    },
    /// Tone/rhyme scoring of poems from a JSONL file
    ProsodyCheck {
        #[arg(long)]
        poems: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let ctx = commands::Context {
        config_path: cli.config,
        seed_override: cli.seed,
        checkpoint_dir_override: cli.checkpoint_dir,
    };
    let result = match cli.command {
        Command::TrainEmbed => commands::train_embed(&ctx),
        Command::TrainLda => commands::train_lda(&ctx),
        Command::TrainBflm => commands::train_bflm(&ctx),
        Command::TrainHie => commands::train_hie(&ctx),
        Command::Generate {
            theme,
            phrase,
            len,
            beam,
            out,
        } => commands::generate(&ctx, theme, phrase, len, beam, out),
        Command::Evaluate {
            generated,
            negative_control,
            out,
        } => commands::evaluate(&ctx, &generated, negative_control, out),
        Command::GradCheck { layer } => commands::grad_check(&ctx, layer),
        Command::ProsodyCheck { poems } => commands::prosody_check(&ctx, &poems),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error[{}]: {}", e.code(), msg);
            ExitCode::FAILURE
        }
    }
}
