use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saclog::{exit, Pipeline, PipelineConfig, PipelineError, TrainMode};

/// Curriculum-learning pipeline for dialog state tracking.
#[derive(Parser)]
#[command(name = "saclog", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "saclog.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the corpus; write normalized copies.
    Ingest,
    /// Score every training example by difficulty.
    Score,
    /// Split scored examples into difficulty buckets.
    Bucket,
    /// Pre-train the encoder with the schema-aware objectives.
    Pretrain,
    /// Train the reference model and evaluate it on the validation split.
    Train {
        #[arg(long, value_enum, default_value_t = TrainMode::Curriculum)]
        mode: TrainMode,
    },
    /// Augment the hardest mispredicted training examples.
    Augment {
        /// Which trained model reviews the corpus.
        #[arg(long, value_enum, default_value_t = TrainMode::Curriculum)]
        mode: TrainMode,
    },
    /// Re-evaluate a trained model on the validation split.
    Evaluate {
        #[arg(long, value_enum, default_value_t = TrainMode::Curriculum)]
        mode: TrainMode,
    },
    /// Summarize the run directory as markdown with plots.
    Report,
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.paths.out = out;
    }
    let p = Pipeline::new(config)?;
    Ok(match cli.command {
        Command::Ingest => {
            let s = p.ingest()?;
            format!(
                "ingested {} training examples from {} dialogs, {} validation examples; {} warnings",
                s.train_examples,
                s.train_dialogs,
                s.valid_examples,
                s.warnings.len()
            )
        }
        Command::Score => format!("scored {} examples", p.score()?.len()),
        Command::Bucket => {
            let c = p.bucket()?;
            let sizes: Vec<String> = c.buckets().iter().map(|b| b.len().to_string()).collect();
            format!("bucket sizes: {}", sizes.join(" "))
        }
        Command::Pretrain => {
            let r = p.pretrain()?;
            let last = r.epochs.last().map_or(f64::NAN, |e| e.total);
            format!("pretrained on {} examples; final loss {last:.4}; {} unlocatable values", r.examples, r.unlocatable)
        }
        Command::Train { mode } => {
            let m = p.train(mode)?;
            format!("{mode} seed {}: JGA {:.4} after {} epochs", m.seed, m.jga, m.epochs_total)
        }
        Command::Augment { mode } => format!("emitted {} augmented examples", p.augment(mode)?.len()),
        Command::Evaluate { mode } => {
            let m = p.evaluate(mode)?;
            format!("{mode} seed {}: JGA {:.4}", m.seed, m.jga)
        }
        Command::Report => {
            let r = p.report()?;
            let mut s = format!("wrote {}", p.out().join("report.md").display());
            for (mode, jga) in &r.medians {
                s.push_str(&format!("\nmedian JGA {mode}: {:.2}%", 100.0 * jga));
            }
            s
        }
    })
}

fn main() -> ExitCode {
    // Environment variables are deliberately not consulted.
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("saclog: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
