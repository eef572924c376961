use std::path::PathBuf;
use std::process::ExitCode;

use bioenc_cli::commands::{self, Globals, SynthKind};
use bioenc_cli::config::KeyValueConfig;
use bioenc_cli::manifest::Split;
use bioenc_core::Result;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bioenc", version, about = "Self-supervised encoder for animal vocalizations")]
struct Cli {
    /// Master seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Pretrain,
    Classify,
    Detect,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1-only")]
    OneOnly,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with its manifest.
    Synth {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        /// Clips (pretrain), train clips per class (classify) or train recordings (detect).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Two-stage self-supervised pretraining.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Learning-rate sweep with a task head.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy or mAP on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Row name in metrics.csv; defaults to the model file stem.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Sliding-window event detection on one WAV file.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Pooled embeddings for every manifest entry (.csv or .jsonl).
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metric tables and convert to T-scores.
    Tscore {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let g = Globals {
        seed: cli.seed,
        config: match &cli.config {
            Some(p) => KeyValueConfig::load(p)?,
            None => KeyValueConfig::default(),
        },
    };
    match cli.command {
        Command::Synth { kind, out, count } => {
            let kind = match kind {
                KindArg::Pretrain => SynthKind::Pretrain,
                KindArg::Classify => SynthKind::Classify,
                KindArg::Detect => SynthKind::Detect,
            };
            let path = commands::cmd_synth(&g, kind, &out, count)?;
            println!("{}", path.display());
        }
        Command::Pretrain { manifest, out, stage } => {
            let r = commands::cmd_pretrain(&g, &manifest, &out, matches!(stage, StageArg::OneOnly))?;
            println!("pretrained {} stage(s)", if r.stage2.is_some() { 2 } else { 1 });
        }
        Command::Finetune { checkpoint, manifest, out } => {
            let r = commands::cmd_finetune(&g, &checkpoint, &manifest, &out)?;
            println!(
                "best lr {} epoch {} valid {} {:.4}",
                r.best_lr, r.best_epoch, r.metric_name, r.best_valid_metric
            );
        }
        Command::Eval { model, manifest, out, split, model_id } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let r = commands::cmd_eval(&g, &model, &manifest, split, &out, model_id.as_deref())?;
            println!("{} {} {:.4}", r.dataset_id, r.metric_name, r.value);
        }
        Command::Detect { model, input, out, threshold } => {
            let d = commands::cmd_detect(&g, &model, &input, &out, threshold)?;
            println!("{} events", d.events.len());
        }
        Command::Embed { model, manifest, out } => {
            let rows = commands::cmd_embed(&model, &manifest, &out)?;
            println!("{} embeddings", rows.len());
        }
        Command::Tscore { inputs, out } => {
            commands::cmd_tscore(&inputs, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
