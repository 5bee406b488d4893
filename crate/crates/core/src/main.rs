use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ser_forge::augment::AugmentConfig;
use ser_forge::commands::{
    cmd_ablate, cmd_augment_preview, cmd_dry_run, cmd_eval, cmd_featurize, cmd_featurize_corpus,
    cmd_prepare, cmd_train, PrepareSource, RunOptions,
};
use ser_forge::config::ExperimentConfig;
use ser_forge::dataset::Split;
use ser_forge::{Error, Result};

#[derive(Parser)]
#[command(name = "ser-forge", version, about = "Speech emotion recognition experiments")]
struct Cli {
    /// Single-threaded, byte-reproducible mode (timings go to timing.json).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for data loading and per-sample gradients.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a corpus (or synthesize the toy one) and write manifest + split.
    Prepare {
        #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
        data_dir: Option<PathBuf>,
        /// Synthesize this many toy clips per class instead.
        #[arg(long)]
        toy: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        /// Build everything and run one forward/backward pass only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Compare the three classification heads on the patch transformer.
    Ablate {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump model inputs as CSV, or fill a feature cache for a corpus.
    Featurize {
        /// WAV file or directory; omit to cache the configured corpus.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write an augmented copy of a clip for listening.
    AugmentPreview {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        /// Take the augmentation settings from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExpArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ExpArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn load_optional(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::toy().resolve(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::config("workers", e.to_string()))?;
    }
    let opts = RunOptions {
        deterministic: cli.deterministic,
        ..RunOptions::default()
    };
    match cli.command {
        Command::Prepare {
            data_dir,
            toy,
            out,
            seed,
        } => {
            let source = match (&data_dir, toy) {
                (_, Some(n)) => PrepareSource::Toy { n_per_class: n },
                (Some(d), None) => PrepareSource::Directory(d),
                (None, None) => return Err(Error::config("data_dir", "give --data-dir or --toy")),
            };
            let summary = cmd_prepare(source, &out, seed)?;
            for r in &summary.rejected {
                eprintln!("rejected: {r}");
            }
            print!("{summary}");
        }
        Command::Train { exp, dry_run } => {
            let cfg = exp.load()?;
            if dry_run {
                let s = cmd_dry_run(&cfg)?;
                println!(
                    "dry run ok: {} parameters, loss {:.4}, gradient norm {:.4}",
                    s.n_params, s.loss, s.grad_norm
                );
            } else {
                let r = cmd_train(&cfg, &opts)?;
                println!(
                    "{}: best epoch {}, test accuracy {:.2}%, macro F1 {:.2}% -> {}",
                    r.report.label,
                    r.history.best_epoch,
                    100.0 * r.report.accuracy,
                    100.0 * r.report.macro_f1,
                    r.run_dir.display()
                );
            }
        }
        Command::Ablate { exp } => {
            let cfg = exp.load()?;
            let out = cmd_ablate(&cfg, &opts)?;
            for r in &out.reports {
                println!(
                    "{:<14} accuracy {:6.2}%  F1 {:6.2}%  head params {}",
                    r.head,
                    100.0 * r.accuracy,
                    100.0 * r.macro_f1,
                    r.head_params
                );
            }
        }
        Command::Eval {
            checkpoint,
            split,
            out,
        } => {
            let split: Split = split.parse()?;
            let r = cmd_eval(&checkpoint, split, out.as_deref(), &opts)?;
            println!(
                "{} on {}: accuracy {:.2}%, macro F1 {:.2}%",
                r.label,
                r.split,
                100.0 * r.accuracy,
                100.0 * r.macro_f1
            );
        }
        Command::Featurize { input, out, config } => {
            let cfg = load_optional(&config)?;
            let n = match input {
                Some(i) => cmd_featurize(&i, &out, &cfg)?,
                None if config.is_some() => cmd_featurize_corpus(&cfg, &out)?,
                None => return Err(Error::config("in", "give --in, or --config to cache a corpus")),
            };
            println!("featurized {n} clip(s) into {}", out.display());
        }
        Command::AugmentPreview {
            input,
            out,
            seed,
            epoch,
            config,
        } => {
            let augment = match &config {
                Some(p) => ExperimentConfig::load(p)?.augment,
                None => AugmentConfig::default(),
            };
            cmd_augment_preview(&input, &out, seed, epoch, &augment)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
