use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ovvrd::config::Config;
use ovvrd::data::{load_annotation_dir, load_predictions, load_vocabulary, save_predictions};
use ovvrd::evaluation::{evaluate, EvalReport, Split, Task};
use ovvrd::infer::infer_videos;
use ovvrd::pipeline::{demo_config, make_provider, run_demo};
use ovvrd::synthetic::{demo_vocabulary, gen_synthetic, SyntheticOptions};
use ovvrd::train::{Checkpoint, Trainer};

#[derive(Parser)]
#[command(name = "pipeline", about = "Open-vocabulary video relation detection pipeline")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=0.002`.
    #[arg(short, long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (vocab.json + annotations/).
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        videos: usize,
        /// Vocabulary file; defaults to the built-in demo vocabulary.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Also draw novel objects and predicates (evaluation data).
        #[arg(long)]
        novel: bool,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write the per-step log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict relations for every video of a dataset directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "sgdet")]
        task: Task,
    },
    /// Score predictions against annotations.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Directory of annotation files.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "sgdet")]
        task: Task,
        #[arg(long, default_value = "all")]
        split: Split,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// gen-synthetic, train, infer and evaluate on four videos.
    Demo {
        #[arg(long, default_value = "demo-output")]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli, base: Config) -> Result<Config> {
    let mut cfg = base;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_env()?;
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &EvalReport, json: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match json {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    print!("{}", report.to_table());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenSynthetic { out, videos, vocab, novel } => {
            let cfg = load_config(&cli, Config::default())?;
            let vocab = match vocab {
                Some(p) => load_vocabulary(p)?,
                None => demo_vocabulary(),
            };
            let opts = SyntheticOptions {
                include_novel: *novel,
                ..SyntheticOptions::default()
            };
            let paths = gen_synthetic(cfg.seed, *videos, &vocab, &opts, out)?;
            println!("wrote {} videos to {}", videos, paths.root.display());
        }
        Command::Train { data, out, resume, log } => {
            let cfg = load_config(&cli, Config::default())?;
            let videos = load_annotation_dir(&data.join("annotations"))?;
            let vocab = load_vocabulary(&data.join("vocab.json"))?;
            let provider = make_provider(&cfg, &videos)?;
            let mut trainer = match resume {
                Some(path) => Trainer::resume(&Checkpoint::load(path)?, &cfg, provider.as_ref(), &videos)?,
                None => Trainer::new(&cfg, provider.as_ref(), &videos, &vocab)?,
            };
            let mut log_file = match log {
                Some(p) => Some(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => None,
            };
            let mut write_err = None;
            trainer.train(&mut |s| {
                println!("{}", s.line());
                if let Some(f) = log_file.as_mut() {
                    if let Err(e) = writeln!(f, "{}", s.line()) {
                        write_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = write_err {
                return Err(e).context("writing the training log");
            }
            trainer.checkpoint().save(out)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Infer { checkpoint, data, out, task } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let cfg = load_config(&cli, ckpt.config()?)?;
            let videos = load_annotation_dir(&data.join("annotations"))?;
            let provider = make_provider(&cfg, &videos)?;
            let model = ckpt.restore_model(provider.as_ref())?;
            let preds = infer_videos(&model, provider.as_ref(), &videos, *task, cfg.top_n)?;
            save_predictions(&preds, out)?;
            println!("predictions for {} videos written to {}", preds.len(), out.display());
        }
        Command::Evaluate { pred, gt, vocab, task, split, json } => {
            let preds = load_predictions(pred)?;
            let videos = load_annotation_dir(gt)?;
            let vocab = load_vocabulary(vocab)?;
            let report = evaluate(&preds, &videos, &vocab, *task, *split);
            print_report(&report, json.as_ref())?;
        }
        Command::Demo { out } => {
            let cfg = load_config(&cli, demo_config())?;
            let outcome = run_demo(&cfg, out, &mut |s| {
                if s.step % 20 == 0 || s.step == 1 {
                    println!("{}", s.line());
                }
            })?;
            println!();
            print!("{}", outcome.report.to_table());
            println!();
            print!("{}", outcome.table());
            if !outcome.passed() {
                bail!("demo checks failed");
            }
        }
    }
    Ok(())
}
