//! End-to-end orchestration shared by the `pipeline` binary and the tests.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;

use crate::config::{Config, EncoderKind};
use crate::data::{load_annotation_dir, save_predictions, PredictionSet, VideoAnnotation};
use crate::encoders::{EmbeddingProvider, ExternalProvider, SyntheticProvider};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, Split, Task};
use crate::infer::infer_videos;
use crate::objectives::LossBreakdown;
use crate::synthetic::{demo_vocabulary, gen_synthetic, SyntheticOptions};
use crate::train::{check_leakage, Checkpoint, StepLog, Trainer};

/// Embedding provider selected by `encoder.kind`. The synthetic provider is
/// planted with `videos` so their regions carry label signal.
pub fn make_provider(cfg: &Config, videos: &[VideoAnnotation]) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match cfg.encoder {
        EncoderKind::Synthetic => {
            Box::new(SyntheticProvider::new(cfg.seed, cfg.model.d, cfg.model.d_token).planted(videos))
        }
        EncoderKind::External => {
            if cfg.encoder_dir.is_empty() {
                return Err(Error::Config("encoder.kind=external needs encoder.dir".into()));
            }
            Box::new(ExternalProvider::open(Path::new(&cfg.encoder_dir), cfg.seed, cfg.model.d_token)?)
        }
    })
}

/// Small full-batch configuration that overfits the four-video demo set.
pub fn demo_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.frames = 8;
    cfg.train.lr = 3e-3;
    cfg.train.batch_size = 64;
    cfg.train.epochs = 200;
    cfg.train.max_steps = 200;
    cfg.train.decay_epochs = vec![150, 175, 190];
    cfg
}

pub struct DemoOutcome {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub history: Vec<StepLog>,
    pub final_loss: LossBreakdown,
    pub report: EvalReport,
    /// Annotated relations whose top-scored predicate for that pair is correct.
    pub top1_correct: usize,
    pub n_relations: usize,
    pub leakage_rejected: bool,
    pub elapsed: Duration,
}

impl DemoOutcome {
    pub fn checks(&self) -> Vec<(String, bool)> {
        let r50 = self.report.r50.unwrap_or(0.0);
        vec![
            (format!("final total loss {:.4} < 0.05", self.final_loss.total), self.final_loss.total < 0.05),
            (format!("training-set PredCls R@50 {:.2}% = 100%", 100.0 * r50), r50 == 1.0),
            (
                format!("top-1 predicate correct for {}/{} relations", self.top1_correct, self.n_relations),
                self.top1_correct == self.n_relations,
            ),
            ("leaked novel predicate rejected".to_string(), self.leakage_rejected),
            (
                format!("wall time {:.1}s < 300s", self.elapsed.as_secs_f64()),
                self.elapsed < Duration::from_secs(300),
            ),
        ]
    }

    pub fn table(&self) -> String {
        let mut out = String::from("check                                              result\n");
        for (name, ok) in self.checks() {
            out.push_str(&format!("{name:<50} {}\n", if ok { "PASS" } else { "FAIL" }));
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|(_, ok)| *ok)
    }
}

fn top1_correct(preds: &[PredictionSet], videos: &[VideoAnnotation]) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for v in videos {
        let Some(set) = preds.iter().find(|p| p.video_id == v.video_id) else { continue };
        for r in &v.relations {
            total += 1;
            let best = set
                .predictions
                .iter()
                .find(|p| p.sub_tid == Some(r.subject_tid) && p.obj_tid == Some(r.object_tid));
            if best.is_some_and(|p| p.triplet[1] == r.predicate) {
                hits += 1;
            }
        }
    }
    (hits, total)
}

/// gen-synthetic, train, infer and evaluate on four videos under `out`.
pub fn run_demo(cfg: &Config, out: &Path, on_step: &mut dyn FnMut(&StepLog)) -> Result<DemoOutcome> {
    let start = Instant::now();
    let vocab = demo_vocabulary();
    let paths = gen_synthetic(cfg.seed, 4, &vocab, &SyntheticOptions::default(), &out.join("data"))?;
    let videos = load_annotation_dir(&paths.annotations)?;
    let provider = make_provider(cfg, &videos)?;

    let mut trainer = Trainer::new(cfg, provider.as_ref(), &videos, &vocab)?;
    trainer.train(on_step)?;
    let history = trainer.history.clone();
    let final_loss = history
        .last()
        .map(|s| s.loss)
        .ok_or_else(|| Error::Argument("training ran no steps".into()))?;
    let checkpoint = out.join("checkpoint.json");
    trainer.checkpoint().save(&checkpoint)?;

    let model = Checkpoint::load(&checkpoint)?.restore_model(provider.as_ref())?;
    let preds = infer_videos(&model, provider.as_ref(), &videos, Task::PredCls, cfg.top_n)?;
    let predictions = out.join("predictions.json");
    save_predictions(&preds, &predictions)?;
    let report = evaluate(&preds, &videos, &vocab, Task::PredCls, Split::All);
    let (top1, n_relations) = top1_correct(&preds, &videos);

    let mut leaked = videos.clone();
    leaked[0].relations[0].predicate = vocab.predicates_novel[0].clone();
    let leakage_rejected = matches!(check_leakage(&leaked, &vocab), Err(Error::Leakage(_)));
    let elapsed = start.elapsed();
    info!("demo finished in {:.1}s", elapsed.as_secs_f64());
    Ok(DemoOutcome {
        data_dir: paths.root,
        checkpoint,
        predictions,
        history,
        final_loss,
        report,
        top1_correct: top1,
        n_relations,
        leakage_rejected,
        elapsed,
    })
}
