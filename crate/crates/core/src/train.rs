//! AdamW, the training loop, and checkpoints.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Mat, ParamStore};
use crate::config::{Config, TrainConfig};
use crate::data::{VideoAnnotation, VocabularySplit};
use crate::encoders::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::model::{build_pairs, Model, PairSample};
use crate::nn::Ctx;
use crate::objectives::LossBreakdown;

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.entries().iter().map(|e| Mat::zeros(e.value.dim())).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            state: AdamState { t: 0, m: zeros(), v: zeros() },
        }
    }

    /// One update. Parameters the loss does not reach are left untouched,
    /// decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        let s = &mut self.state;
        s.t += 1;
        let c1 = 1.0 - self.beta1.powi(s.t as i32);
        let c2 = 1.0 - self.beta2.powi(s.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut s.m[id.0], &mut s.v[id.0]);
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p *= 1.0 - lr * self.weight_decay;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
        }
    }
}

/// Rejects training annotations that mention anything but base categories.
pub fn check_leakage(videos: &[VideoAnnotation], vocab: &VocabularySplit) -> Result<()> {
    for v in videos {
        for t in &v.tracklets {
            if let Some(c) = &t.category {
                if !vocab.objects_base.contains(c) {
                    let kind = if vocab.is_novel_object(c) { "novel" } else { "unknown" };
                    return Err(Error::Leakage(format!(
                        "{}: tracklet {} has {kind} object category {c:?}",
                        v.video_id, t.tid
                    )));
                }
            }
        }
        for r in &v.relations {
            if !vocab.predicates_base.contains(&r.predicate) {
                let kind = if vocab.is_novel_predicate(&r.predicate) { "novel" } else { "unknown" };
                return Err(Error::Leakage(format!(
                    "{}: relation <{} {} {}> uses {kind} predicate",
                    v.video_id, r.subject_tid, r.predicate, r.object_tid
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!(
            "step={} epoch={} l_obj_sub={:.6} l_rel={:.6} l_int={:.6} total={:.6} lr={:.3e}",
            self.step, self.epoch, self.loss.l_obj_sub, self.loss.l_rel, self.loss.l_int, self.loss.total, self.lr
        )
    }
}

/// Serializable position of the shuffling/dropout generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: String,
    pub model_hash: String,
    pub vocab: String,
    pub step: usize,
    pub epoch: usize,
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub optimizer: AdamState,
    pub rng: RngState,
    pub frozen_fingerprint: String,
}

fn same_layout(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.entries()
            .iter()
            .zip(b.entries())
            .all(|(x, y)| x.name == y.name && x.value.dim() == y.value.dim())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let hash = ckpt.config()?.model_hash();
        if hash != ckpt.model_hash {
            return Err(Error::Checkpoint(format!(
                "{}: stored config hash {} does not match its config ({hash})",
                path.display(),
                ckpt.model_hash
            )));
        }
        Ok(ckpt)
    }

    pub fn config(&self) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_text(&self.config)?;
        Ok(cfg)
    }

    pub fn vocabulary(&self) -> Result<VocabularySplit> {
        VocabularySplit::from_json_str(&self.vocab, Path::new("<checkpoint>"))
    }

    /// Rebuilds the model with the stored parameters and running statistics.
    pub fn restore_model(&self, provider: &dyn EmbeddingProvider) -> Result<Model> {
        let cfg = self.config()?;
        let mut model = Model::new(&cfg.model, cfg.seed, &self.vocabulary()?, provider)?;
        if !same_layout(&model.store, &self.params) || !same_layout(&model.buffers, &self.buffers) {
            return Err(Error::Checkpoint("parameter layout differs from the stored config".into()));
        }
        if model.frozen_fingerprint(provider) != self.frozen_fingerprint {
            return Err(Error::Checkpoint(
                "frozen encoder state differs from the one used for training".into(),
            ));
        }
        model.store = self.params.clone();
        model.buffers = self.buffers.clone();
        Ok(model)
    }
}

pub struct Trainer<'a> {
    pub config: Config,
    pub model: Model,
    pub optimizer: AdamW,
    pub pairs: Vec<PairSample>,
    pub step: usize,
    /// Last epoch that ran (1-based, 0 before training).
    pub epoch: usize,
    pub history: Vec<StepLog>,
    provider: &'a dyn EmbeddingProvider,
    rng: ChaCha8Rng,
    frozen: String,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &Config, provider: &'a dyn EmbeddingProvider, videos: &[VideoAnnotation], vocab: &VocabularySplit) -> Result<Self> {
        cfg.validate()?;
        check_leakage(videos, vocab)?;
        let model = Model::new(&cfg.model, cfg.seed, vocab, provider)?;
        let optimizer = AdamW::new(&model.store, &cfg.train);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00_0000);
        Self::assemble(cfg, provider, videos, model, optimizer, rng)
    }

    /// Continues from a checkpoint. The model-defining part of `cfg` must
    /// hash to the checkpoint's value; schedule keys may change.
    pub fn resume(ckpt: &Checkpoint, cfg: &Config, provider: &'a dyn EmbeddingProvider, videos: &[VideoAnnotation]) -> Result<Self> {
        cfg.validate()?;
        if cfg.model_hash() != ckpt.model_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match checkpoint {}",
                cfg.model_hash(),
                ckpt.model_hash
            )));
        }
        let vocab = ckpt.vocabulary()?;
        check_leakage(videos, &vocab)?;
        let model = ckpt.restore_model(provider)?;
        let mut optimizer = AdamW::new(&model.store, &cfg.train);
        optimizer.state = ckpt.optimizer.clone();
        let mut t = Self::assemble(cfg, provider, videos, model, optimizer, ckpt.rng.restore()?)?;
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    fn assemble(
        cfg: &Config,
        provider: &'a dyn EmbeddingProvider,
        videos: &[VideoAnnotation],
        model: Model,
        optimizer: AdamW,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        for v in videos {
            pairs.extend(build_pairs(provider, v, cfg.model.frames)?);
        }
        if pairs.is_empty() {
            return Err(Error::Argument("training set has no co-occurring tracklet pairs".into()));
        }
        let frozen = model.frozen_fingerprint(provider);
        Ok(Trainer {
            config: cfg.clone(),
            model,
            optimizer,
            pairs,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            provider,
            rng,
            frozen,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.config.train.batch_size)
    }

    /// Step budget: `train.max_steps` when set, otherwise all epochs.
    pub fn total_steps(&self) -> usize {
        match self.config.train.max_steps {
            0 => self.config.train.epochs * self.steps_per_epoch(),
            n => n,
        }
    }

    pub fn frozen_fingerprint(&self) -> &str {
        &self.frozen
    }

    /// One optimizer step on the given pair indices.
    pub fn train_step(&mut self, batch: &[usize], lr: f64) -> Result<LossBreakdown> {
        let tc = &self.config.train;
        let refs: Vec<&PairSample> = batch.iter().map(|&i| &self.pairs[i]).collect();
        let (grads, breakdown, stats) = {
            let g = self.model.graph();
            let ctx = Ctx::train(&g, self.config.model.dropout, &mut self.rng);
            let (loss, breakdown, out) = self.model.loss(&ctx, self.provider, &refs, tc.gamma, tc.delta)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at step {}", self.step + 1)));
            }
            (g.backward(loss), breakdown, out.adapter_stats)
        };
        self.optimizer.step(&mut self.model.store, &grads, lr);
        self.model.update_running_stats(&stats);
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs one shuffled epoch, stopping early at the step budget. Returns
    /// `false` once the budget is exhausted.
    pub fn run_epoch(&mut self, on_step: &mut dyn FnMut(&StepLog)) -> Result<bool> {
        let budget = self.total_steps();
        if self.step >= budget {
            return Ok(false);
        }
        self.epoch += 1;
        let lr = self.config.train.lr_at_epoch(self.epoch);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        for batch in order.chunks(self.config.train.batch_size) {
            if self.step >= budget {
                break;
            }
            let loss = self.train_step(batch, lr)?;
            let log = StepLog {
                step: self.step,
                epoch: self.epoch,
                lr,
                loss,
            };
            on_step(&log);
            self.history.push(log);
        }
        let now = self.model.frozen_fingerprint(self.provider);
        if now != self.frozen {
            return Err(Error::Invariant(format!("frozen state changed during epoch {}", self.epoch)));
        }
        Ok(self.step < budget)
    }

    pub fn train(&mut self, on_step: &mut dyn FnMut(&StepLog)) -> Result<()> {
        info!(
            "training on {} pairs, {} steps per epoch, budget {} steps",
            self.pairs.len(),
            self.steps_per_epoch(),
            self.total_steps()
        );
        while self.run_epoch(on_step)? {}
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.to_text(),
            model_hash: self.config.model_hash(),
            vocab: self.model.vocab.to_canonical_string(),
            step: self.step,
            epoch: self.epoch,
            params: self.model.store.clone(),
            buffers: self.model.buffers.clone(),
            optimizer: self.optimizer.state.clone(),
            rng: RngState::capture(&self.rng),
            frozen_fingerprint: self.frozen.clone(),
        }
    }
}
