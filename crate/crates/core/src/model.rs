//! The assembled relation model and the per-pair inputs it consumes.

use ndarray::{s, Array1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::config::ModelConfig;
use crate::data::{sample_span, union_box, Tracklet, VideoAnnotation, VocabularySplit};
use crate::encoders::{text_matrix, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::objectives::{self, LossBreakdown};
use crate::ov_tracklet::{motion_features, MotionProjection};
use crate::prompt_align::{BatchStats, PromptAligner};
use crate::st_refiner::{pool_roles, RefinedFeatures, SpatioTemporalRefiner};
use crate::vt_aggregation::{Aggregated, VtAggregation, ROLES};

/// Frozen inputs and labels of one ordered subject/object pair.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub video_id: String,
    pub sub_tid: u32,
    pub obj_tid: u32,
    /// Common span of the two tracklets, half-open.
    pub begin_fid: usize,
    pub end_fid: usize,
    pub frames: Vec<usize>,
    /// Region embeddings `[T * 4, d]`.
    pub visual: Mat,
    /// Caption embeddings `[T * 4, d]`.
    pub text: Mat,
    /// Raw motion descriptors `[T, 8]`.
    pub motion: Mat,
    pub sub_category: Option<String>,
    pub obj_category: Option<String>,
    /// Annotated predicates of this ordered pair.
    pub predicates: Vec<String>,
    /// Per sampled frame, 1 when any annotated relation of the pair is active.
    pub interaction: Vec<f64>,
}

/// Encodes the four role regions and captions of a pair over `n_frames`
/// frames sampled from its common span.
pub fn build_pair(
    provider: &dyn EmbeddingProvider,
    video: &VideoAnnotation,
    sub: &Tracklet,
    obj: &Tracklet,
    n_frames: usize,
) -> Result<PairSample> {
    let (begin, end) = sub
        .overlap(obj)
        .ok_or_else(|| Error::Argument(format!("tracklets {} and {} never co-occur", sub.tid, obj.tid)))?;
    let frames = sample_span(begin, end, n_frames);
    let d = provider.dim();
    let mut visual = Mat::zeros((frames.len() * ROLES, d));
    let mut text = Mat::zeros((frames.len() * ROLES, d));
    let frame_box = video.frame_box();
    for (t, &fid) in frames.iter().enumerate() {
        let (bs, bo) = (sub.box_at(fid).expect("in span"), obj.box_at(fid).expect("in span"));
        let boxes = [*bs, *bo, union_box(bs, bo), frame_box];
        for (k, b) in boxes.iter().enumerate() {
            visual
                .row_mut(t * ROLES + k)
                .assign(&provider.embed_region(&video.video_id, fid, b)?);
            let caption = provider.caption_region(&video.video_id, fid, b)?;
            text.row_mut(t * ROLES + k).assign(&provider.embed_text(&caption.text)?);
        }
    }
    let relations: Vec<_> = video
        .relations
        .iter()
        .filter(|r| r.subject_tid == sub.tid && r.object_tid == obj.tid)
        .collect();
    let mut predicates: Vec<String> = Vec::new();
    for r in &relations {
        if !predicates.contains(&r.predicate) {
            predicates.push(r.predicate.clone());
        }
    }
    let interaction = frames
        .iter()
        .map(|&f| {
            if relations.iter().any(|r| r.begin_fid <= f && f < r.end_fid) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(PairSample {
        video_id: video.video_id.clone(),
        sub_tid: sub.tid,
        obj_tid: obj.tid,
        begin_fid: begin,
        end_fid: end,
        motion: motion_features(sub, obj, &frames)?,
        frames,
        visual,
        text,
        sub_category: sub.category.clone(),
        obj_category: obj.category.clone(),
        predicates,
        interaction,
    })
}

/// Every ordered pair of co-occurring tracklets, in tid order.
pub fn build_pairs(provider: &dyn EmbeddingProvider, video: &VideoAnnotation, n_frames: usize) -> Result<Vec<PairSample>> {
    let mut out = Vec::new();
    for s in &video.tracklets {
        for o in &video.tracklets {
            if s.tid != o.tid && s.overlap(o).is_some() {
                out.push(build_pair(provider, video, s, o, n_frames)?);
            }
        }
    }
    Ok(out)
}

/// Category subsets a forward pass scores against (indices into the model's
/// object and predicate label lists).
#[derive(Clone, Debug)]
pub struct Scope {
    pub objects: Vec<usize>,
    pub predicates: Vec<usize>,
}

/// Graph nodes of one batched forward pass.
pub struct ForwardOutput {
    pub frames: usize,
    pub aggregated: Aggregated,
    pub motion: Var,
    pub refined: RefinedFeatures,
    /// Time-averaged role features after the visual adapter, `[P * 4, d]`.
    pub pooled: Var,
    /// Time-averaged joint feature, `[P, d]`.
    pub joint_pooled: Var,
    /// Object-head logits (cosine over tau), `[P, |scope.objects|]`.
    pub logits_s: Var,
    pub logits_o: Var,
    /// Relation probabilities, `[P, |scope.predicates|]`.
    pub relation: Var,
    pub alpha: Option<Var>,
    /// Per-frame interaction probabilities, `[P * T, 1]`.
    pub interaction: Var,
    /// Batch statistics seen by adapters: `(is_text_adapter, stats)`.
    pub adapter_stats: Vec<(bool, BatchStats)>,
}

/// Scores of one pair against the full vocabulary.
#[derive(Clone, Debug)]
pub struct PairScores {
    pub sub_probs: Vec<f64>,
    pub obj_probs: Vec<f64>,
    pub predicate_scores: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: VocabularySplit,
    pub store: ParamStore,
    /// Non-learnable running statistics.
    pub buffers: ParamStore,
    pub object_labels: Vec<String>,
    pub predicate_labels: Vec<String>,
    /// Frozen `embed_text("a photo of <c>")` rows for `object_labels`.
    pub object_text: Mat,
    pub vt: VtAggregation,
    pub motion: MotionProjection,
    pub refiner: SpatioTemporalRefiner,
    pub aligner: PromptAligner,
    pub interaction: Linear,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, vocab: &VocabularySplit, provider: &dyn EmbeddingProvider) -> Result<Self> {
        cfg.validate()?;
        vocab.validate()?;
        if provider.dim() != cfg.d || provider.token_dim() != cfg.d_token {
            return Err(Error::Config(format!(
                "encoder dims ({}, {}) differ from model.d={} / model.d_token={}",
                provider.dim(),
                provider.token_dim(),
                cfg.d,
                cfg.d_token
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut buffers = ParamStore::new();
        let object_labels = vocab.objects();
        let predicate_labels = vocab.predicates();
        let prompts: Vec<String> = object_labels.iter().map(|c| format!("a photo of {c}")).collect();
        let object_text = text_matrix(provider, &prompts)?;
        let vt = VtAggregation::new(&mut store, &mut rng, cfg);
        let motion = MotionProjection::new(&mut store, &mut rng, cfg.d);
        let refiner = SpatioTemporalRefiner::new(&mut store, &mut rng, cfg);
        let aligner = PromptAligner::new(&mut store, &mut buffers, &mut rng, provider, &predicate_labels, cfg)?;
        let interaction = Linear::new(&mut store, "interaction", &mut rng, ROLES * cfg.d, 1);
        Ok(Model {
            config: cfg.clone(),
            vocab: vocab.clone(),
            store,
            buffers,
            object_labels,
            predicate_labels,
            object_text,
            vt,
            motion,
            refiner,
            aligner,
            interaction,
        })
    }

    /// Base object and predicate classes.
    pub fn base_scope(&self) -> Scope {
        Scope {
            objects: (0..self.vocab.objects_base.len()).collect(),
            predicates: (0..self.vocab.predicates_base.len()).collect(),
        }
    }

    pub fn full_scope(&self) -> Scope {
        Scope {
            objects: (0..self.object_labels.len()).collect(),
            predicates: (0..self.predicate_labels.len()).collect(),
        }
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.store)
    }

    pub fn forward(
        &self,
        ctx: &Ctx,
        provider: &dyn EmbeddingProvider,
        batch: &[&PairSample],
        scope: &Scope,
        force_alpha: Option<f64>,
    ) -> Result<ForwardOutput> {
        let g = ctx.g;
        let first = batch
            .first()
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        let t = first.frames.len();
        if batch.iter().any(|p| p.frames.len() != t) {
            return Err(Error::Shape("pairs in a batch must share the frame count".into()));
        }
        let stack = |f: fn(&PairSample) -> &Mat| {
            let views: Vec<_> = batch.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform pair shapes")
        };
        let pairs = batch.len();
        let visual = g.leaf(stack(|p| &p.visual));
        let text = g.leaf(stack(|p| &p.text));
        let raw_motion = g.leaf(stack(|p| &p.motion));

        let aggregated = self.vt.forward(ctx, visual, text, t);
        let motion = self.motion.forward(g, raw_motion);
        let refined = self.refiner.forward(ctx, aggregated.fused, motion, t)?;

        let mut adapter_stats = Vec::new();
        let mut pooled = pool_roles(g, refined.temporal, t);
        if let Some(adapter) = &self.aligner.visual_adapter {
            let (y, stats) = adapter.forward(ctx, &self.buffers, pooled);
            pooled = y;
            adapter_stats.extend(stats.map(|s| (false, s)));
        }
        let joint_pooled = g.group_mean_rows(refined.joint, t);

        let object_rows = self.object_text.select(ndarray::Axis(0), &scope.objects);
        let object_t = g.leaf(object_rows.t().to_owned());
        let unit = g.normalize_rows(pooled);
        let logits = |role: usize| {
            let rows: Vec<usize> = (0..pairs).map(|p| p * ROLES + role).collect();
            g.scale(g.matmul(g.gather_rows(unit, &rows), object_t), 1.0 / self.config.tau)
        };
        let (logits_s, logits_o) = (logits(0), logits(1));

        let rel_text = self
            .aligner
            .relation_text(ctx, &self.buffers, provider, joint_pooled, &scope.predicates, force_alpha)?;
        adapter_stats.extend(rel_text.stats.iter().map(|(_, s)| (true, s.clone())));
        let relation = self
            .aligner
            .relation_scores(g, pooled, &rel_text, scope.predicates.len());

        let per_frame = g.reshape(refined.temporal, pairs * t, ROLES * self.config.d);
        let interaction = g.sigmoid(self.interaction.forward(g, per_frame));

        Ok(ForwardOutput {
            frames: t,
            aggregated,
            motion,
            refined,
            pooled,
            joint_pooled,
            logits_s,
            logits_o,
            relation,
            alpha: rel_text.alpha,
            interaction,
            adapter_stats,
        })
    }

    /// Training loss over base categories for a batch of labelled pairs.
    pub fn loss(
        &self,
        ctx: &Ctx,
        provider: &dyn EmbeddingProvider,
        batch: &[&PairSample],
        gamma: f64,
        delta: f64,
    ) -> Result<(Var, LossBreakdown, ForwardOutput)> {
        let g = ctx.g;
        let scope = self.base_scope();
        let out = self.forward(ctx, provider, batch, &scope, None)?;
        let base_objects = &self.vocab.objects_base;
        let base_predicates = &self.vocab.predicates_base;
        let object_index = |c: &Option<String>, tid: u32| -> Result<usize> {
            let c = c
                .as_ref()
                .ok_or_else(|| Error::Argument(format!("training tracklet {tid} has no category")))?;
            base_objects
                .iter()
                .position(|b| b == c)
                .ok_or_else(|| Error::Leakage(format!("object category {c:?} is not a base category")))
        };
        let y_s = batch
            .iter()
            .map(|p| object_index(&p.sub_category, p.sub_tid))
            .collect::<Result<Vec<_>>>()?;
        let y_o = batch
            .iter()
            .map(|p| object_index(&p.obj_category, p.obj_tid))
            .collect::<Result<Vec<_>>>()?;
        let mut y_rel = Mat::zeros((batch.len(), base_predicates.len()));
        for (i, p) in batch.iter().enumerate() {
            for r in &p.predicates {
                let c = base_predicates
                    .iter()
                    .position(|b| b == r)
                    .ok_or_else(|| Error::Leakage(format!("predicate {r:?} is not a base category")))?;
                y_rel[[i, c]] = 1.0;
            }
        }
        let y_int = Mat::from_shape_vec(
            (batch.len() * out.frames, 1),
            batch.iter().flat_map(|p| p.interaction.iter().copied()).collect(),
        )
        .expect("one label per frame");

        let l_obj = objectives::loss_obj_sub(g, out.logits_s, out.logits_o, &y_s, &y_o)?;
        let l_rel = objectives::loss_rel(g, out.relation, &y_rel)?;
        let l_int = objectives::loss_int(g, out.interaction, &y_int)?;
        let (total, breakdown) = objectives::total_loss(g, l_obj, l_rel, l_int, gamma, delta)?;
        Ok((total, breakdown, out))
    }

    /// Evaluation-mode scores of each pair against the full vocabulary.
    pub fn score_pairs(&self, provider: &dyn EmbeddingProvider, pairs: &[PairSample]) -> Result<Vec<PairScores>> {
        let scope = self.full_scope();
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(64) {
            let g = self.graph();
            let ctx = Ctx::eval(&g);
            let refs: Vec<&PairSample> = chunk.iter().collect();
            let f = self.forward(&ctx, provider, &refs, &scope, None)?;
            let softmax = |row: ndarray::ArrayView1<f64>| -> Vec<f64> {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            };
            let (ls, lo, rel) = (g.value(f.logits_s), g.value(f.logits_o), g.value(f.relation));
            for i in 0..chunk.len() {
                out.push(PairScores {
                    sub_probs: softmax(ls.row(i)),
                    obj_probs: softmax(lo.row(i)),
                    predicate_scores: rel.row(i).to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Applies running-statistic updates collected in a training forward pass.
    pub fn update_running_stats(&mut self, stats: &[(bool, BatchStats)]) {
        for (text, s) in stats {
            let adapter = if *text {
                self.aligner.text_adapter.as_ref()
            } else {
                self.aligner.visual_adapter.as_ref()
            };
            if let Some(a) = adapter {
                a.update_running(&mut self.buffers, s);
            }
        }
    }

    /// Digest of everything that must never change during training: encoder
    /// parameters, class tokens, hand-crafted prompts and object prompts.
    pub fn frozen_fingerprint(&self, provider: &dyn EmbeddingProvider) -> String {
        let mut h = Sha256::new();
        h.update(provider.fingerprint().as_bytes());
        let prompts = &self.aligner.prompts;
        for m in std::iter::once(&prompts.class_tokens)
            .chain(prompts.hand.iter())
            .chain(std::iter::once(&self.object_text))
        {
            for v in m.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Pooled joint feature of a single pair in evaluation mode.
    pub fn joint_feature(&self, provider: &dyn EmbeddingProvider, pair: &PairSample) -> Result<Array1<f64>> {
        let g = self.graph();
        let ctx = Ctx::eval(&g);
        let f = self.forward(&ctx, provider, &[pair], &self.base_scope(), None)?;
        let row = g.value(f.joint_pooled).slice(s![0, ..]).to_owned();
        Ok(row)
    }
}
