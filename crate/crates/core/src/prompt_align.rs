//! Prompt-driven alignment between refined role features and category text.
//!
//! Each role owns `M` learnable context tokens shared across predicate
//! categories. A category's prompt is the context with the frozen class token
//! inserted at `round(cls_fraction * M)`. The hand-crafted template of each
//! role is laid out on the same `M + 1` slots so the two can be mixed token by
//! token before the frozen text encoder.

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::config::{AdapterPlacement, ModelConfig, PromptVariant};
use crate::encoders::{class_token, stack_rows, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, Linear};
use crate::vt_aggregation::{Role, ROLES};

pub const CLS: &str = "[CLS]";

/// Hand-crafted template of a role; `[CLS]` marks the class slot.
pub fn hand_template(role: Role) -> &'static str {
    match role {
        Role::Subject => "An image of a person or object [CLS] something",
        Role::Object => "An image of something [CLS] a person or object",
        Role::Union | Role::Background => "An image of the visual relation [CLS] between two entities",
    }
}

/// Slot of the class token among `m + 1` positions.
pub fn class_index(m: usize, cls_fraction: f64) -> usize {
    ((cls_fraction * m as f64).round() as usize).min(m)
}

/// Lays template words out on `m + 1` slots with `[CLS]` at `cls`: words
/// before the class are right-aligned against it, words after are
/// left-aligned; overflow is dropped at the far ends and free slots are zero.
pub fn align_template(
    provider: &dyn EmbeddingProvider,
    template: &str,
    class: ArrayView1<f64>,
    m: usize,
    cls: usize,
) -> Result<Mat> {
    let (before, after) = template
        .split_once(CLS)
        .ok_or_else(|| Error::Argument(format!("template {template:?} has no {CLS} slot")))?;
    let tokens = |s: &str| -> Result<Vec<Array1<f64>>> {
        if s.trim().is_empty() {
            Ok(Vec::new())
        } else {
            provider.word_tokens(s)
        }
    };
    let (before, after) = (tokens(before)?, tokens(after)?);
    let mut out = Mat::zeros((m + 1, provider.token_dim()));
    for (slot, tok) in (0..cls).rev().zip(before.iter().rev()) {
        out.row_mut(slot).assign(tok);
    }
    for (slot, tok) in (cls + 1..=m).zip(after.iter()) {
        out.row_mut(slot).assign(tok);
    }
    out.row_mut(cls).assign(&class);
    Ok(out)
}

/// Learnable contexts plus frozen class and hand-template tokens for a
/// predicate vocabulary.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub m: usize,
    pub cls: usize,
    pub labels: Vec<String>,
    /// Per role, `[M, d_token]`.
    pub context: [ParamId; ROLES],
    /// `[C, d_token]`, frozen.
    pub class_tokens: Mat,
    /// Per role, `[C * (M + 1), d_token]`, frozen.
    pub hand: [Mat; ROLES],
}

impl PromptSet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        provider: &dyn EmbeddingProvider,
        labels: &[String],
        m: usize,
        cls_fraction: f64,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("prompt.m_tokens must be at least 1".into()));
        }
        let cls = class_index(m, cls_fraction);
        let dt = provider.token_dim();
        let class_rows = labels
            .iter()
            .map(|l| class_token(provider, l))
            .collect::<Result<Vec<_>>>()?;
        let class_tokens = stack_rows(&class_rows, dt)?;
        let context = Role::ALL.map(|role| {
            store.add(
                format!("prompt.context.{}", role.index()),
                nn::normal(rng, m, dt, 0.02),
            )
        });
        let mut hand = Vec::with_capacity(ROLES);
        for role in Role::ALL {
            let mut rows = Mat::zeros((labels.len() * (m + 1), dt));
            for (i, c) in class_tokens.rows().into_iter().enumerate() {
                let seq = align_template(provider, hand_template(role), c, m, cls)?;
                rows.slice_mut(ndarray::s![i * (m + 1)..(i + 1) * (m + 1), ..]).assign(&seq);
            }
            hand.push(rows);
        }
        Ok(PromptSet {
            m,
            cls,
            labels: labels.to_vec(),
            context,
            class_tokens,
            hand: hand.try_into().expect("one template per role"),
        })
    }

    pub fn len(&self) -> usize {
        self.m + 1
    }

    pub fn category_index(&self, category: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == category)
            .ok_or_else(|| Error::Argument(format!("unknown category {category:?}")))
    }

    /// Token sequence `[M + 1, d_token]` of one role and category.
    pub fn build_prompt(&self, store: &ParamStore, role: Role, category: &str) -> Result<Mat> {
        let i = self.category_index(category)?;
        let ctx = store.get(self.context[role.index()]);
        let mut out = Mat::zeros((self.len(), ctx.ncols()));
        for j in 0..self.len() {
            let row = match j.cmp(&self.cls) {
                std::cmp::Ordering::Less => ctx.row(j),
                std::cmp::Ordering::Equal => self.class_tokens.row(i),
                std::cmp::Ordering::Greater => ctx.row(j - 1),
            };
            out.row_mut(j).assign(&row);
        }
        Ok(out)
    }

    pub fn hand_prompt(&self, role: Role, category: &str) -> Result<Mat> {
        let i = self.category_index(category)?;
        let n = self.len();
        Ok(self.hand[role.index()]
            .slice(ndarray::s![i * n..(i + 1) * n, ..])
            .to_owned())
    }

    /// Builds sequences for `q` context blocks (`contexts` is `[q * M, dt]`)
    /// and the given categories: `[q * |classes| * (M + 1), dt]`, context
    /// block major.
    fn sequences(&self, g: &Graph, contexts: Var, q: usize, classes: &[usize]) -> Var {
        let source = g.concat_rows(&[contexts, g.leaf(self.class_tokens.clone())]);
        let mut index = Vec::with_capacity(q * classes.len() * self.len());
        for b in 0..q {
            for &i in classes {
                for j in 0..self.len() {
                    index.push(match j.cmp(&self.cls) {
                        std::cmp::Ordering::Less => b * self.m + j,
                        std::cmp::Ordering::Equal => q * self.m + i,
                        std::cmp::Ordering::Greater => b * self.m + j - 1,
                    });
                }
            }
        }
        g.gather_rows(source, &index)
    }

    fn hand_rows(&self, role: Role, classes: &[usize]) -> Mat {
        let n = self.len();
        let src = &self.hand[role.index()];
        let mut out = Mat::zeros((classes.len() * n, src.ncols()));
        for (k, &i) in classes.iter().enumerate() {
            out.slice_mut(ndarray::s![k * n..(k + 1) * n, ..])
                .assign(&src.slice(ndarray::s![i * n..(i + 1) * n, ..]));
        }
        out
    }
}

/// Convex combination `alpha * learned + (1 - alpha) * hand`, token by token.
pub fn mix_tokens(learned: &Mat, hand: &Mat, alpha: f64) -> Mat {
    learned * alpha + hand * (1.0 - alpha)
}

/// Two-layer map from a pooled pair feature to a mixing weight in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct AlphaGate {
    pub hidden: Linear,
    pub out: Linear,
}

impl AlphaGate {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        let h = (d / 4).max(1);
        AlphaGate {
            hidden: Linear::new(store, "prompt.alpha.hidden", rng, d, h),
            out: Linear::from_weight(store, "prompt.alpha.out", nn::normal(rng, h, 1, 0.01)),
        }
    }

    /// `[P, d] -> [P, 1]`.
    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.sigmoid(self.out.forward(g, g.gelu(self.hidden.forward(g, x))))
    }
}

/// Input-conditional shift added to every context token.
#[derive(Clone, Debug)]
pub struct MetaNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl MetaNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, d_token: usize) -> Self {
        let h = (d / 4).max(1);
        MetaNet {
            hidden: Linear::new(store, "prompt.meta.hidden", rng, d, h),
            out: Linear::new(store, "prompt.meta.out", rng, h, d_token),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        self.out.forward(g, g.gelu(self.hidden.forward(g, x)))
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Residual bottleneck `out = in + gate * BN(GELU(W_up GELU(W_down in)))`.
/// The gate starts at zero, so a fresh adapter is the identity.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub name: String,
    pub down: Linear,
    pub up: Linear,
    pub gate: ParamId,
    /// Running statistics, stored outside the learnable parameters.
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Batch statistics observed by an adapter in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Mat,
    pub var: Mat,
}

impl Adapter {
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        bottleneck: usize,
    ) -> Self {
        Adapter {
            name: name.to_string(),
            down: Linear::new(store, &format!("{name}.down"), rng, d, bottleneck),
            up: Linear::new(store, &format!("{name}.up"), rng, bottleneck, d),
            gate: store.add(format!("{name}.gate"), Mat::zeros((1, 1))),
            running_mean: buffers.add(format!("{name}.running_mean"), Mat::zeros((1, d))),
            running_var: buffers.add(format!("{name}.running_var"), Mat::ones((1, d))),
        }
    }

    pub fn forward(&self, ctx: &Ctx, buffers: &ParamStore, x: Var) -> (Var, Option<BatchStats>) {
        let g = ctx.g;
        let h = g.gelu(self.up.forward(g, g.gelu(self.down.forward(g, x))));
        let rows = g.shape(h).0;
        let (normed, stats) = if ctx.train && rows >= 2 {
            let stats = {
                let hv = g.value(h);
                let mean = hv.mean_axis(ndarray::Axis(0)).expect("rows");
                let var = (&*hv - &mean).mapv(|v| v * v).mean_axis(ndarray::Axis(0)).expect("rows");
                BatchStats {
                    mean: mean.insert_axis(ndarray::Axis(0)),
                    var: var.insert_axis(ndarray::Axis(0)),
                }
            };
            (g.batch_norm(h, BN_EPS), Some(stats))
        } else {
            let mean = buffers.get(self.running_mean);
            let inv = buffers.get(self.running_var).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            (g.mul_row(g.add_row(h, g.leaf(-mean)), g.leaf(inv)), None)
        };
        (g.add(x, g.mul_scalar(normed, g.param(self.gate))), stats)
    }

    /// Exponential moving average of batch statistics.
    pub fn update_running(&self, buffers: &mut ParamStore, stats: &BatchStats) {
        let m = buffers.get_mut(self.running_mean);
        *m = &*m * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
        let v = buffers.get_mut(self.running_var);
        *v = &*v * (1.0 - BN_MOMENTUM) + &stats.var * BN_MOMENTUM;
    }
}

/// Cosine similarity of one visual feature against each category text row.
pub fn score_objects(v: ArrayView1<f64>, category_texts: &Array2<f64>) -> Vec<f64> {
    let nv = v.dot(&v).sqrt();
    category_texts
        .rows()
        .into_iter()
        .map(|t| {
            let nt = t.dot(&t).sqrt();
            if nv == 0.0 || nt == 0.0 {
                0.0
            } else {
                (v.dot(&t) / (nv * nt)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

fn unit(v: ArrayView1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v.to_owned() / n
    } else {
        v.to_owned()
    }
}

/// Concatenation of unit-normalized role features, renormalized.
pub fn join_roles(roles: &[ArrayView1<f64>]) -> Array1<f64> {
    let parts: Vec<f64> = roles.iter().flat_map(|r| unit(*r).to_vec()).collect();
    unit(Array1::from(parts).view())
}

/// Relation scores `sigmoid(scale * cos(v, l_r))` with both sides joined over
/// the four roles. `t_roles[k]` holds one row per category.
pub fn score_relations(
    v_roles: &[ArrayView1<f64>],
    t_roles: &[&Array2<f64>],
    logit_scale: f64,
) -> Result<Vec<f64>> {
    if v_roles.len() != ROLES || t_roles.len() != ROLES {
        return Err(Error::Argument(format!(
            "relation scoring needs all {ROLES} roles, got {} visual and {} text",
            v_roles.len(),
            t_roles.len()
        )));
    }
    let v = join_roles(v_roles);
    let n = t_roles[0].nrows();
    if t_roles.iter().any(|t| t.nrows() != n) {
        return Err(Error::Shape("role text tables disagree on category count".into()));
    }
    Ok((0..n)
        .map(|c| {
            let rows: Vec<ArrayView1<f64>> = t_roles.iter().map(|t| t.row(c)).collect();
            crate::autograd::sigmoid(logit_scale * v.dot(&join_roles(&rows)))
        })
        .collect())
}

/// Learnable pieces of the alignment head.
#[derive(Clone, Debug)]
pub struct PromptAligner {
    pub variant: PromptVariant,
    pub prompts: PromptSet,
    pub alpha: Option<AlphaGate>,
    pub meta: Option<MetaNet>,
    pub visual_adapter: Option<Adapter>,
    pub text_adapter: Option<Adapter>,
    pub logit_scale: f64,
}

/// Relation text features for a batch: `[P * |classes|, d]` per role, unit
/// rows, pair-major.
pub struct RelationText {
    pub roles: Vec<Var>,
    pub alpha: Option<Var>,
    pub stats: Vec<(usize, BatchStats)>,
}

impl PromptAligner {
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        provider: &dyn EmbeddingProvider,
        predicates: &[String],
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let prompts = PromptSet::new(store, rng, provider, predicates, cfg.m_tokens, cfg.cls_fraction)?;
        let alpha = (cfg.prompt_variant == PromptVariant::Mixed).then(|| AlphaGate::new(store, rng, cfg.d));
        let meta = (cfg.prompt_variant == PromptVariant::Conditional)
            .then(|| MetaNet::new(store, rng, cfg.d, cfg.d_token));
        let adapter = |store: &mut ParamStore, buffers: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            Adapter::new(store, buffers, rng, name, cfg.d, cfg.bottleneck())
        };
        let visual_adapter = cfg
            .adapter
            .visual()
            .then(|| adapter(store, buffers, rng, "adapter.visual"));
        let text_adapter = cfg
            .adapter
            .text()
            .then(|| adapter(store, buffers, rng, "adapter.text"));
        Ok(PromptAligner {
            variant: cfg.prompt_variant,
            prompts,
            alpha,
            meta,
            visual_adapter,
            text_adapter,
            logit_scale: cfg.relation_logit_scale,
        })
    }

    pub fn placement(&self) -> AdapterPlacement {
        match (self.visual_adapter.is_some(), self.text_adapter.is_some()) {
            (true, true) => AdapterPlacement::Both,
            (true, false) => AdapterPlacement::Visual,
            (false, true) => AdapterPlacement::Text,
            (false, false) => AdapterPlacement::None,
        }
    }

    /// Encodes relation prompts of `classes` for each of the `P` pairs whose
    /// pooled joint features are `x` (`[P, d]`). `force_alpha` replaces the
    /// gate output of the mixed variant.
    pub fn relation_text(
        &self,
        ctx: &Ctx,
        buffers: &ParamStore,
        provider: &dyn EmbeddingProvider,
        x: Var,
        classes: &[usize],
        force_alpha: Option<f64>,
    ) -> Result<RelationText> {
        let g = ctx.g;
        let pairs = g.shape(x).0;
        let n = self.prompts.len();
        let c = classes.len();
        let dt = provider.token_dim();
        let tile = |v: Var, rows: usize, copies: usize| {
            let idx: Vec<usize> = (0..copies * rows).map(|r| r % rows).collect();
            g.gather_rows(v, &idx)
        };
        let alpha = match self.variant {
            PromptVariant::Mixed => Some(match force_alpha {
                Some(a) => g.leaf(Mat::from_elem((pairs, 1), a)),
                None => self.alpha.as_ref().expect("mixed variant has a gate").forward(g, x),
            }),
            _ => None,
        };
        let mut roles = Vec::with_capacity(ROLES);
        let mut stats = Vec::new();
        for role in Role::ALL {
            let context = g.param(self.prompts.context[role.index()]);
            let hand = || g.leaf(self.prompts.hand_rows(role, classes));
            // `shared` sequences are identical for every pair
            let (tokens, shared) = match self.variant {
                PromptVariant::Hand => (hand(), true),
                PromptVariant::Continuous => (self.prompts.sequences(g, context, 1, classes), true),
                PromptVariant::Conditional => {
                    let meta = self.meta.as_ref().expect("conditional variant has a meta-net");
                    let shift = meta.forward(g, x);
                    let m = self.prompts.m;
                    let per_pair: Vec<usize> = (0..pairs * m).map(|r| r / m).collect();
                    let ctxs = g.add(tile(context, m, pairs), g.gather_rows(shift, &per_pair));
                    (self.prompts.sequences(g, ctxs, pairs, classes), false)
                }
                PromptVariant::Mixed => {
                    let learned = tile(self.prompts.sequences(g, context, 1, classes), c * n, pairs);
                    let hand_all = tile(hand(), c * n, pairs);
                    let per_row: Vec<usize> = (0..pairs * c * n).map(|r| r / (c * n)).collect();
                    let a = g.matmul(
                        g.gather_rows(alpha.expect("mixed alpha"), &per_row),
                        g.leaf(Mat::ones((1, dt))),
                    );
                    let one_minus = g.add_const(g.scale(a, -1.0), 1.0);
                    (g.add(g.mul(learned, a), g.mul(hand_all, one_minus)), false)
                }
            };
            let mut feats = provider.encode_tokens(g, tokens, n)?;
            if shared {
                feats = tile(feats, c, pairs);
            }
            if let Some(adapter) = &self.text_adapter {
                let (y, s) = adapter.forward(ctx, buffers, feats);
                feats = g.normalize_rows(y);
                if let Some(s) = s {
                    stats.push((role.index(), s));
                }
            }
            roles.push(feats);
        }
        Ok(RelationText { roles, alpha, stats })
    }

    /// Joint relation scores `[P, C]` from pooled role features `[P * 4, d]`
    /// and per-role text features `[P * C, d]`.
    pub fn relation_scores(&self, g: &Graph, pooled: Var, text: &RelationText, classes: usize) -> Var {
        let pairs = g.shape(pooled).0 / ROLES;
        let unit = g.normalize_rows(pooled);
        let v = g.normalize_rows(g.reshape(unit, pairs, ROLES * g.shape(pooled).1));
        let l = g.normalize_rows(g.concat_cols(&text.roles));
        let per_row: Vec<usize> = (0..pairs * classes).map(|r| r / classes).collect();
        let cos = g.row_sum(g.mul(g.gather_rows(v, &per_row), l));
        g.sigmoid(g.scale(g.reshape(cos, pairs, classes), self.logit_scale))
    }
}

/// Text feature of one role and category for a single pooled pair feature,
/// under the aligner's prompt variant.
#[allow(clippy::too_many_arguments)]
pub fn mix_and_encode(
    aligner: &PromptAligner,
    store: &ParamStore,
    buffers: &ParamStore,
    provider: &dyn EmbeddingProvider,
    role: Role,
    category: &str,
    x_pooled: ArrayView1<f64>,
    force_alpha: Option<f64>,
) -> Result<Array1<f64>> {
    if x_pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("pooled feature is not finite".into()));
    }
    let class = aligner.prompts.category_index(category)?;
    let g = Graph::with_params(store);
    let ctx = Ctx::eval(&g);
    let x = g.leaf(x_pooled.to_owned().insert_axis(ndarray::Axis(0)));
    let text = aligner.relation_text(&ctx, buffers, provider, x, &[class], force_alpha)?;
    let row = g.value(text.roles[role.index()]).row(0).to_owned();
    Ok(row)
}
