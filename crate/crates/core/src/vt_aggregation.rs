//! Visual-text aggregation: caption features are refined over time by a
//! self-attention block, then fused into the visual role features.
//!
//! Role tensors `[T, 4, d]` are stored as `[T * 4, d]` matrices with rows in
//! frame-major, role-minor order. Batches of pairs stack these blocks.

use ndarray::{s, ArrayView1};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, ParamId, ParamStore, Var};
use crate::config::{AggregationManner, ModelConfig};
use crate::encoders::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};

pub const ROLES: usize = 4;
pub const ROLE_NAMES: [&str; ROLES] = ["subject", "object", "union", "background"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Subject = 0,
    Object = 1,
    Union = 2,
    Background = 3,
}

impl Role {
    pub const ALL: [Role; ROLES] = [Role::Subject, Role::Object, Role::Union, Role::Background];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Dense `[T, 4, d]` array.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleTensor {
    data: Mat,
}

impl RoleTensor {
    pub fn zeros(t: usize, d: usize) -> Self {
        RoleTensor {
            data: Mat::zeros((t * ROLES, d)),
        }
    }

    pub fn from_mat(data: Mat) -> Result<Self> {
        if data.nrows() == 0 || data.nrows() % ROLES != 0 {
            return Err(Error::Shape(format!(
                "{} rows do not form whole frames of {ROLES} roles",
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("role tensor has non-finite entries".into()));
        }
        Ok(RoleTensor { data })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows() / ROLES
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// `(T, 4, d)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames(), ROLES, self.dim())
    }

    pub fn get(&self, t: usize, role: Role) -> ArrayView1<'_, f64> {
        self.data.row(t * ROLES + role.index())
    }

    pub fn set(&mut self, t: usize, role: Role, v: ArrayView1<f64>) {
        self.data.row_mut(t * ROLES + role.index()).assign(&v);
    }

    pub fn as_mat(&self) -> &Mat {
        &self.data
    }

    pub fn into_mat(self) -> Mat {
        self.data
    }

    /// Reorders the time axis: frame `i` of the result is frame `perm[i]`.
    pub fn permute_frames(&self, perm: &[usize]) -> Self {
        let mut out = self.data.clone();
        for (i, &src) in perm.iter().enumerate() {
            out.slice_mut(s![i * ROLES..(i + 1) * ROLES, ..])
                .assign(&self.data.slice(s![src * ROLES..(src + 1) * ROLES, ..]));
        }
        RoleTensor { data: out }
    }
}

/// Text embeddings of per-frame role captions. `captions[t][k]` is the
/// caption of role `k` at frame `t`.
pub fn build_role_text(
    provider: &dyn EmbeddingProvider,
    captions: &[[Option<String>; ROLES]],
) -> Result<RoleTensor> {
    if captions.is_empty() {
        return Err(Error::Argument("no frames".into()));
    }
    let mut out = RoleTensor::zeros(captions.len(), provider.dim());
    for (t, frame) in captions.iter().enumerate() {
        for role in Role::ALL {
            let text = frame[role.index()]
                .as_deref()
                .filter(|c| !c.trim().is_empty())
                .ok_or_else(|| {
                    Error::Argument(format!("missing caption at frame {t}, role {}", ROLE_NAMES[role.index()]))
                })?;
            out.set(t, role, provider.embed_text(text)?.view());
        }
    }
    Ok(out)
}

/// Self-attention along time, shared across roles. `x` holds `pairs` stacked
/// `[T * 4, d]` blocks.
pub fn temporal_attention(ctx: &Ctx, blocks: &[TransformerBlock], x: Var, t: usize) -> (Var, Vec<Var>) {
    let g = ctx.g;
    let rows = g.shape(x).0;
    let pairs = rows / (t * ROLES);
    let order = nn::role_major_index(pairs, t, ROLES);
    let mut h = g.gather_rows(x, &order);
    let mut weights = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (y, w) = block.forward(ctx, h, t);
        h = y;
        weights.push(w);
    }
    (g.gather_rows(h, &nn::inverse_permutation(&order)), weights)
}

#[derive(Clone, Debug)]
struct CrossFusion {
    ln_query: LayerNorm,
    ln_memory: LayerNorm,
    att: MultiHeadAttention,
    norm_gain: ParamId,
    norm_bias: ParamId,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
enum Fusion {
    Cross(CrossFusion),
    Sum(Linear),
    Concat(Linear),
}

/// Output of [`VtAggregation::forward`].
pub struct Aggregated {
    pub fused: Var,
    pub text: Var,
    /// Cross-attention node, when the manner has one.
    pub cross_attention: Option<Var>,
    pub text_attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct VtAggregation {
    pub manner: AggregationManner,
    pub text_block: TransformerBlock,
    fusion: Fusion,
}

impl VtAggregation {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        let text_block = TransformerBlock::new(store, "vt.text", rng, d, cfg.n_heads, cfg.d_ff());
        let fusion = match cfg.manner {
            AggregationManner::CrossAttention => Fusion::Cross(CrossFusion {
                ln_query: LayerNorm::new(store, "vt.cross.ln_query", d),
                ln_memory: LayerNorm::new(store, "vt.cross.ln_memory", d),
                att: MultiHeadAttention::new(store, "vt.cross.att", rng, d, cfg.n_heads),
                norm_gain: store.add("vt.cross.norm.gain", Mat::ones((1, d))),
                norm_bias: store.add("vt.cross.norm.bias", Mat::zeros((1, d))),
                ln_ffn: LayerNorm::new(store, "vt.cross.ln_ffn", d),
                ffn: FeedForward::new(store, "vt.cross.ffn", rng, d, cfg.d_ff()),
            }),
            AggregationManner::Sum => Fusion::Sum(Linear::from_weight(store, "vt.sum", Mat::eye(d))),
            AggregationManner::Concat => {
                let mut w = Mat::zeros((2 * d, d));
                w.slice_mut(s![..d, ..]).assign(&Mat::eye(d));
                w.slice_mut(s![d.., ..])
                    .assign(&nn::normal(rng, d, d, 0.1 / (d as f64).sqrt()));
                Fusion::Concat(Linear::from_weight(store, "vt.concat", w))
            }
        };
        VtAggregation {
            manner: cfg.manner,
            text_block,
            fusion,
        }
    }

    pub fn text_self_attention(&self, ctx: &Ctx, s: Var, t: usize) -> (Var, Var) {
        let (out, w) = temporal_attention(ctx, std::slice::from_ref(&self.text_block), s, t);
        (out, w[0])
    }

    /// Fuses visual role features `f_v` with processed text features.
    pub fn aggregate(&self, ctx: &Ctx, f_v: Var, text: Var) -> (Var, Option<Var>) {
        let g = ctx.g;
        match &self.fusion {
            Fusion::Cross(c) => {
                let q = c.ln_query.forward(g, f_v);
                let m = c.ln_memory.forward(g, text);
                let (a, w) = c.att.forward(ctx, q, m, ROLES, ROLES);
                let x = g.add(f_v, ctx.dropout(a));
                let normed = g.group_norm(x, ROLES, nn::LN_EPS);
                let x = g.add_row(g.mul_row(normed, g.param(c.norm_gain)), g.param(c.norm_bias));
                let f = c.ffn.forward(ctx, c.ln_ffn.forward(g, x));
                (g.add(x, ctx.dropout(f)), Some(w))
            }
            Fusion::Sum(p) => (p.forward(g, g.add(f_v, text)), None),
            Fusion::Concat(p) => (p.forward(g, g.concat_cols(&[f_v, text])), None),
        }
    }

    /// Text self-attention followed by aggregation; `t` frames per pair.
    pub fn forward(&self, ctx: &Ctx, f_v: Var, s: Var, t: usize) -> Aggregated {
        let (text, tw) = self.text_self_attention(ctx, s, t);
        let (fused, cw) = self.aggregate(ctx, f_v, text);
        Aggregated {
            fused,
            text,
            cross_attention: cw,
            text_attention: vec![tw],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::encoders::SyntheticProvider;
    use rand::SeedableRng;

    fn cfg(manner: AggregationManner) -> ModelConfig {
        ModelConfig {
            d: 16,
            d_token: 16,
            n_heads: 4,
            manner,
            ..ModelConfig::default()
        }
    }

    fn random_roles(seed: u64, t: usize, d: usize) -> Mat {
        nn::normal(&mut ChaCha8Rng::seed_from_u64(seed), t * ROLES, d, 1.0)
    }

    #[test]
    fn role_text_from_captions() {
        let p = SyntheticProvider::new(1, 16, 16);
        let cap = |s: &str| Some(s.to_string());
        let frames: Vec<[Option<String>; 4]> = (0..30)
            .map(|i| {
                if i == 0 {
                    [cap("a dog"), cap("a dog"), cap("a dog"), cap("a dog")]
                } else {
                    [cap("a dog"), cap("a cat"), cap("a dog and a cat"), cap("a room")]
                }
            })
            .collect();
        let s = build_role_text(&p, &frames).unwrap();
        assert_eq!(s.shape(), (30, 4, 16));
        for k in 1..4 {
            assert_eq!(s.get(0, Role::Subject), s.get(0, Role::ALL[k]));
        }
        for row in s.as_mat().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let mut bad = frames.clone();
        bad[3][2] = None;
        let err = build_role_text(&p, &bad).unwrap_err().to_string();
        assert!(err.contains("frame 3") && err.contains("union"), "{err}");
    }

    #[test]
    fn text_attention_is_frame_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let vt = VtAggregation::new(&mut store, &mut rng, &cfg(AggregationManner::Sum));
        let x = RoleTensor::from_mat(random_roles(3, 5, 16)).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let run = |x: &RoleTensor| {
            let g = Graph::with_params(&store);
            let ctx = Ctx::eval(&g);
            let (y, _) = vt.text_self_attention(&ctx, g.leaf(x.as_mat().clone()), 5);
            let out = g.value(y).clone();
            RoleTensor::from_mat(out).unwrap()
        };
        let a = run(&x).permute_frames(&perm);
        let b = run(&x.permute_frames(&perm));
        for (u, v) in a.as_mat().iter().zip(b.as_mat().iter()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn single_frame_has_no_cross_time_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let vt = VtAggregation::new(&mut store, &mut rng, &cfg(AggregationManner::Sum));
        let two = random_roles(5, 2, 16);
        let g = Graph::with_params(&store);
        let ctx = Ctx::eval(&g);
        // two pairs of one frame each: rows of one pair never affect the other
        let (both, _) = vt.text_self_attention(&ctx, g.leaf(two.clone()), 1);
        let (first, _) = vt.text_self_attention(&ctx, g.leaf(two.slice(s![..4, ..]).to_owned()), 1);
        assert_eq!(g.value(both).slice(s![..4, ..]), *g.value(first));
        assert!(g.value(both).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sum_with_zero_text_is_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let vt = VtAggregation::new(&mut store, &mut rng, &cfg(AggregationManner::Sum));
        let fv = random_roles(7, 3, 16);
        let g = Graph::with_params(&store);
        let ctx = Ctx::eval(&g);
        let (y, _) = vt.aggregate(&ctx, g.leaf(fv.clone()), g.leaf(Mat::zeros((12, 16))));
        assert_eq!(*g.value(y), fv);
    }

    #[test]
    fn identical_text_tokens_give_uniform_cross_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let vt = VtAggregation::new(&mut store, &mut rng, &cfg(AggregationManner::CrossAttention));
        let fv = random_roles(9, 3, 16);
        let row = random_roles(10, 1, 16).row(0).to_owned();
        let text = Mat::from_shape_fn((12, 16), |(_, c)| row[c]);
        let g = Graph::with_params(&store);
        let ctx = Ctx::eval(&g);
        let (y, w) = vt.aggregate(&ctx, g.leaf(fv), g.leaf(text));
        assert_eq!(g.shape(y), (12, 16));
        for m in g.attention_weights(w.unwrap()).unwrap() {
            for v in m.iter() {
                assert!((v - 0.25).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aggregation_gradient_matches_finite_differences() {
        for manner in AggregationManner::ALL.iter().copied() {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            let vt = VtAggregation::new(&mut store, &mut rng, &cfg(manner));
            let fv = random_roles(12, 2, 16);
            let s = random_roles(13, 2, 16);
            let u = random_roles(14, 2, 16);
            let f = |fv: &Mat| {
                let g = Graph::with_params(&store);
                let ctx = Ctx::eval(&g);
                let x = g.leaf(fv.clone());
                let out = vt.forward(&ctx, x, g.leaf(s.clone()), 2);
                let r = g.sum(g.mul(out.fused, g.leaf(u.clone())));
                let grad = g.backward(r).wrt(x).unwrap().clone();
                (g.scalar(r), grad)
            };
            let (_, analytic) = f(&fv);
            let h = 1e-5;
            for idx in (0..fv.len()).step_by(7) {
                let mut p = fv.clone();
                let mut m = fv.clone();
                p.as_slice_mut().unwrap()[idx] += h;
                m.as_slice_mut().unwrap()[idx] -= h;
                let numeric = (f(&p).0 - f(&m).0) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()) + 1e-8,
                    "{manner}: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn manners_differ_and_keep_shape() {
        let fv = random_roles(15, 3, 16);
        let s = random_roles(16, 3, 16);
        let outs: Vec<Mat> = AggregationManner::ALL
            .iter()
            .map(|&m| {
                let mut rng = ChaCha8Rng::seed_from_u64(17);
                let mut store = ParamStore::new();
                let vt = VtAggregation::new(&mut store, &mut rng, &cfg(m));
                let g = Graph::with_params(&store);
                let ctx = Ctx::eval(&g);
                let out = vt.forward(&ctx, g.leaf(fv.clone()), g.leaf(s.clone()), 3);
                let v = g.value(out.fused).clone();
                v
            })
            .collect();
        for o in &outs {
            assert_eq!(o.dim(), (12, 16));
        }
        assert_ne!(outs[0], outs[1]);
        assert_ne!(outs[0], outs[2]);
        assert_ne!(outs[1], outs[2]);
    }
}
