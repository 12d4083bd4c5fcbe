//! Layers built on the autograd tape: linear maps, affine layer norm,
//! multi-head attention, feed-forward and pre-norm transformer blocks.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the tape plus train/eval mode and the dropout RNG.
pub struct Ctx<'g, 'p> {
    pub g: &'g Graph<'p>,
    pub train: bool,
    pub dropout: f64,
    rng: Option<RefCell<&'g mut ChaCha8Rng>>,
}

impl<'g, 'p> Ctx<'g, 'p> {
    /// Evaluation mode: dropout off, normalization uses running statistics.
    pub fn eval(g: &'g Graph<'p>) -> Self {
        Ctx {
            g,
            train: false,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(g: &'g Graph<'p>, dropout: f64, rng: &'g mut ChaCha8Rng) -> Self {
        Ctx {
            g,
            train: true,
            dropout,
            rng: Some(RefCell::new(rng)),
        }
    }

    /// Inverted dropout; the identity outside training.
    pub fn dropout(&self, x: Var) -> Var {
        if !self.train || self.dropout == 0.0 {
            return x;
        }
        let rng = self.rng.as_ref().expect("training context has an rng");
        let mut rng = rng.borrow_mut();
        let keep = 1.0 - self.dropout;
        let (r, c) = self.g.shape(x);
        let mask = Mat::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.g.mul(x, self.g.leaf(mask))
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    use rand_distr::{Distribution, StandardNormal};
    Mat::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self::from_weight(store, name, fan_in_uniform(rng, d_in, d_out))
    }

    pub fn from_weight(store: &mut ParamStore, name: &str, w: Mat) -> Self {
        let d_out = w.ncols();
        Linear {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Mat::zeros((1, d_out))),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.add_row(g.matmul(x, g.param(self.w)), g.param(self.b))
    }
}

/// Row-wise layer normalization with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, d))),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, d))),
        }
    }

    pub fn affine(&self, g: &Graph, normalized: Var) -> Var {
        g.add_row(g.mul_row(normalized, g.param(self.gain)), g.param(self.bias))
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        self.affine(g, g.layer_norm(x, LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            q: Linear::new(store, &format!("{name}.q"), rng, d, d),
            k: Linear::new(store, &format!("{name}.k"), rng, d, d),
            v: Linear::new(store, &format!("{name}.v"), rng, d, d),
            out: Linear::new(store, &format!("{name}.out"), rng, d, d),
        }
    }

    /// Returns the projected output and the raw attention node (for
    /// inspecting weights).
    pub fn forward(&self, ctx: &Ctx, query: Var, memory: Var, group_q: usize, group_k: usize) -> (Var, Var) {
        let g = ctx.g;
        let att = g.attention(
            self.q.forward(g, query),
            self.k.forward(g, memory),
            self.v.forward(g, memory),
            self.heads,
            group_q,
            group_k,
        );
        (self.out.forward(g, att), att)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), rng, d, d_ff),
            down: Linear::new(store, &format!("{name}.down"), rng, d_ff, d),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let h = ctx.dropout(ctx.g.gelu(self.up.forward(ctx.g, x)));
        self.down.forward(ctx.g, h)
    }
}

/// Pre-norm self-attention block over contiguous row groups:
/// `x + MHA(LN x)`, then `x + FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_att: LayerNorm,
    pub att: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        TransformerBlock {
            ln_att: LayerNorm::new(store, &format!("{name}.ln_att"), d),
            att: MultiHeadAttention::new(store, &format!("{name}.att"), rng, d, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), rng, d, d_ff),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, group: usize) -> (Var, Var) {
        let g = ctx.g;
        let h = self.ln_att.forward(g, x);
        let (a, weights) = self.att.forward(ctx, h, h, group, group);
        let x = g.add(x, ctx.dropout(a));
        let f = self.ffn.forward(ctx, self.ln_ffn.forward(g, x));
        (g.add(x, ctx.dropout(f)), weights)
    }

    /// Parameters whose zeroing turns the block into the identity map.
    pub fn output_params(&self) -> [ParamId; 4] {
        [self.att.out.w, self.att.out.b, self.ffn.down.w, self.ffn.down.b]
    }
}

/// Row permutation that regroups `[P, T, R]`-ordered rows (pair-major, then
/// time, then role) into `[P, R, T]` order, so each role's time series is a
/// contiguous block of `t` rows.
pub fn role_major_index(pairs: usize, t: usize, roles: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(pairs * t * roles);
    for p in 0..pairs {
        for k in 0..roles {
            for ti in 0..t {
                idx.push(p * t * roles + ti * roles + k);
            }
        }
    }
    idx
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
