//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every tensor in the model is a 2-D row-major matrix. Higher-rank layouts
//! such as the `[T, 4, d]` role tensor are stored as `[T * 4, d]` with a
//! documented row order, and the operations that need structure (grouped
//! attention, per-frame normalization, pooling) take the group size as an
//! argument.
//!
//! A [`Graph`] records operations as they are evaluated. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns [`Grads`] for every node, including the learnable parameters bound
//! from a [`ParamStore`].

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
}

/// Named learnable tensors. Only values in a store receive gradient updates.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.name(*id).starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log { x: Var, eps: f64 },
    LayerNorm { x: Var, xhat: Mat, inv_std: Vec<f64> },
    GroupNorm { x: Var, group: usize, xhat: Mat, inv_std: Vec<f64> },
    BatchNorm { x: Var, xhat: Mat, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    LogSoftmaxRows { x: Var, probs: Mat },
    Attention(Box<AttentionTape>),
    GatherRows { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SumAll(Var),
    RowSum(Var),
    GroupMeanRows { x: Var, group: usize },
    Select { x: Var, at: Vec<(usize, usize)> },
}

struct AttentionTape {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    group_q: usize,
    group_k: usize,
    /// Softmax weights, indexed `[group * heads + head]`, each `[group_q, group_k]`.
    weights: Vec<Mat>,
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recording tape. Values are computed eagerly as operations are added.
pub struct Graph<'p> {
    nodes: RefCell<Vec<Node>>,
    store: Option<&'p ParamStore>,
    bound: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            store: None,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    /// Constant input. Gradients with respect to it are still reported.
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), value))
    }

    /// Binds a learnable tensor. Repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&*self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "add shape mismatch");
            &*x + &*y
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "sub shape mismatch");
            &*x - &*y
        };
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "mul shape mismatch");
            &*x * &*y
        };
        self.push(value, Op::Mul(a, b))
    }

    /// `a[n, m] + row[1, m]` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (x, r) = (self.value(a), self.value(row));
            assert_eq!(r.dim(), (1, x.ncols()), "add_row expects a [1, m] row");
            &*x + &*r
        };
        self.push(value, Op::AddRow(a, row))
    }

    /// `a[n, m] * row[1, m]` broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (x, r) = (self.value(a), self.value(row));
            assert_eq!(r.dim(), (1, x.ncols()), "mul_row expects a [1, m] row");
            &*x * &*r
        };
        self.push(value, Op::MulRow(a, row))
    }

    /// `a * s` where `s` is a `[1, 1]` node.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let value = {
            let sv = self.value(s);
            assert_eq!(sv.dim(), (1, 1), "mul_scalar expects a [1, 1] scalar");
            &*self.value(a) * sv[[0, 0]]
        };
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = &*self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let value = &*self.value(a) + c;
        self.push(value, Op::AddConst(a))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = {
            let x = self.value(a);
            assert_eq!(x.len(), rows * cols, "reshape size mismatch");
            let flat: Vec<f64> = x.iter().copied().collect();
            Mat::from_shape_vec((rows, cols), flat).expect("reshape")
        };
        self.push(value, Op::Reshape(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(eps).ln());
        self.push(value, Op::Log { x: a, eps })
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (xhat, inv_std) = {
            let x = self.value(a);
            let mut xhat = x.clone();
            let mut inv_std = Vec::with_capacity(x.nrows());
            for mut row in xhat.rows_mut() {
                let n = row.len() as f64;
                let mean = row.sum() / n;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|v| v * v).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|v| v * is);
                inv_std.push(is);
            }
            (xhat, inv_std)
        };
        self.push(xhat.clone(), Op::LayerNorm { x: a, xhat, inv_std })
    }

    /// Normalization over contiguous blocks of `group` rows: each column is
    /// centered across the rows of its block, then the whole block is scaled by
    /// the inverse of its root-mean-square.
    pub fn group_norm(&self, a: Var, group: usize, eps: f64) -> Var {
        let (xhat, inv_std) = {
            let x = self.value(a);
            assert!(group > 0 && x.nrows() % group == 0, "group_norm: bad group");
            let mut xhat = x.clone();
            let mut inv_std = Vec::with_capacity(x.nrows() / group);
            for gi in 0..x.nrows() / group {
                let mut block = xhat.slice_mut(s![gi * group..(gi + 1) * group, ..]);
                let mean = block.mean_axis(Axis(0)).expect("non-empty block");
                for mut row in block.rows_mut() {
                    row -= &mean;
                }
                let var = block.iter().map(|v| v * v).sum::<f64>() / block.len() as f64;
                let is = 1.0 / (var + eps).sqrt();
                block.mapv_inplace(|v| v * is);
                inv_std.push(is);
            }
            (xhat, inv_std)
        };
        self.push(
            xhat.clone(),
            Op::GroupNorm {
                x: a,
                group,
                xhat,
                inv_std,
            },
        )
    }

    /// Column-wise normalization with statistics taken over the rows (batch).
    pub fn batch_norm(&self, a: Var, eps: f64) -> Var {
        let (xhat, inv_std) = {
            let x = self.value(a);
            let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = &*x - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("batch");
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = centered;
            for mut row in xhat.rows_mut() {
                for (v, is) in row.iter_mut().zip(&inv_std) {
                    *v *= is;
                }
            }
            (xhat, inv_std)
        };
        self.push(xhat.clone(), Op::BatchNorm { x: a, xhat, inv_std })
    }

    /// Scales every row to unit L2 norm. Rows with zero norm are left at zero.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let (value, norms) = {
            let x = self.value(a);
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.nrows());
            for mut row in out.rows_mut() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.mapv_inplace(|v| v / n);
                }
                norms.push(n);
            }
            (out, norms)
        };
        self.push(value, Op::NormalizeRows { x: a, norms })
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let (value, probs) = {
            let x = self.value(a);
            let mut out = x.clone();
            let mut probs = x.clone();
            for (mut row, mut prow) in out.rows_mut().into_iter().zip(probs.rows_mut()) {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.mapv_inplace(|v| v - lse);
                prow.assign(&row.mapv(f64::exp));
            }
            (out, probs)
        };
        self.push(value, Op::LogSoftmaxRows { x: a, probs })
    }

    /// Multi-head scaled dot-product attention restricted to blocks.
    ///
    /// Query rows are split into contiguous blocks of `group_q` rows and key /
    /// value rows into blocks of `group_k`; block `i` of the queries attends
    /// only to block `i` of the keys. Columns are split evenly into `heads`.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group_q: usize,
        group_k: usize,
    ) -> Var {
        let (out, weights) = {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            let d = qv.ncols();
            assert!(heads > 0 && d % heads == 0, "model dim not divisible by heads");
            assert_eq!(kv.ncols(), d);
            assert_eq!(vv.dim(), kv.dim());
            assert!(qv.nrows() % group_q == 0 && kv.nrows() % group_k == 0);
            let groups = qv.nrows() / group_q;
            assert_eq!(groups, kv.nrows() / group_k, "attention group count mismatch");
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = Mat::zeros((qv.nrows(), d));
            let mut weights = Vec::with_capacity(groups * heads);
            for gi in 0..groups {
                let (qr, kr) = (gi * group_q..(gi + 1) * group_q, gi * group_k..(gi + 1) * group_k);
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qs = qv.slice(s![qr.clone(), cols.clone()]);
                    let ks = kv.slice(s![kr.clone(), cols.clone()]);
                    let vs = vv.slice(s![kr.clone(), cols.clone()]);
                    let mut a = qs.dot(&ks.t()) * scale;
                    softmax_rows_inplace(&mut a);
                    out.slice_mut(s![qr.clone(), cols]).assign(&a.dot(&vs));
                    weights.push(a);
                }
            }
            (out, weights)
        };
        self.push(
            out,
            Op::Attention(Box::new(AttentionTape {
                q,
                k,
                v,
                heads,
                group_q,
                group_k,
                weights,
            })),
        )
    }

    /// Softmax weights recorded by an [`Graph::attention`] node, one
    /// `[group_q, group_k]` matrix per (block, head), block-major.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Mat>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention(t) => Some(t.weights.clone()),
            _ => None,
        }
    }

    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), index);
        self.push(
            value,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<'_, Mat>> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<'_, Mat>> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch")
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x: a, start })
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows { x: a, start })
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[n, m] -> [n, 1]`.
    pub fn row_sum(&self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a))
    }

    /// Mean over contiguous blocks of `group` rows: `[n, m] -> [n / group, m]`.
    pub fn group_mean_rows(&self, a: Var, group: usize) -> Var {
        let value = {
            let x = self.value(a);
            assert!(group > 0 && x.nrows() % group == 0, "group_mean_rows: bad group");
            let mut out = Mat::zeros((x.nrows() / group, x.ncols()));
            for (gi, mut row) in out.rows_mut().into_iter().enumerate() {
                let block = x.slice(s![gi * group..(gi + 1) * group, ..]);
                row.assign(&block.mean_axis(Axis(0)).expect("block"));
            }
            out
        };
        self.push(value, Op::GroupMeanRows { x: a, group })
    }

    /// Picks individual entries into a `[k, 1]` column.
    pub fn select(&self, a: Var, at: &[(usize, usize)]) -> Var {
        let value = {
            let x = self.value(a);
            Mat::from_shape_fn((at.len(), 1), |(i, _)| x[at[i]])
        };
        self.push(
            value,
            Op::Select {
                x: a,
                at: at.to_vec(),
            },
        )
    }

    /// Reverse pass from a `[1, 1]` output.
    pub fn backward(&self, output: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[output.0] = Some(Mat::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut acc = |v: Var, g: Mat| accumulate(&mut grads, v, g);
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    acc(*a, gy.dot(&nodes[b.0].value.t()));
                    acc(*b, nodes[a.0].value.t().dot(&gy));
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, -&gy);
                }
                Op::Mul(a, b) => {
                    acc(*a, &gy * &nodes[b.0].value);
                    acc(*b, &gy * &nodes[a.0].value);
                }
                Op::AddRow(a, r) => {
                    acc(*r, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, gy.clone());
                }
                Op::MulRow(a, r) => {
                    let gr = (&gy * &nodes[a.0].value).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*r, gr);
                    acc(*a, &gy * &nodes[r.0].value);
                }
                Op::MulScalar(a, sc) => {
                    let sv = nodes[sc.0].value[[0, 0]];
                    let gs = (&gy * &nodes[a.0].value).sum();
                    acc(*sc, Mat::from_elem((1, 1), gs));
                    acc(*a, &gy * sv);
                }
                Op::Scale(a, c) => acc(*a, &gy * *c),
                Op::AddConst(a) => acc(*a, gy.clone()),
                Op::Transpose(a) => acc(*a, gy.t().to_owned()),
                Op::Reshape(a) => {
                    let dim = nodes[a.0].value.dim();
                    let flat: Vec<f64> = gy.iter().copied().collect();
                    acc(*a, Mat::from_shape_vec(dim, flat).expect("reshape grad"));
                }
                Op::Gelu(a) => {
                    let d = nodes[a.0].value.mapv(gelu_grad);
                    acc(*a, &gy * &d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, &gy * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Log { x, eps } => {
                    let d = nodes[x.0]
                        .value
                        .mapv(|v| if v > *eps { 1.0 / v } else { 0.0 });
                    acc(*x, &gy * &d);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let mut gx = Mat::zeros(xhat.dim());
                    let n = xhat.ncols() as f64;
                    for r in 0..xhat.nrows() {
                        let (g, xh) = (gy.row(r), xhat.row(r));
                        let mg = g.sum() / n;
                        let mgx = g.dot(&xh) / n;
                        let mut out = gx.row_mut(r);
                        for j in 0..xhat.ncols() {
                            out[j] = inv_std[r] * (g[j] - mg - xh[j] * mgx);
                        }
                    }
                    acc(*x, gx);
                }
                Op::GroupNorm {
                    x,
                    group,
                    xhat,
                    inv_std,
                } => {
                    let mut gx = Mat::zeros(xhat.dim());
                    let n = (*group * xhat.ncols()) as f64;
                    for gi in 0..xhat.nrows() / group {
                        let rows = gi * group..(gi + 1) * group;
                        let g = gy.slice(s![rows.clone(), ..]);
                        let xh = xhat.slice(s![rows.clone(), ..]);
                        let mgx = (&g * &xh).sum() / n;
                        let proj = &g - &(&xh * mgx);
                        let col_mean = proj.mean_axis(Axis(0)).expect("block");
                        let out = (&proj - &col_mean) * inv_std[gi];
                        gx.slice_mut(s![rows, ..]).assign(&out);
                    }
                    acc(*x, gx);
                }
                Op::BatchNorm { x, xhat, inv_std } => {
                    let n = xhat.nrows() as f64;
                    let mg = gy.sum_axis(Axis(0)) / n;
                    let mgx = (&gy * xhat).sum_axis(Axis(0)) / n;
                    let mut gx = &gy - &mg;
                    gx -= &(xhat * &mgx);
                    for mut row in gx.rows_mut() {
                        for (v, is) in row.iter_mut().zip(inv_std) {
                            *v *= is;
                        }
                    }
                    acc(*x, gx);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let dot = gy.row(r).dot(&y.row(r));
                        let row = (&gy.row(r) - &(&y.row(r) * dot)) / norms[r];
                        gx.row_mut(r).assign(&row);
                    }
                    acc(*x, gx);
                }
                Op::LogSoftmaxRows { x, probs } => {
                    let sums = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*x, &gy - &(probs * &sums));
                }
                Op::Attention(t) => {
                    let (gq, gk, gv) = attention_backward(
                        t,
                        &gy,
                        &nodes[t.q.0].value,
                        &nodes[t.k.0].value,
                        &nodes[t.v.0].value,
                    );
                    acc(t.q, gq);
                    acc(t.k, gk);
                    acc(t.v, gv);
                }
                Op::GatherRows { x, index } => {
                    let mut gx = Mat::zeros(nodes[x.0].value.dim());
                    for (r, &src) in index.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &gy.row(r);
                    }
                    acc(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = nodes[p.0].value.ncols();
                        acc(*p, gy.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = nodes[p.0].value.nrows();
                        acc(*p, gy.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Mat::zeros(nodes[x.0].value.dim());
                    gx.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    acc(*x, gx);
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Mat::zeros(nodes[x.0].value.dim());
                    gx.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(&gy);
                    acc(*x, gx);
                }
                Op::SumAll(a) => {
                    acc(*a, Mat::from_elem(nodes[a.0].value.dim(), gy[[0, 0]]));
                }
                Op::RowSum(a) => {
                    let dim = nodes[a.0].value.dim();
                    acc(*a, Mat::from_shape_fn(dim, |(r, _)| gy[[r, 0]]));
                }
                Op::GroupMeanRows { x, group } => {
                    let dim = nodes[x.0].value.dim();
                    let inv = 1.0 / *group as f64;
                    acc(*x, Mat::from_shape_fn(dim, |(r, c)| gy[[r / group, c]] * inv));
                }
                Op::Select { x, at } => {
                    let mut gx = Mat::zeros(nodes[x.0].value.dim());
                    for (i, pos) in at.iter().enumerate() {
                        gx[*pos] += gy[[i, 0]];
                    }
                    acc(*x, gx);
                }
            }
            grads[i] = Some(gy);
        }

        let params = self
            .bound
            .borrow()
            .iter()
            .map(|(id, v)| (*id, *v))
            .collect();
        Grads { grads, params }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn attention_backward(t: &AttentionTape, gy: &Mat, q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat, Mat) {
    let d = q.ncols();
    let dh = d / t.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Mat::zeros(q.dim());
    let mut gk = Mat::zeros(k.dim());
    let mut gv = Mat::zeros(v.dim());
    let groups = q.nrows() / t.group_q;
    for gi in 0..groups {
        let qr = gi * t.group_q..(gi + 1) * t.group_q;
        let kr = gi * t.group_k..(gi + 1) * t.group_k;
        for h in 0..t.heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &t.weights[gi * t.heads + h];
            let go = gy.slice(s![qr.clone(), cols.clone()]);
            let qs = q.slice(s![qr.clone(), cols.clone()]);
            let ks = k.slice(s![kr.clone(), cols.clone()]);
            let vs = v.slice(s![kr.clone(), cols.clone()]);
            gv.slice_mut(s![kr.clone(), cols.clone()])
                .assign(&a.t().dot(&go));
            let ga = go.dot(&vs.t());
            let row_dot = (&ga * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let gs = a * &(&ga - &row_dot) * scale;
            gq.slice_mut(s![qr.clone(), cols.clone()])
                .assign(&gs.dot(&ks));
            gk.slice_mut(s![kr.clone(), cols]).assign(&gs.t().dot(&qs));
        }
    }
    (gq, gk, gv)
}

fn softmax_rows_inplace(a: &mut Mat) {
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    /// Gradient with respect to any node; `None` if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(f)/d(input) for a function of a single leaf.
    fn check<F: Fn(&Graph, Var) -> Var>(x0: Mat, f: F) {
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = f(&g, x);
        let analytic = g.backward(y).wrt(x).cloned().unwrap_or(Mat::zeros(x0.dim()));
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let g = Graph::new();
                let x = g.leaf(xp);
                let y = f(&g, x);
                g.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()) + 1e-8,
                "entry {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn readout(g: &Graph, y: Var, w: &Mat) -> Var {
        let w = g.leaf(w.clone());
        g.sum(g.mul(y, w))
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 3, 2);
        let w = random(&mut rng, 4, 2);
        check(random(&mut rng, 4, 3), |g, x| {
            let b = g.leaf(b.clone());
            let y = g.gelu(g.matmul(x, b));
            let y = g.sigmoid(g.add_const(g.scale(y, 1.5), 0.2));
            readout(g, y, &w)
        });
    }

    #[test]
    fn normalization_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 8, 5);
        check(random(&mut rng, 8, 5), |g, x| readout(g, g.layer_norm(x, 1e-5), &w));
        check(random(&mut rng, 8, 5), |g, x| readout(g, g.group_norm(x, 4, 1e-5), &w));
        check(random(&mut rng, 8, 5), |g, x| readout(g, g.batch_norm(x, 1e-5), &w));
        check(random(&mut rng, 8, 5), |g, x| readout(g, g.normalize_rows(x), &w));
        check(random(&mut rng, 8, 5), |g, x| {
            readout(g, g.log_softmax_rows(x), &w)
        });
    }

    #[test]
    fn attention_grads_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k0, v0) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4));
        let q0 = random(&mut rng, 4, 4);
        let w = random(&mut rng, 4, 4);
        check(q0.clone(), |g, q| {
            let (k, v) = (g.leaf(k0.clone()), g.leaf(v0.clone()));
            readout(g, g.attention(q, k, v, 2, 2, 3), &w)
        });
        check(k0.clone(), |g, k| {
            let (q, v) = (g.leaf(q0.clone()), g.leaf(v0.clone()));
            readout(g, g.attention(q, k, v, 2, 2, 3), &w)
        });
        check(v0.clone(), |g, v| {
            let (q, k) = (g.leaf(q0.clone()), g.leaf(k0.clone()));
            readout(g, g.attention(q, k, v, 2, 2, 3), &w)
        });
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 3);
        check(random(&mut rng, 6, 2), |g, x| {
            let r = g.reshape(x, 3, 4);
            let gathered = g.gather_rows(r, &[2, 0, 0]);
            let y = g.add(gathered, g.slice_rows(r, 0, 3));
            readout(g, y, &w)
        });
        check(random(&mut rng, 4, 3), |g, x| {
            let r = g.leaf(row.clone());
            let a = g.mul_row(x, r);
            let b = g.add_row(g.transpose(g.transpose(x)), r);
            let c = g.concat_cols(&[a, b]);
            let m = g.group_mean_rows(c, 2);
            let t = g.slice_cols(m, 1, 4);
            let s = g.select(g.row_sum(t), &[(0, 0), (1, 0), (1, 0)]);
            g.sum(g.log_clamped(g.add_const(g.mul(s, s), 1.0), 1e-7))
        });
        check(random(&mut rng, 1, 1), |g, s| {
            let a = g.leaf(row.clone());
            let y = g.mul_scalar(a, s);
            let z = g.concat_rows(&[y, a]);
            g.sum(g.mul(z, z))
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::new();
        let q = g.leaf(random(&mut rng, 8, 8));
        let k = g.leaf(random(&mut rng, 8, 8));
        let out = g.attention(q, k, k, 4, 4, 4);
        for a in g.attention_weights(out).unwrap() {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_binding_is_cached() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[2.0]]);
        let g = Graph::with_params(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.param(id).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn log_clamp_blocks_gradient() {
        let g = Graph::new();
        let x = g.leaf(array![[0.0, 0.5]]);
        let y = g.sum(g.log_clamped(x, 1e-7));
        let gx = g.backward(y).wrt(x).unwrap().clone();
        assert_eq!(gx[[0, 0]], 0.0);
        assert!((gx[[0, 1]] - 2.0).abs() < 1e-12);
    }
}
