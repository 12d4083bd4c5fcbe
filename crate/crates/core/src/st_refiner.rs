//! Spatiotemporal refiner: per-frame attention across the four role tokens,
//! then per-role attention across time.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, TransformerBlock};
use crate::vt_aggregation::{temporal_attention, Role, RoleTensor, ROLES};

/// Fixed sinusoidal code for each role index, `[4, d]`.
pub fn role_positions(d: usize) -> Mat {
    Mat::from_shape_fn((ROLES, d), |(k, j)| {
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = k as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    /// Learnable role embeddings `R_k`, `[4, d]`.
    pub role: ParamId,
    /// Fixed positional code `P_k`, `[4, d]`.
    pub position: Mat,
    /// Learnable time embeddings `T_t`, `[t_max, d]`.
    pub time: ParamId,
}

impl EmbeddingTables {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, t_max: usize) -> Self {
        EmbeddingTables {
            role: store.add("strm.role", nn::normal(rng, ROLES, d, 0.02)),
            position: role_positions(d),
            time: store.add("strm.time", nn::normal(rng, t_max, d, 0.02)),
        }
    }
}

/// Graph nodes produced by the refiner for a batch of pairs.
pub struct RefinedFeatures {
    /// Output of the spatial transformer, `[P * T * 4, d]`.
    pub spatial: Var,
    /// Output of the temporal transformer, `[P * T * 4, d]`.
    pub temporal: Var,
    /// Role sum of `temporal` per frame, `[P * T, d]`.
    pub joint: Var,
    pub spatial_attention: Vec<Var>,
    pub temporal_attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SpatioTemporalRefiner {
    pub tables: EmbeddingTables,
    pub spatial: Vec<TransformerBlock>,
    pub temporal: Vec<TransformerBlock>,
    pub t_max: usize,
}

impl SpatioTemporalRefiner {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let tables = EmbeddingTables::new(store, rng, cfg.d, cfg.t_max);
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String| {
            TransformerBlock::new(store, &name, rng, cfg.d, cfg.n_heads, cfg.d_ff())
        };
        let spatial = (0..cfg.n_layers)
            .map(|i| block(store, rng, format!("strm.spatial{i}")))
            .collect();
        let temporal = (0..cfg.n_layers)
            .map(|i| block(store, rng, format!("strm.temporal{i}")))
            .collect();
        SpatioTemporalRefiner {
            tables,
            spatial,
            temporal,
            t_max: cfg.t_max,
        }
    }

    /// Adds role, position and motion terms to every token, then attends
    /// across the four roles of each frame. `motion` is `[P * T, d]`.
    pub fn spatial_refine(&self, ctx: &Ctx, f_vt: Var, motion: Var) -> Result<(Var, Vec<Var>)> {
        let g = ctx.g;
        let (rows, d) = g.shape(f_vt);
        let (mrows, md) = g.shape(motion);
        if rows % ROLES != 0 || mrows * ROLES != rows || md != d {
            return Err(Error::Shape(format!(
                "role features [{rows}, {d}] do not match motion [{mrows}, {md}]"
            )));
        }
        let role_rows: Vec<usize> = (0..rows).map(|r| r % ROLES).collect();
        let frame_rows: Vec<usize> = (0..rows).map(|r| r / ROLES).collect();
        let codes = g.add(g.param(self.tables.role), g.leaf(self.tables.position.clone()));
        let mut x = g.add(f_vt, g.gather_rows(codes, &role_rows));
        x = g.add(x, g.gather_rows(motion, &frame_rows));
        let mut weights = Vec::with_capacity(self.spatial.len());
        for block in &self.spatial {
            let (y, w) = block.forward(ctx, x, ROLES);
            x = y;
            weights.push(w);
        }
        Ok((x, weights))
    }

    /// Adds time embeddings and attends along time, separately per role.
    pub fn temporal_refine(&self, ctx: &Ctx, v: Var, t: usize) -> Result<(Var, Var, Vec<Var>)> {
        let g = ctx.g;
        if t == 0 || t > self.t_max {
            return Err(Error::Argument(format!("{t} frames exceed t_max = {}", self.t_max)));
        }
        let rows = g.shape(v).0;
        if rows % (t * ROLES) != 0 {
            return Err(Error::Shape(format!("{rows} rows are not whole [{t}, 4] blocks")));
        }
        let time_rows: Vec<usize> = (0..rows).map(|r| (r / ROLES) % t).collect();
        let x = g.add(v, g.gather_rows(g.param(self.tables.time), &time_rows));
        let (out, weights) = temporal_attention(ctx, &self.temporal, x, t);
        let joint = g.scale(g.group_mean_rows(out, ROLES), ROLES as f64);
        Ok((out, joint, weights))
    }

    pub fn forward(&self, ctx: &Ctx, f_vt: Var, motion: Var, t: usize) -> Result<RefinedFeatures> {
        let (spatial, spatial_attention) = self.spatial_refine(ctx, f_vt, motion)?;
        let (temporal, joint, temporal_attention) = self.temporal_refine(ctx, spatial, t)?;
        Ok(RefinedFeatures {
            spatial,
            temporal,
            joint,
            spatial_attention,
            temporal_attention,
        })
    }
}

/// Per-pair, per-role time averages of `[P * T * 4, d]` tokens, as
/// `[P * 4, d]` rows in pair-major, role-minor order.
pub fn pool_roles(g: &Graph, v: Var, t: usize) -> Var {
    let pairs = g.shape(v).0 / (t * ROLES);
    let order = nn::role_major_index(pairs, t, ROLES);
    g.group_mean_rows(g.gather_rows(v, &order), t)
}

/// Mean of one role's tokens over time.
pub fn time_avg_pool(v: &RoleTensor, role: Role) -> Array1<f64> {
    let t = v.frames();
    let mut acc = Array1::zeros(v.dim());
    for i in 0..t {
        acc += &v.get(i, role);
    }
    acc / t as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand::SeedableRng;

    fn setup(seed: u64) -> (ParamStore, SpatioTemporalRefiner) {
        let cfg = ModelConfig {
            d: 16,
            d_token: 16,
            n_heads: 4,
            t_max: 6,
            frames: 4,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = SpatioTemporalRefiner::new(&mut store, &mut rng, &cfg);
        (store, r)
    }

    fn random(seed: u64, r: usize, c: usize) -> Mat {
        nn::normal(&mut ChaCha8Rng::seed_from_u64(seed), r, c, 1.0)
    }

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn degenerate_blocks_add_codes_and_motion() {
        let (mut store, r) = setup(1);
        for b in &r.spatial {
            for id in b.output_params() {
                store.get_mut(id).fill(0.0);
            }
        }
        let fv = random(2, 8, 16);
        let m = random(3, 2, 16);
        let g = Graph::with_params(&store);
        let ctx = Ctx::eval(&g);
        let (y, _) = r.spatial_refine(&ctx, g.leaf(fv.clone()), g.leaf(m.clone())).unwrap();
        let codes = store.get(r.tables.role) + &r.tables.position;
        let mut expect = fv.clone();
        for row in 0..8 {
            let add = &codes.row(row % 4) + &m.row(row / 4);
            expect.row_mut(row).zip_mut_with(&add, |a, b| *a += b);
        }
        assert!(close(&g.value(y), &expect, 1e-12));
    }

    #[test]
    fn swapping_role_embeddings_changes_subject_output() {
        let (mut store, r) = setup(4);
        let fv = random(5, 8, 16);
        let m = random(6, 2, 16);
        let run = |store: &ParamStore| {
            let g = Graph::with_params(store);
            let ctx = Ctx::eval(&g);
            let (y, _) = r.spatial_refine(&ctx, g.leaf(fv.clone()), g.leaf(m.clone())).unwrap();
            let v = g.value(y).row(0).to_owned();
            v
        };
        let before = run(&store);
        let table = store.get_mut(r.tables.role);
        let (s0, o1) = (table.row(0).to_owned(), table.row(1).to_owned());
        table.row_mut(0).assign(&o1);
        table.row_mut(1).assign(&s0);
        assert_ne!(before, run(&store));
    }

    #[test]
    fn pairs_are_processed_independently() {
        let (store, r) = setup(7);
        let fv = random(8, 3 * 3 * 4, 16);
        let m = random(9, 3 * 3, 16);
        let run = |fv: &Mat, m: &Mat| {
            let g = Graph::with_params(&store);
            let ctx = Ctx::eval(&g);
            let out = r.forward(&ctx, g.leaf(fv.clone()), g.leaf(m.clone()), 3).unwrap();
            let v = g.value(out.temporal).clone();
            v
        };
        let base = run(&fv, &m);
        let perm = [2, 0, 1];
        let mut pf = fv.clone();
        let mut pm = m.clone();
        for (i, &src) in perm.iter().enumerate() {
            pf.slice_mut(s![i * 12..(i + 1) * 12, ..]).assign(&fv.slice(s![src * 12..(src + 1) * 12, ..]));
            pm.slice_mut(s![i * 3..(i + 1) * 3, ..]).assign(&m.slice(s![src * 3..(src + 1) * 3, ..]));
        }
        let permuted = run(&pf, &pm);
        for (i, &src) in perm.iter().enumerate() {
            let a = permuted.slice(s![i * 12..(i + 1) * 12, ..]).to_owned();
            let b = base.slice(s![src * 12..(src + 1) * 12, ..]).to_owned();
            assert!(close(&a, &b, 1e-12));
        }
    }

    #[test]
    fn temporal_equivariance_and_sensitivity() {
        let (mut store, r) = setup(10);
        let v = RoleTensor::from_mat(random(11, 4 * 4, 16)).unwrap();
        let perm = [1, 0, 3, 2];
        let run = |store: &ParamStore, v: &RoleTensor| {
            let g = Graph::with_params(store);
            let ctx = Ctx::eval(&g);
            let (y, _, _) = r.temporal_refine(&ctx, g.leaf(v.as_mat().clone()), 4).unwrap();
            let out = g.value(y).clone();
            RoleTensor::from_mat(out).unwrap()
        };
        let with_time_a = run(&store, &v).permute_frames(&perm);
        let with_time_b = run(&store, &v.permute_frames(&perm));
        assert!(!close(with_time_a.as_mat(), with_time_b.as_mat(), 1e-6));

        store.get_mut(r.tables.time).fill(0.0);
        let a = run(&store, &v).permute_frames(&perm);
        let b = run(&store, &v.permute_frames(&perm));
        assert!(close(a.as_mat(), b.as_mat(), 1e-6));
    }

    #[test]
    fn too_many_frames_is_an_error() {
        let (store, r) = setup(12);
        let g = Graph::with_params(&store);
        let ctx = Ctx::eval(&g);
        let x = g.leaf(random(13, 7 * 4, 16));
        assert!(r.temporal_refine(&ctx, x, 7).is_err());
        let one = g.leaf(random(14, 4, 16));
        let (y, joint, _) = r.temporal_refine(&ctx, one, 1).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        assert_eq!(g.shape(joint), (1, 16));
    }

    #[test]
    fn joint_is_role_sum() {
        let (store, r) = setup(15);
        let g = Graph::with_params(&store);
        let ctx = Ctx::eval(&g);
        let (y, joint, _) = r.temporal_refine(&ctx, g.leaf(random(16, 12, 16)), 3).unwrap();
        let y = g.value(y).clone();
        for t in 0..3 {
            let sum = y.slice(s![t * 4..(t + 1) * 4, ..]).sum_axis(ndarray::Axis(0));
            assert!(close(&sum.insert_axis(ndarray::Axis(0)), &g.value(joint).slice(s![t..t + 1, ..]).to_owned(), 1e-12));
        }
    }

    #[test]
    fn pooling() {
        let mut v = RoleTensor::zeros(2, 3);
        v.set(0, Role::Object, array![1.0, -2.0, 3.0].view());
        v.set(1, Role::Object, array![-1.0, 2.0, -3.0].view());
        assert_eq!(time_avg_pool(&v, Role::Object), array![0.0, 0.0, 0.0]);
        let c = RoleTensor::from_mat(Mat::from_shape_fn((12, 2), |(r, c)| (r % 4 + c) as f64)).unwrap();
        assert_eq!(time_avg_pool(&c, Role::Union), array![2.0, 3.0]);

        let x = RoleTensor::from_mat(random(17, 16, 5)).unwrap();
        let g = Graph::new();
        let pooled = g.value(pool_roles(&g, g.leaf(x.as_mat().clone()), 4)).clone();
        for role in Role::ALL {
            let mut brute = Array1::<f64>::zeros(5);
            for t in 0..4 {
                for j in 0..5 {
                    brute[j] += x.get(t, role)[j];
                }
            }
            brute /= 4.0;
            let fast = time_avg_pool(&x, role);
            for j in 0..5 {
                assert!((brute[j] - fast[j]).abs() < 1e-12);
                assert!((brute[j] - pooled[[role.index(), j]]).abs() < 1e-12);
            }
        }
    }
}
