//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ovvrd::autograd::ParamStore;
use ovvrd::config::{AdapterPlacement, Config, PromptVariant};
use ovvrd::data::{BBox, PredictionSet, RelationInstance, RelationPrediction, Tracklet, VideoAnnotation, VocabularySplit};
use ovvrd::encoders::{EmbeddingProvider, SyntheticProvider};
use ovvrd::evaluation::{Split, Task};
use ovvrd::model::{build_pairs, Model, PairSample};
use ovvrd::nn::Ctx;
use ovvrd::synthetic::{demo_vocabulary, generate_videos, SyntheticOptions};

pub fn small_config(d: usize, frames: usize) -> Config {
    let mut cfg = Config::default();
    cfg.model.d = d;
    cfg.model.d_token = d;
    cfg.model.n_heads = 4;
    cfg.model.frames = frames;
    cfg.model.t_max = frames.max(8);
    cfg.model.dropout = 0.0;
    cfg.model.prompt_variant = PromptVariant::Mixed;
    cfg.model.adapter = AdapterPlacement::Both;
    cfg.train.batch_size = 8;
    cfg
}

pub struct Fixture {
    pub vocab: VocabularySplit,
    pub videos: Vec<VideoAnnotation>,
    pub provider: SyntheticProvider,
}

pub fn fixture(cfg: &Config, n_videos: usize) -> Fixture {
    let vocab = demo_vocabulary();
    let videos = generate_videos(cfg.seed, n_videos, &vocab, &SyntheticOptions::default()).unwrap();
    let provider = SyntheticProvider::new(cfg.seed, cfg.model.d, cfg.model.d_token).planted(&videos);
    Fixture { vocab, videos, provider }
}

impl Fixture {
    pub fn pairs(&self, cfg: &Config) -> Vec<PairSample> {
        self.videos
            .iter()
            .flat_map(|v| build_pairs(&self.provider, v, cfg.model.frames).unwrap())
            .collect()
    }

    pub fn model(&self, cfg: &Config) -> Model {
        Model::new(&cfg.model, cfg.seed, &self.vocab, &self.provider).unwrap()
    }
}

/// Adds Gaussian noise to every learnable tensor so that no group sits at a
/// degenerate initial value (zero adapter gates, identity fusion).
pub fn jitter(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|v| v + n.sample(&mut rng));
    }
}

/// Training-mode total loss with dropout disabled.
pub fn total_loss(model: &Model, provider: &dyn EmbeddingProvider, batch: &[&PairSample], gamma: f64, delta: f64) -> f64 {
    let g = model.graph();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctx = Ctx::train(&g, 0.0, &mut rng);
    let (_, breakdown, _) = model.loss(&ctx, provider, batch, gamma, delta).unwrap();
    breakdown.total
}

pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
    pub tensors: BTreeSet<String>,
    pub worst_rel: f64,
    /// Coordinates whose gradient magnitude exceeds `1e-6`.
    pub significant: usize,
    /// Tensors with no significant coordinate among those sampled.
    pub flat_tensors: Vec<String>,
}

/// Compares analytic gradients of the total loss with finite differences on
/// up to `per_tensor` coordinates of every parameter tensor.
pub fn grad_check(model: &mut Model, provider: &dyn EmbeddingProvider, batch: &[&PairSample], per_tensor: usize, rtol: f64, atol: f64) -> GradCheck {
    let (gamma, delta) = (0.5, 0.5);
    let grads = {
        let g = model.graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = Ctx::train(&g, 0.0, &mut rng);
        let (loss, _, _) = model.loss(&ctx, provider, batch, gamma, delta).unwrap();
        let grads = g.backward(loss);
        model
            .store
            .ids()
            .map(|id| grads.param(id).cloned().unwrap_or_else(|| Array2::zeros(model.store.get(id).dim())))
            .collect::<Vec<_>>()
    };
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    let mut out = GradCheck {
        checked: 0,
        failures: Vec::new(),
        tensors: BTreeSet::new(),
        worst_rel: 0.0,
        significant: 0,
        flat_tensors: Vec::new(),
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let len = model.store.get(id).len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| pick.random_range(0..len)).collect()
        };
        let mut any_significant = false;
        for c in coords {
            let orig = model.store.get(id).as_slice().unwrap()[c];
            let h = 1e-4 * orig.abs().max(1.0);
            let mut at = |x: f64| {
                model.store.get_mut(id).as_slice_mut().unwrap()[c] = x;
                total_loss(model, provider, batch, gamma, delta)
            };
            // fourth-order central difference
            let (p1, m1, p2, m2) = (at(orig + h), at(orig - h), at(orig + 2.0 * h), at(orig - 2.0 * h));
            model.store.get_mut(id).as_slice_mut().unwrap()[c] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let analytic = grads[id.0].as_slice().unwrap()[c];
            let err = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-6 {
                out.significant += 1;
                any_significant = true;
                out.worst_rel = out.worst_rel.max(err / scale);
            }
            if err > rtol * scale + atol {
                out.failures.push(format!("{name}[{c}]: analytic {analytic:e} vs numeric {numeric:e}"));
            }
            out.checked += 1;
        }
        if !any_significant {
            out.flat_tensors.push(name.clone());
        }
        out.tensors.insert(name);
    }
    out
}

// ---------------------------------------------------------------------------
// Brute-force metric oracle

fn frames_of(begin: usize, boxes: &[BBox]) -> HashMap<usize, BBox> {
    boxes.iter().enumerate().map(|(i, b)| (begin + i, *b)).collect()
}

fn area(b: &BBox) -> f64 {
    (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0)
}

fn inter(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Volume IoU computed over the set union of frame indices.
pub fn oracle_viou(a_begin: usize, a: &[BBox], b_begin: usize, b: &[BBox]) -> f64 {
    let fa = frames_of(a_begin, a);
    let fb = frames_of(b_begin, b);
    let all: BTreeSet<usize> = fa.keys().chain(fb.keys()).copied().collect();
    let mut i_sum = 0.0;
    let mut u_sum = 0.0;
    for f in all {
        match (fa.get(&f), fb.get(&f)) {
            (Some(x), Some(y)) => {
                let i = inter(x, y);
                i_sum += i;
                u_sum += area(x) + area(y) - i;
            }
            (Some(x), None) | (None, Some(x)) => u_sum += area(x),
            (None, None) => unreachable!(),
        }
    }
    if u_sum == 0.0 {
        0.0
    } else {
        i_sum / u_sum
    }
}

struct OracleGt {
    labels: [String; 3],
    begin: usize,
    sub: Vec<BBox>,
    obj: Vec<BBox>,
}

struct OraclePred {
    labels: [String; 3],
    score: f64,
    sub: (usize, Vec<BBox>),
    obj: (usize, Vec<BBox>),
}

fn substituted(p: &RelationPrediction, video: &VideoAnnotation, task: Task) -> OraclePred {
    let mut out = OraclePred {
        labels: p.triplet.clone(),
        score: p.score,
        sub: (p.begin_fid, p.sub_traj.clone()),
        obj: (p.begin_fid, p.obj_traj.clone()),
    };
    if task == Task::SgDet {
        return out;
    }
    for (slot, tid) in [(0usize, p.sub_tid), (2, p.obj_tid)] {
        let Some(t) = tid.and_then(|tid| video.tracklets.iter().find(|t| t.tid == tid)) else {
            continue;
        };
        let frames: Vec<(usize, BBox)> = (p.begin_fid..p.end_fid)
            .filter_map(|f| t.box_at(f).map(|b| (f, *b)))
            .collect();
        if frames.is_empty() {
            continue;
        }
        let traj = (frames[0].0, frames.iter().map(|x| x.1).collect());
        if slot == 0 {
            out.sub = traj;
        } else {
            out.obj = traj;
        }
        if task == Task::PredCls {
            if let Some(c) = &t.category {
                out.labels[slot] = c.clone();
            }
        }
    }
    out
}

/// Exhaustively enumerates one-to-one assignments and keeps the one that is
/// lexicographically best in rank order (matched first, then higher overlap,
/// then the earlier ground truth).
fn oracle_match(preds: &[OraclePred], gts: &[OracleGt]) -> Vec<Option<usize>> {
    let overlap: Vec<Vec<Option<f64>>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| {
                    if p.labels != g.labels {
                        return None;
                    }
                    let vs = oracle_viou(p.sub.0, &p.sub.1, g.begin, &g.sub);
                    let vo = oracle_viou(p.obj.0, &p.obj.1, g.begin, &g.obj);
                    let m = vs.min(vo);
                    (m > 0.5).then_some(m)
                })
                .collect()
        })
        .collect();
    type Key = Vec<(bool, f64, i64)>;
    fn better(a: &Key, b: &Key) -> bool {
        for (x, y) in a.iter().zip(b) {
            if x.0 != y.0 {
                return x.0;
            }
            if x.1 != y.1 {
                return x.1 > y.1;
            }
            if x.2 != y.2 {
                return x.2 > y.2;
            }
        }
        false
    }
    fn rec(
        i: usize,
        overlap: &[Vec<Option<f64>>],
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        key: &mut Key,
        best: &mut Option<(Key, Vec<Option<usize>>)>,
    ) {
        if i == overlap.len() {
            if best.as_ref().is_none_or(|(k, _)| better(key, k)) {
                *best = Some((key.clone(), cur.clone()));
            }
            return;
        }
        for j in 0..used.len() {
            if let (false, Some(v)) = (used[j], overlap[i][j]) {
                used[j] = true;
                cur.push(Some(j));
                key.push((true, v, -(j as i64)));
                rec(i + 1, overlap, used, cur, key, best);
                key.pop();
                cur.pop();
                used[j] = false;
            }
        }
        cur.push(None);
        key.push((false, 0.0, 0));
        rec(i + 1, overlap, used, cur, key, best);
        key.pop();
        cur.pop();
    }
    let mut best = None;
    rec(0, &overlap, &mut vec![false; gts.len()], &mut Vec::new(), &mut Vec::new(), &mut best);
    best.map(|(_, m)| m).unwrap_or_default()
}

#[derive(Debug, PartialEq)]
pub struct OracleReport {
    pub map: Option<f64>,
    pub r50: Option<f64>,
    pub r100: Option<f64>,
}

pub fn oracle_evaluate(preds: &[PredictionSet], videos: &[VideoAnnotation], vocab: &VocabularySplit, task: Task, split: Split) -> OracleReport {
    let keep = |p: &str| match split {
        Split::All => true,
        Split::Novel => vocab.predicates_novel.iter().any(|n| n == p),
    };
    let mut sorted: Vec<&VideoAnnotation> = videos.iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut n_gt: BTreeMap<[String; 3], usize> = BTreeMap::new();
    let mut hits: BTreeMap<[String; 3], Vec<(f64, usize, usize, bool)>> = BTreeMap::new();
    let (mut r50, mut r100) = (Vec::new(), Vec::new());
    for (vi, video) in sorted.iter().enumerate() {
        let category = |tid: u32| {
            video
                .tracklets
                .iter()
                .find(|t| t.tid == tid)
                .and_then(|t| t.category.clone())
                .unwrap_or_default()
        };
        let gts: Vec<OracleGt> = video
            .relations
            .iter()
            .filter(|r| keep(&r.predicate))
            .map(|r| {
                let clip = |tid: u32| {
                    let t = video.tracklets.iter().find(|t| t.tid == tid).unwrap();
                    (r.begin_fid..r.end_fid).map(|f| *t.box_at(f).unwrap()).collect()
                };
                OracleGt {
                    labels: [category(r.subject_tid), r.predicate.clone(), category(r.object_tid)],
                    begin: r.begin_fid,
                    sub: clip(r.subject_tid),
                    obj: clip(r.object_tid),
                }
            })
            .collect();
        let mut mine: Vec<&RelationPrediction> = preds
            .iter()
            .filter(|s| s.video_id == video.video_id)
            .flat_map(|s| s.predictions.iter())
            .filter(|p| keep(&p.triplet[1]))
            .collect();
        // insertion sort keeps equal scores in input order
        for i in 1..mine.len() {
            let mut j = i;
            while j > 0 && mine[j - 1].score < mine[j].score {
                mine.swap(j - 1, j);
                j -= 1;
            }
        }
        let eff: Vec<OraclePred> = mine.iter().map(|p| substituted(p, video, task)).collect();
        let m = oracle_match(&eff, &gts);
        for g in &gts {
            *n_gt.entry(g.labels.clone()).or_default() += 1;
        }
        if !gts.is_empty() {
            for (k, acc) in [(50, &mut r50), (100, &mut r100)] {
                let found = m.iter().take(k).filter(|x| x.is_some()).count();
                acc.push(found as f64 / gts.len() as f64);
            }
        }
        for (rank, (p, x)) in eff.iter().zip(&m).enumerate() {
            hits.entry(p.labels.clone()).or_default().push((p.score, vi, rank, x.is_some()));
        }
    }
    let mut aps = Vec::new();
    for (labels, total) in &n_gt {
        let mut list = hits.remove(labels).unwrap_or_default();
        list.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut tp = 0.0;
        let mut ap = 0.0;
        for (k, item) in list.iter().enumerate() {
            if item.3 {
                tp += 1.0;
                ap += tp / (k as f64 + 1.0);
            }
        }
        aps.push(ap / *total as f64);
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    OracleReport {
        map: mean(&aps),
        r50: mean(&r50),
        r100: mean(&r100),
    }
}

pub fn metric_vocab() -> VocabularySplit {
    VocabularySplit::new(&["cat", "dog", "bird"], &["fox"], &["near", "chase"], &["bite"]).unwrap()
}

fn grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = f64::from(rng.random_range(0..4u32)) * 10.0;
    let y = f64::from(rng.random_range(0..3u32)) * 10.0;
    let w = f64::from(rng.random_range(2..5u32)) * 10.0;
    BBox::new(x, y, x + w, y + 20.0).unwrap()
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let dx = f64::from(rng.random_range(-2i32..=2)) * 3.0;
    BBox::new((b.x1 + dx).max(0.0), b.y1, (b.x2 + dx).min(100.0), b.y2).unwrap()
}

/// Small random video with 2-3 tracklets and at most 4 relations, plus up to
/// 8 predictions mixing near-copies of ground truth with noise.
pub fn metric_fixture(rng: &mut ChaCha8Rng, id: &str) -> (VideoAnnotation, PredictionSet) {
    let vocab = metric_vocab();
    let objects = vocab.objects();
    let predicates = vocab.predicates();
    let frames = rng.random_range(6..=10);
    let n_tracks = rng.random_range(2..=3);
    let mut tracklets = Vec::new();
    for tid in 0..n_tracks {
        let begin = rng.random_range(0..3);
        let end = rng.random_range(begin + 3..=frames);
        let base = grid_box(rng);
        let boxes = (begin..end).map(|_| jittered(rng, &base)).collect();
        let cat = objects[rng.random_range(0..objects.len())].clone();
        tracklets.push(Tracklet::new(tid as u32, Some(cat), begin, boxes).unwrap());
    }
    let mut relations = Vec::new();
    for _ in 0..rng.random_range(0..=4) {
        let s = rng.random_range(0..n_tracks);
        let o = (s + rng.random_range(1..n_tracks)) % n_tracks;
        let Some((b, e)) = tracklets[s].overlap(&tracklets[o]) else { continue };
        let begin = rng.random_range(b..e);
        let end = rng.random_range(begin + 1..=e);
        relations.push(RelationInstance {
            subject_tid: s as u32,
            object_tid: o as u32,
            predicate: predicates[rng.random_range(0..predicates.len())].clone(),
            begin_fid: begin,
            end_fid: end,
            score: None,
        });
    }
    let video = VideoAnnotation {
        video_id: id.to_string(),
        frame_count: frames,
        width: 100,
        height: 100,
        tracklets,
        relations,
    }
    .validated()
    .unwrap();

    let mut preds = Vec::new();
    for _ in 0..rng.random_range(0..=8) {
        let score = f64::from(rng.random_range(1..=5u32)) / 5.0;
        let copy = !video.relations.is_empty() && rng.random_bool(0.6);
        let (s, o, mut triplet, begin, end) = if copy {
            let r = &video.relations[rng.random_range(0..video.relations.len())];
            let cat = |tid: u32| video.tracklet(tid).unwrap().category.clone().unwrap();
            let mut b = r.begin_fid;
            let mut e = r.end_fid;
            if rng.random_bool(0.3) && e - b > 1 {
                if rng.random_bool(0.5) {
                    b += 1;
                } else {
                    e -= 1;
                }
            }
            (r.subject_tid, r.object_tid, [cat(r.subject_tid), r.predicate.clone(), cat(r.object_tid)], b, e)
        } else {
            let s = rng.random_range(0..n_tracks) as u32;
            let o = ((s as usize + rng.random_range(1..n_tracks)) % n_tracks) as u32;
            let Some((b, e)) = video.tracklet(s).unwrap().overlap(video.tracklet(o).unwrap()) else { continue };
            let triplet = [
                objects[rng.random_range(0..objects.len())].clone(),
                predicates[rng.random_range(0..predicates.len())].clone(),
                objects[rng.random_range(0..objects.len())].clone(),
            ];
            (s, o, triplet, b, e)
        };
        if rng.random_bool(0.2) {
            triplet[0] = objects[rng.random_range(0..objects.len())].clone();
        }
        let traj = |tid: u32, rng: &mut ChaCha8Rng| -> Vec<BBox> {
            let t = video.tracklet(tid).unwrap();
            (begin..end).map(|f| jittered(rng, t.box_at(f).unwrap())).collect()
        };
        let (sub_traj, obj_traj) = (traj(s, rng), traj(o, rng));
        let with_tids = rng.random_bool(0.8);
        preds.push(RelationPrediction {
            triplet,
            score,
            sub_traj,
            obj_traj,
            begin_fid: begin,
            end_fid: end,
            sub_tid: with_tids.then_some(s),
            obj_tid: with_tids.then_some(o),
        });
    }
    (video, PredictionSet::ranked(id, preds))
}

pub fn exactly_equal(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x == y,
        (None, None) => true,
        _ => false,
    }
}
