//! Relation detection metrics: volume IoU, greedy matching, per-triplet
//! average precision and Recall@K under SGDet / SGCls / PredCls.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use log::warn;
use serde::Serialize;

use crate::data::{BBox, PredictionSet, RelationPrediction, VideoAnnotation, VocabularySplit};
use crate::error::{Error, Result};

pub const MATCH_THRESHOLD: f64 = 0.5;
pub const RECALL_KS: [usize; 2] = [50, 100];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    SgDet,
    SgCls,
    PredCls,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::SgDet, Task::SgCls, Task::PredCls];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::SgDet => "sgdet",
            Task::SgCls => "sgcls",
            Task::PredCls => "predcls",
        }
    }

    /// Whether predictions are evaluated on ground-truth trajectories.
    pub fn uses_gt_trajectories(self) -> bool {
        !matches!(self, Task::SgDet)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Argument(format!("unknown task {s:?} (sgdet, sgcls, predcls)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Novel => "novel",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Split::All),
            "novel" => Ok(Split::Novel),
            _ => Err(Error::Argument(format!("unknown split {s:?} (all, novel)"))),
        }
    }
}

/// A box sequence starting at `begin`.
#[derive(Clone, Copy, Debug)]
pub struct Trajectory<'a> {
    pub begin: usize,
    pub boxes: &'a [BBox],
}

impl<'a> Trajectory<'a> {
    pub fn new(begin: usize, boxes: &'a [BBox]) -> Self {
        Trajectory { begin, boxes }
    }

    pub fn end(&self) -> usize {
        self.begin + self.boxes.len()
    }

    fn at(&self, fid: usize) -> Option<&BBox> {
        fid.checked_sub(self.begin).and_then(|i| self.boxes.get(i))
    }
}

/// Volume IoU: summed per-frame intersections over summed per-frame unions
/// across the union of both temporal extents.
pub fn viou(a: Trajectory, b: Trajectory) -> f64 {
    if a.boxes.is_empty() && b.boxes.is_empty() {
        return 0.0;
    }
    let (lo, hi) = (a.begin.min(b.begin), a.end().max(b.end()));
    let (mut inter, mut union) = (0.0, 0.0);
    for f in lo..hi {
        match (a.at(f), b.at(f)) {
            (Some(x), Some(y)) => {
                let i = x.intersection_area(y);
                inter += i;
                union += x.area() + y.area() - i;
            }
            (Some(x), None) | (None, Some(x)) => union += x.area(),
            (None, None) => {}
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Ground-truth relation instance with its trajectories cut to the span.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub triplet: [String; 3],
    pub sub_tid: u32,
    pub obj_tid: u32,
    pub begin_fid: usize,
    pub sub_traj: Vec<BBox>,
    pub obj_traj: Vec<BBox>,
}

/// Ground-truth instances of a video, in annotation order.
pub fn ground_truth(video: &VideoAnnotation) -> Vec<GroundTruth> {
    video
        .relations
        .iter()
        .filter_map(|r| {
            let s = video.tracklet(r.subject_tid)?;
            let o = video.tracklet(r.object_tid)?;
            Some(GroundTruth {
                triplet: [
                    s.category.clone().unwrap_or_default(),
                    r.predicate.clone(),
                    o.category.clone().unwrap_or_default(),
                ],
                sub_tid: s.tid,
                obj_tid: o.tid,
                begin_fid: r.begin_fid,
                sub_traj: s.clip(r.begin_fid, r.end_fid)?,
                obj_traj: o.clip(r.begin_fid, r.end_fid)?,
            })
        })
        .collect()
}

/// Prediction after task-specific substitution of ground-truth tracklets.
struct Effective<'a> {
    triplet: std::borrow::Cow<'a, [String; 3]>,
    sub: (usize, std::borrow::Cow<'a, [BBox]>),
    obj: (usize, std::borrow::Cow<'a, [BBox]>),
}

fn effective<'a>(p: &'a RelationPrediction, video: Option<&VideoAnnotation>, task: Task) -> Effective<'a> {
    use std::borrow::Cow;
    let mut eff = Effective {
        triplet: Cow::Borrowed(&p.triplet),
        sub: (p.begin_fid, Cow::Borrowed(p.sub_traj.as_slice())),
        obj: (p.begin_fid, Cow::Borrowed(p.obj_traj.as_slice())),
    };
    let Some(video) = video.filter(|_| task.uses_gt_trajectories()) else {
        return eff;
    };
    let substitute = |tid: Option<u32>| {
        let t = video.tracklet(tid?)?;
        let (b, e) = (p.begin_fid.max(t.begin_fid), p.end_fid.min(t.end_fid()));
        (b < e).then(|| (b, t.clip(b, e).expect("inside span"), t.category.clone()))
    };
    let mut triplet = p.triplet.clone();
    if let Some((b, boxes, cat)) = substitute(p.sub_tid) {
        eff.sub = (b, Cow::Owned(boxes));
        if let (Task::PredCls, Some(c)) = (task, cat) {
            triplet[0] = c;
        }
    }
    if let Some((b, boxes, cat)) = substitute(p.obj_tid) {
        eff.obj = (b, Cow::Owned(boxes));
        if let (Task::PredCls, Some(c)) = (task, cat) {
            triplet[2] = c;
        }
    }
    if triplet != p.triplet {
        eff.triplet = Cow::Owned(triplet);
    }
    eff
}

/// Greedy matching in rank order. Returns, per prediction, the index of the
/// ground truth it matched. A prediction takes the unmatched ground truth
/// with equal labels and the highest `min(vIoU_sub, vIoU_obj)` above
/// `thresh`; ties go to the earlier ground truth.
pub fn match_predictions(
    preds: &[RelationPrediction],
    gts: &[GroundTruth],
    video: Option<&VideoAnnotation>,
    task: Task,
    thresh: f64,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let e = effective(p, video, task);
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] || gt.triplet != *e.triplet {
                    continue;
                }
                let vs = viou(Trajectory::new(e.sub.0, &e.sub.1), Trajectory::new(gt.begin_fid, &gt.sub_traj));
                let vo = viou(Trajectory::new(e.obj.0, &e.obj.1), Trajectory::new(gt.begin_fid, &gt.obj_traj));
                let ov = vs.min(vo);
                if ov > thresh && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((j, ov));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

/// `sum_k precision@k * match_k / n_gt`; `None` when `n_gt == 0`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / n_gt as f64)
}

/// Fraction of ground truths matched within the first `k` predictions;
/// `None` when `n_gt == 0`.
pub fn recall_at_k(matches: &[Option<usize>], n_gt: usize, k: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let hit = matches.iter().take(k).filter(|m| m.is_some()).count();
    Some(hit as f64 / n_gt as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryAp {
    pub triplet: [String; 3],
    pub ap: f64,
    pub n_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub split: Split,
    /// `None` when the split has no ground truth.
    pub map: Option<f64>,
    pub r50: Option<f64>,
    pub r100: Option<f64>,
    pub empty_split: bool,
    pub n_videos: usize,
    pub n_gt: usize,
    /// Prediction video ids with no matching annotation.
    pub skipped_videos: Vec<String>,
    pub per_category: Vec<CategoryAp>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    pub fn table_row(&self) -> String {
        format!(
            "{:<8} {:<6} {:>7} {:>7} {:>7}",
            self.task.as_str(),
            self.split.as_str(),
            pct(self.map),
            pct(self.r50),
            pct(self.r100)
        )
    }

    pub fn table_header() -> String {
        format!("{:<8} {:<6} {:>7} {:>7} {:>7}", "task", "split", "mAP", "R@50", "R@100")
    }

    /// Aligned text table of the summary and per-category APs.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::table_header());
        let _ = writeln!(s, "{}", self.table_row());
        if self.empty_split {
            let _ = writeln!(s, "(split has no ground-truth relations)");
        }
        if !self.skipped_videos.is_empty() {
            let _ = writeln!(s, "skipped {} unknown video(s)", self.skipped_videos.len());
        }
        if !self.per_category.is_empty() {
            let w = self
                .per_category
                .iter()
                .map(|c| c.triplet.join(" ").len())
                .max()
                .unwrap_or(0)
                .max(7);
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<w$} {:>7} {:>5}", "triplet", "AP", "n_gt");
            for c in &self.per_category {
                let _ = writeln!(s, "{:<w$} {:>7.2} {:>5}", c.triplet.join(" "), 100.0 * c.ap, c.n_gt);
            }
        }
        s
    }
}

/// Scores `predictions` against `annotations`.
///
/// Videos are processed in id order. The Novel split keeps only ground truth
/// and predictions whose predicate is novel. Per-triplet APs pool ranked
/// predictions over all videos (score descending, ties by video id then
/// rank); Recall@K is averaged over videos with at least one ground truth.
pub fn evaluate(
    predictions: &[PredictionSet],
    annotations: &[VideoAnnotation],
    vocab: &VocabularySplit,
    task: Task,
    split: Split,
) -> EvalReport {
    let keep = |predicate: &str| split == Split::All || vocab.is_novel_predicate(predicate);
    let mut by_video: HashMap<&str, Vec<RelationPrediction>> = HashMap::new();
    let known: HashMap<&str, &VideoAnnotation> = annotations.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut skipped = Vec::new();
    for set in predictions {
        if !known.contains_key(set.video_id.as_str()) {
            warn!("predictions for unknown video {:?} skipped", set.video_id);
            skipped.push(set.video_id.clone());
            continue;
        }
        by_video
            .entry(set.video_id.as_str())
            .or_default()
            .extend(set.predictions.iter().filter(|p| keep(&p.triplet[1])).cloned());
    }
    skipped.sort();

    let mut videos: Vec<&VideoAnnotation> = annotations.iter().collect();
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));

    // triplet -> (n_gt, [(score, video order, rank, matched)])
    type Pool = (usize, Vec<(f64, usize, usize, bool)>);
    let mut pools: BTreeMap<[String; 3], Pool> = BTreeMap::new();
    let (mut r50, mut r100) = (Vec::new(), Vec::new());
    let mut n_gt_total = 0;
    for (vi, video) in videos.iter().enumerate() {
        let gts: Vec<GroundTruth> = ground_truth(video)
            .into_iter()
            .filter(|g| keep(&g.triplet[1]))
            .collect();
        let mut preds = by_video.remove(video.video_id.as_str()).unwrap_or_default();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let matches = match_predictions(&preds, &gts, Some(video), task, MATCH_THRESHOLD);
        n_gt_total += gts.len();
        if let (Some(a), Some(b)) = (
            recall_at_k(&matches, gts.len(), RECALL_KS[0]),
            recall_at_k(&matches, gts.len(), RECALL_KS[1]),
        ) {
            r50.push(a);
            r100.push(b);
        }
        for g in &gts {
            pools.entry(g.triplet.clone()).or_default().0 += 1;
        }
        for (rank, (p, m)) in preds.iter().zip(&matches).enumerate() {
            let triplet = effective(p, Some(video), task).triplet.into_owned();
            pools
                .entry(triplet)
                .or_default()
                .1
                .push((p.score, vi, rank, m.is_some()));
        }
    }

    let mut per_category = Vec::new();
    for (triplet, (n_gt, mut ranked)) in pools {
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
        if let Some(ap) = average_precision(&flags, n_gt) {
            per_category.push(CategoryAp { triplet, ap, n_gt });
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let aps: Vec<f64> = per_category.iter().map(|c| c.ap).collect();
    EvalReport {
        task,
        split,
        map: mean(&aps),
        r50: mean(&r50),
        r100: mean(&r100),
        empty_split: n_gt_total == 0,
        n_videos: videos.len(),
        n_gt: n_gt_total,
        skipped_videos: skipped,
        per_category,
    }
}
