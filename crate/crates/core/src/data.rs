//! Domain types, geometry and the JSON file formats.
//!
//! Frame spans are half-open `[begin, end)` everywhere. Saved files are
//! canonical: object keys sorted, tracklets by ascending tid, relations by
//! `(subject_tid, object_tid, begin_fid, end_fid, predicate)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invariant(format!("box {self:?} has negative or non-finite coordinates")));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Invariant(format!("box {self:?} is empty")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Integer-pixel key used for hashing.
    pub fn quantized(&self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2].map(|v| v.round() as i64)
    }

    fn to_json(self) -> Value {
        json!({"xmin": self.x1, "ymin": self.y1, "xmax": self.x2, "ymax": self.y2})
    }

    fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// `n` frame indices spread uniformly over `[0, frame_count)`:
/// `index_i = floor(i * frame_count / n)`.
pub fn sample_frames(frame_count: usize, n: usize) -> Vec<usize> {
    assert!(frame_count >= 1 && n >= 1, "sample_frames needs frame_count >= 1 and n >= 1");
    (0..n).map(|i| i * frame_count / n).collect()
}

/// [`sample_frames`] over the half-open span `[begin, end)`.
pub fn sample_span(begin: usize, end: usize, n: usize) -> Vec<usize> {
    sample_frames(end - begin, n).into_iter().map(|f| begin + f).collect()
}

/// Contiguous box sequence for one object.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub tid: u32,
    pub category: Option<String>,
    pub begin_fid: usize,
    pub boxes: Vec<BBox>,
    pub features: Option<Vec<Array1<f64>>>,
}

impl Tracklet {
    pub fn new(tid: u32, category: Option<String>, begin_fid: usize, boxes: Vec<BBox>) -> Result<Self> {
        let t = Tracklet {
            tid,
            category,
            begin_fid,
            boxes,
            features: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::Invariant(format!("tracklet {} has no boxes", self.tid)));
        }
        for b in &self.boxes {
            b.validate()
                .map_err(|e| Error::Invariant(format!("tracklet {}: {e}", self.tid)))?;
        }
        if let Some(f) = &self.features {
            if f.len() != self.boxes.len() {
                return Err(Error::Invariant(format!(
                    "tracklet {}: {} feature vectors for {} boxes",
                    self.tid,
                    f.len(),
                    self.boxes.len()
                )));
            }
        }
        Ok(())
    }

    /// Exclusive end frame.
    pub fn end_fid(&self) -> usize {
        self.begin_fid + self.boxes.len()
    }

    pub fn covers(&self, fid: usize) -> bool {
        fid >= self.begin_fid && fid < self.end_fid()
    }

    pub fn box_at(&self, fid: usize) -> Option<&BBox> {
        self.covers(fid).then(|| &self.boxes[fid - self.begin_fid])
    }

    /// Boxes over `[begin, end)`, which must be covered.
    pub fn clip(&self, begin: usize, end: usize) -> Option<Vec<BBox>> {
        (begin >= self.begin_fid && end <= self.end_fid() && begin < end)
            .then(|| self.boxes[begin - self.begin_fid..end - self.begin_fid].to_vec())
    }

    /// Common half-open span with another tracklet, if non-empty.
    pub fn overlap(&self, other: &Tracklet) -> Option<(usize, usize)> {
        let b = self.begin_fid.max(other.begin_fid);
        let e = self.end_fid().min(other.end_fid());
        (b < e).then_some((b, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub subject_tid: u32,
    pub object_tid: u32,
    pub predicate: String,
    pub begin_fid: usize,
    pub end_fid: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RelationInstance {
    fn sort_key(&self) -> (u32, u32, usize, usize, &str) {
        (
            self.subject_tid,
            self.object_tid,
            self.begin_fid,
            self.end_fid,
            &self.predicate,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub tracklets: Vec<Tracklet>,
    pub relations: Vec<RelationInstance>,
}

impl VideoAnnotation {
    /// Checks every invariant and puts tracklets and relations in canonical
    /// order.
    pub fn validated(mut self) -> Result<Self> {
        self.tracklets.sort_by_key(|t| t.tid);
        self.relations
            .sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let vid = &self.video_id;
        let mut seen = BTreeSet::new();
        for t in &self.tracklets {
            if !seen.insert(t.tid) {
                return Err(Error::Invariant(format!("{vid}: duplicate tid {}", t.tid)));
            }
            t.validate()
                .map_err(|e| Error::Invariant(format!("{vid}: {e}")))?;
            if t.end_fid() > self.frame_count {
                return Err(Error::Invariant(format!(
                    "{vid}: tracklet {} ends at frame {} beyond frame_count {}",
                    t.tid,
                    t.end_fid(),
                    self.frame_count
                )));
            }
            let (w, h) = (f64::from(self.width), f64::from(self.height));
            if let Some(b) = t.boxes.iter().find(|b| b.x2 > w || b.y2 > h) {
                return Err(Error::Invariant(format!(
                    "{vid}: tracklet {} box {b:?} outside {}x{} frame",
                    t.tid, self.width, self.height
                )));
            }
        }
        for (i, r) in self.relations.iter().enumerate() {
            let ctx = || {
                format!(
                    "{vid}: relation #{i} <{} {} {}> [{}, {})",
                    r.subject_tid, r.predicate, r.object_tid, r.begin_fid, r.end_fid
                )
            };
            if r.begin_fid >= r.end_fid {
                return Err(Error::Invariant(format!("{}: empty span", ctx())));
            }
            if r.subject_tid == r.object_tid {
                return Err(Error::Invariant(format!("{}: subject equals object", ctx())));
            }
            let s = self
                .tracklet(r.subject_tid)
                .ok_or_else(|| Error::Invariant(format!("{}: unknown subject tid {}", ctx(), r.subject_tid)))?;
            let o = self
                .tracklet(r.object_tid)
                .ok_or_else(|| Error::Invariant(format!("{}: unknown object tid {}", ctx(), r.object_tid)))?;
            match s.overlap(o) {
                Some((b, e)) if r.begin_fid >= b && r.end_fid <= e => {}
                _ => {
                    return Err(Error::Invariant(format!(
                        "{}: span not inside the overlap of both tracklets",
                        ctx()
                    )))
                }
            }
            if let Some(score) = r.score {
                if !(0.0..=1.0).contains(&score) {
                    return Err(Error::Invariant(format!("{}: score {score} outside [0, 1]", ctx())));
                }
            }
        }
        Ok(())
    }

    pub fn tracklet(&self, tid: u32) -> Option<&Tracklet> {
        self.tracklets.iter().find(|t| t.tid == tid)
    }

    /// Full-frame box used as the background region.
    pub fn frame_box(&self) -> BBox {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: f64::from(self.width),
            y2: f64::from(self.height),
        }
    }

    pub fn to_json(&self) -> Value {
        let objects: Vec<Value> = self
            .tracklets
            .iter()
            .map(|t| match &t.category {
                Some(c) => json!({"tid": t.tid, "category": c}),
                None => json!({"tid": t.tid}),
            })
            .collect();
        let trajectories: Vec<Value> = (0..self.frame_count)
            .map(|fid| {
                Value::Array(
                    self.tracklets
                        .iter()
                        .filter_map(|t| t.box_at(fid).map(|b| json!({"tid": t.tid, "bbox": b.to_json()})))
                        .collect(),
                )
            })
            .collect();
        let relations: Vec<Value> = self
            .relations
            .iter()
            .map(|r| serde_json::to_value(r).expect("relation serializes"))
            .collect();
        json!({
            "video_id": self.video_id,
            "frame_count": self.frame_count,
            "width": self.width,
            "height": self.height,
            "subject/objects": objects,
            "trajectories": trajectories,
            "relation_instances": relations,
        })
    }

    pub fn to_canonical_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("json");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let raw: RawAnnotation = serde_json::from_str(text).map_err(|e| Error::parse(path, &e))?;
        raw.into_annotation()
    }
}

#[derive(Deserialize)]
struct RawBoxCoords {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

#[derive(Deserialize)]
struct RawTrajBox {
    tid: u32,
    bbox: RawBoxCoords,
}

#[derive(Deserialize)]
struct RawObject {
    tid: u32,
    #[serde(default)]
    category: Option<String>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    video_id: String,
    frame_count: usize,
    width: u32,
    height: u32,
    #[serde(rename = "subject/objects")]
    objects: Vec<RawObject>,
    trajectories: Vec<Vec<RawTrajBox>>,
    #[serde(default)]
    relation_instances: Vec<RelationInstance>,
}

impl RawAnnotation {
    fn into_annotation(self) -> Result<VideoAnnotation> {
        let vid = self.video_id.clone();
        let mut frames: BTreeMap<u32, Vec<(usize, BBox)>> = BTreeMap::new();
        for (fid, boxes) in self.trajectories.into_iter().enumerate() {
            for b in boxes {
                let bbox = BBox {
                    x1: b.bbox.xmin,
                    y1: b.bbox.ymin,
                    x2: b.bbox.xmax,
                    y2: b.bbox.ymax,
                };
                frames.entry(b.tid).or_default().push((fid, bbox));
            }
        }
        let mut tracklets = Vec::with_capacity(self.objects.len());
        for obj in self.objects {
            let Some(seq) = frames.remove(&obj.tid) else {
                return Err(Error::Invariant(format!("{vid}: tracklet {} has no boxes", obj.tid)));
            };
            let begin = seq[0].0;
            for (i, (fid, _)) in seq.iter().enumerate() {
                if *fid != begin + i {
                    return Err(Error::Invariant(format!(
                        "{vid}: tracklet {} is not contiguous (gap or duplicate at frame {fid})",
                        obj.tid
                    )));
                }
            }
            tracklets.push(Tracklet {
                tid: obj.tid,
                category: obj.category,
                begin_fid: begin,
                boxes: seq.into_iter().map(|(_, b)| b).collect(),
                features: None,
            });
        }
        if let Some(tid) = frames.keys().next() {
            return Err(Error::Invariant(format!(
                "{vid}: trajectory boxes reference tid {tid} missing from subject/objects"
            )));
        }
        VideoAnnotation {
            video_id: self.video_id,
            frame_count: self.frame_count,
            width: self.width,
            height: self.height,
            tracklets,
            relations: self.relation_instances,
        }
        .validated()
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<VideoAnnotation> {
    VideoAnnotation::from_json_str(&read(path)?, path)
}

pub fn save_annotations(video: &VideoAnnotation, path: &Path) -> Result<()> {
    write(path, &video.to_canonical_string())
}

/// Loads every `*.json` annotation in a directory, sorted by video id.
pub fn load_annotation_dir(dir: &Path) -> Result<Vec<VideoAnnotation>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut videos = paths
        .iter()
        .map(|p| load_annotations(p))
        .collect::<Result<Vec<_>>>()?;
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(videos)
}

/// Base / novel category split for objects and predicates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabularySplit {
    pub objects_base: Vec<String>,
    pub objects_novel: Vec<String>,
    pub predicates_base: Vec<String>,
    pub predicates_novel: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSplit {
    base: Vec<String>,
    novel: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawVocab {
    objects: RawSplit,
    predicates: RawSplit,
}

impl VocabularySplit {
    pub fn new(
        objects_base: &[&str],
        objects_novel: &[&str],
        predicates_base: &[&str],
        predicates_novel: &[&str],
    ) -> Result<Self> {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        let v = VocabularySplit {
            objects_base: own(objects_base),
            objects_novel: own(objects_novel),
            predicates_base: own(predicates_base),
            predicates_novel: own(predicates_novel),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, base, novel) in [
            ("object", &self.objects_base, &self.objects_novel),
            ("predicate", &self.predicates_base, &self.predicates_novel),
        ] {
            if base.is_empty() {
                return Err(Error::Invariant(format!("no base {kind} categories")));
            }
            let mut seen = BTreeSet::new();
            for c in base.iter().chain(novel) {
                if c.trim().is_empty() {
                    return Err(Error::Invariant(format!("empty {kind} category name")));
                }
                if !seen.insert(c.as_str()) {
                    let where_ = if base.contains(c) && novel.contains(c) {
                        "both base and novel"
                    } else {
                        "the split twice"
                    };
                    return Err(Error::Invariant(format!("{kind} {c:?} listed in {where_}")));
                }
            }
        }
        Ok(())
    }

    /// Base followed by novel object categories.
    pub fn objects(&self) -> Vec<String> {
        self.objects_base.iter().chain(&self.objects_novel).cloned().collect()
    }

    /// Base followed by novel predicates.
    pub fn predicates(&self) -> Vec<String> {
        self.predicates_base
            .iter()
            .chain(&self.predicates_novel)
            .cloned()
            .collect()
    }

    pub fn is_novel_predicate(&self, p: &str) -> bool {
        self.predicates_novel.iter().any(|x| x == p)
    }

    pub fn is_novel_object(&self, o: &str) -> bool {
        self.objects_novel.iter().any(|x| x == o)
    }

    pub fn to_canonical_string(&self) -> String {
        let raw = RawVocab {
            objects: RawSplit {
                base: self.objects_base.clone(),
                novel: self.objects_novel.clone(),
            },
            predicates: RawSplit {
                base: self.predicates_base.clone(),
                novel: self.predicates_novel.clone(),
            },
        };
        let mut s = serde_json::to_string_pretty(&raw).expect("json");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let raw: RawVocab = serde_json::from_str(text).map_err(|e| Error::parse(path, &e))?;
        let v = VocabularySplit {
            objects_base: raw.objects.base,
            objects_novel: raw.objects.novel,
            predicates_base: raw.predicates.base,
            predicates_novel: raw.predicates.novel,
        };
        v.validate()?;
        Ok(v)
    }
}

pub fn load_vocabulary(path: &Path) -> Result<VocabularySplit> {
    VocabularySplit::from_json_str(&read(path)?, path)
}

pub fn save_vocabulary(vocab: &VocabularySplit, path: &Path) -> Result<()> {
    write(path, &vocab.to_canonical_string())
}

/// One ranked relation prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationPrediction {
    /// `[subject, predicate, object]` categories.
    pub triplet: [String; 3],
    pub score: f64,
    pub sub_traj: Vec<BBox>,
    pub obj_traj: Vec<BBox>,
    pub begin_fid: usize,
    pub end_fid: usize,
    /// Ground-truth tracklet ids when the prediction was made on given
    /// trajectories (SGCls / PredCls).
    pub sub_tid: Option<u32>,
    pub obj_tid: Option<u32>,
}

impl RelationPrediction {
    pub fn validate(&self) -> Result<()> {
        if self.begin_fid >= self.end_fid {
            return Err(Error::Invariant(format!("prediction {:?}: empty span", self.triplet)));
        }
        let n = self.end_fid - self.begin_fid;
        if self.sub_traj.len() != n || self.obj_traj.len() != n {
            return Err(Error::Invariant(format!(
                "prediction {:?}: trajectories must have {n} boxes",
                self.triplet
            )));
        }
        if !self.score.is_finite() {
            return Err(Error::Invariant(format!("prediction {:?}: non-finite score", self.triplet)));
        }
        if self.triplet.iter().any(|s| s.is_empty()) {
            return Err(Error::Invariant("prediction with an empty label".into()));
        }
        Ok(())
    }
}

/// Ranked predictions for one video; scores are non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub video_id: String,
    pub predictions: Vec<RelationPrediction>,
}

impl PredictionSet {
    /// Sorts by descending score; equal scores keep their input order.
    pub fn ranked(video_id: impl Into<String>, mut predictions: Vec<RelationPrediction>) -> Self {
        predictions.sort_by(|a, b| b.score.total_cmp(&a.score));
        PredictionSet {
            video_id: video_id.into(),
            predictions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.predictions {
            p.validate()
                .map_err(|e| Error::Invariant(format!("{}: {e}", self.video_id)))?;
        }
        if self.predictions.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(Error::Invariant(format!(
                "{}: prediction scores are not non-increasing",
                self.video_id
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawPrediction {
    triplet: [String; 3],
    score: f64,
    sub_traj: Vec<[f64; 4]>,
    obj_traj: Vec<[f64; 4]>,
    begin_fid: usize,
    end_fid: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sub_tid: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    obj_tid: Option<u32>,
}

#[derive(Serialize, Deserialize, Default)]
struct RawPredictionFile {
    results: BTreeMap<String, Vec<RawPrediction>>,
}

fn boxes_from(raw: Vec<[f64; 4]>) -> Vec<BBox> {
    raw.into_iter()
        .map(|[x1, y1, x2, y2]| BBox { x1, y1, x2, y2 })
        .collect()
}

pub fn predictions_to_string(videos: &[PredictionSet]) -> String {
    let mut file = RawPredictionFile::default();
    for v in videos {
        let list = v
            .predictions
            .iter()
            .map(|p| RawPrediction {
                triplet: p.triplet.clone(),
                score: p.score,
                sub_traj: p.sub_traj.iter().map(|b| b.to_array()).collect(),
                obj_traj: p.obj_traj.iter().map(|b| b.to_array()).collect(),
                begin_fid: p.begin_fid,
                end_fid: p.end_fid,
                sub_tid: p.sub_tid,
                obj_tid: p.obj_tid,
            })
            .collect();
        file.results.insert(v.video_id.clone(), list);
    }
    let mut s = serde_json::to_string(&file).expect("json");
    s.push('\n');
    s
}

pub fn predictions_from_str(text: &str, path: &Path) -> Result<Vec<PredictionSet>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let raw: RawPredictionFile = serde_json::from_str(text).map_err(|e| Error::parse(path, &e))?;
    let mut out = Vec::with_capacity(raw.results.len());
    for (video_id, list) in raw.results {
        let set = PredictionSet {
            video_id,
            predictions: list
                .into_iter()
                .map(|p| RelationPrediction {
                    triplet: p.triplet,
                    score: p.score,
                    sub_traj: boxes_from(p.sub_traj),
                    obj_traj: boxes_from(p.obj_traj),
                    begin_fid: p.begin_fid,
                    end_fid: p.end_fid,
                    sub_tid: p.sub_tid,
                    obj_tid: p.obj_tid,
                })
                .collect(),
        };
        set.validate()?;
        out.push(set);
    }
    Ok(out)
}

pub fn save_predictions(videos: &[PredictionSet], path: &Path) -> Result<()> {
    write(path, &predictions_to_string(videos))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    predictions_from_str(&read(path)?, path)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Three tracklets, two relations.
    pub fn video() -> VideoAnnotation {
        let t0 = Tracklet::new(0, Some("person".into()), 0, (0..6).map(|i| bx(10.0 + i as f64, 10.0, 50.0 + i as f64, 90.0)).collect()).unwrap();
        let t1 = Tracklet::new(1, Some("horse".into()), 2, (0..6).map(|i| bx(30.0, 40.0 + i as f64, 120.0, 110.0)).collect()).unwrap();
        let t2 = Tracklet::new(2, Some("dog".into()), 1, (0..4).map(|_| bx(150.0, 100.0, 190.0, 140.0)).collect()).unwrap();
        VideoAnnotation {
            video_id: "v0".into(),
            frame_count: 8,
            width: 200,
            height: 150,
            tracklets: vec![t0, t1, t2],
            relations: vec![
                RelationInstance {
                    subject_tid: 0,
                    object_tid: 1,
                    predicate: "ride".into(),
                    begin_fid: 2,
                    end_fid: 6,
                    score: None,
                },
                RelationInstance {
                    subject_tid: 2,
                    object_tid: 0,
                    predicate: "watch".into(),
                    begin_fid: 1,
                    end_fid: 5,
                    score: None,
                },
            ],
        }
        .validated()
        .unwrap()
    }
}
