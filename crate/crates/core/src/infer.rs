//! Turning pair scores into ranked relation predictions.

use log::warn;

use crate::data::{PredictionSet, RelationPrediction, VideoAnnotation};
use crate::encoders::EmbeddingProvider;
use crate::error::Result;
use crate::evaluation::Task;
use crate::model::{build_pairs, Model};

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Scores every ordered co-occurring tracklet pair against every predicate
/// and keeps the `top_n` best triplets.
///
/// PredCls takes the annotated categories and ranks by predicate score.
/// The other tasks use the most probable categories and rank by
/// `p(subject) * p(object) * score(predicate)`.
pub fn infer_video(model: &Model, provider: &dyn EmbeddingProvider, video: &VideoAnnotation, task: Task, top_n: usize) -> Result<PredictionSet> {
    let pairs = build_pairs(provider, video, model.config.frames)?;
    if pairs.is_empty() {
        warn!("{}: no co-occurring tracklet pairs, emitting no predictions", video.video_id);
        return Ok(PredictionSet::ranked(video.video_id.clone(), Vec::new()));
    }
    let scores = model.score_pairs(provider, &pairs)?;
    let mut predictions = Vec::new();
    for (pair, sc) in pairs.iter().zip(&scores) {
        let (is, io) = (argmax(&sc.sub_probs), argmax(&sc.obj_probs));
        let known = |c: &Option<String>, fallback: usize| match c {
            Some(c) if task == Task::PredCls => c.clone(),
            _ => model.object_labels[fallback].clone(),
        };
        let (sub_label, obj_label) = (known(&pair.sub_category, is), known(&pair.obj_category, io));
        let class_score = if task == Task::PredCls {
            1.0
        } else {
            sc.sub_probs[is] * sc.obj_probs[io]
        };
        let sub = video.tracklet(pair.sub_tid).expect("pair built from this video");
        let obj = video.tracklet(pair.obj_tid).expect("pair built from this video");
        let sub_traj = sub.clip(pair.begin_fid, pair.end_fid).expect("span inside tracklet");
        let obj_traj = obj.clip(pair.begin_fid, pair.end_fid).expect("span inside tracklet");
        for (c, &p) in sc.predicate_scores.iter().enumerate() {
            predictions.push(RelationPrediction {
                triplet: [sub_label.clone(), model.predicate_labels[c].clone(), obj_label.clone()],
                score: class_score * p,
                sub_traj: sub_traj.clone(),
                obj_traj: obj_traj.clone(),
                begin_fid: pair.begin_fid,
                end_fid: pair.end_fid,
                sub_tid: Some(pair.sub_tid),
                obj_tid: Some(pair.obj_tid),
            });
        }
    }
    let mut set = PredictionSet::ranked(video.video_id.clone(), predictions);
    set.predictions.truncate(top_n);
    Ok(set)
}

pub fn infer_videos(model: &Model, provider: &dyn EmbeddingProvider, videos: &[VideoAnnotation], task: Task, top_n: usize) -> Result<Vec<PredictionSet>> {
    videos
        .iter()
        .map(|v| infer_video(model, provider, v, task, top_n))
        .collect()
}
