//! Deterministic synthetic videos with moving boxes and planted relations.
//!
//! Each generated tracklet drifts linearly inside the frame. Relations connect
//! co-occurring pairs over their full common span. Pair these annotations
//! with a [`SyntheticProvider`](crate::encoders::SyntheticProvider) built by
//! `planted(...)` so that region embeddings carry the labels.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_annotations, save_vocabulary, BBox, RelationInstance, Tracklet, VideoAnnotation, VocabularySplit};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SyntheticOptions {
    pub tracklets_per_video: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub width: u32,
    pub height: u32,
    /// Probability that a co-occurring unordered pair carries a relation.
    pub relation_prob: f64,
    /// Draw novel objects and predicates too (for evaluation sets).
    pub include_novel: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            tracklets_per_video: 4,
            min_frames: 24,
            max_frames: 40,
            width: 320,
            height: 240,
            relation_prob: 0.5,
            include_novel: false,
        }
    }
}

/// Vocabulary used by the demo and most tests.
pub fn demo_vocabulary() -> VocabularySplit {
    VocabularySplit::new(
        &["person", "dog", "horse", "car", "bicycle"],
        &["zebra", "elephant"],
        &["ride", "chase", "watch"],
        &["pull", "kick"],
    )
    .expect("demo vocabulary is valid")
}

fn tracklet(rng: &mut ChaCha8Rng, tid: u32, category: &str, frames: usize, opts: &SyntheticOptions) -> Result<Tracklet> {
    let begin = rng.random_range(0..=frames / 5);
    let end = rng.random_range(frames * 4 / 5..=frames).max(begin + 2);
    let (fw, fh) = (f64::from(opts.width), f64::from(opts.height));
    let w = f64::from(rng.random_range(40u32..=90)).min(fw);
    let h = f64::from(rng.random_range(40u32..=90)).min(fh);
    let mut x = f64::from(rng.random_range(0..=(fw - w) as u32));
    let mut y = f64::from(rng.random_range(0..=(fh - h) as u32));
    let vx = f64::from(rng.random_range(-3i32..=3));
    let vy = f64::from(rng.random_range(-3i32..=3));
    let mut boxes = Vec::with_capacity(end - begin);
    for _ in begin..end {
        boxes.push(BBox::new(x, y, x + w, y + h)?);
        x = (x + vx).clamp(0.0, fw - w);
        y = (y + vy).clamp(0.0, fh - h);
    }
    Tracklet::new(tid, Some(category.to_string()), begin, boxes)
}

/// Generates one video. Categories within a video are distinct whenever the
/// pool is large enough, and every video carries at least one relation.
pub fn generate_video(rng: &mut ChaCha8Rng, video_id: &str, vocab: &VocabularySplit, opts: &SyntheticOptions) -> Result<VideoAnnotation> {
    let mut objects = vocab.objects_base.clone();
    let mut predicates = vocab.predicates_base.clone();
    if opts.include_novel {
        objects.extend(vocab.objects_novel.iter().cloned());
        predicates.extend(vocab.predicates_novel.iter().cloned());
    }
    let frames = rng.random_range(opts.min_frames..=opts.max_frames);
    objects.shuffle(rng);
    let mut tracklets = Vec::new();
    for i in 0..opts.tracklets_per_video {
        let cat = &objects[i % objects.len()];
        tracklets.push(tracklet(rng, i as u32, cat, frames, opts)?);
    }
    let mut relations = Vec::new();
    let mut candidates = Vec::new();
    for (i, a) in tracklets.iter().enumerate() {
        for b in &tracklets[i + 1..] {
            let Some((begin, end)) = a.overlap(b) else { continue };
            let forward = rng.random_bool(0.5);
            let (s, o) = if forward { (a.tid, b.tid) } else { (b.tid, a.tid) };
            let predicate = predicates[rng.random_range(0..predicates.len())].clone();
            let rel = RelationInstance {
                subject_tid: s,
                object_tid: o,
                predicate,
                begin_fid: begin,
                end_fid: end,
                score: None,
            };
            if rng.random_bool(opts.relation_prob) {
                relations.push(rel);
            } else {
                candidates.push(rel);
            }
        }
    }
    if relations.is_empty() {
        if let Some(first) = candidates.into_iter().next() {
            relations.push(first);
        }
    }
    VideoAnnotation {
        video_id: video_id.to_string(),
        frame_count: frames,
        width: opts.width,
        height: opts.height,
        tracklets,
        relations,
    }
    .validated()
}

/// Generates `n_videos` videos named `syn0000`, `syn0001`, ...
pub fn generate_videos(seed: u64, n_videos: usize, vocab: &VocabularySplit, opts: &SyntheticOptions) -> Result<Vec<VideoAnnotation>> {
    vocab.validate()?;
    if opts.tracklets_per_video < 2 || opts.min_frames < 2 || opts.min_frames > opts.max_frames {
        return Err(Error::Argument(format!("invalid synthetic options {opts:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_videos)
        .map(|i| generate_video(&mut rng, &format!("syn{i:04}"), vocab, opts))
        .collect()
}

/// Paths of a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub annotations: PathBuf,
    pub vocab: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: &Path) -> Self {
        DatasetPaths {
            root: root.to_path_buf(),
            annotations: root.join("annotations"),
            vocab: root.join("vocab.json"),
        }
    }
}

/// Writes `vocab.json` and `annotations/<video_id>.json` under `out`.
pub fn gen_synthetic(seed: u64, n_videos: usize, vocab: &VocabularySplit, opts: &SyntheticOptions, out: &Path) -> Result<DatasetPaths> {
    let videos = generate_videos(seed, n_videos, vocab, opts)?;
    let paths = DatasetPaths::new(out);
    std::fs::create_dir_all(&paths.annotations).map_err(|e| Error::io(&paths.annotations, e))?;
    save_vocabulary(vocab, &paths.vocab)?;
    for v in &videos {
        save_annotations(v, &paths.annotations.join(format!("{}.json", v.video_id)))?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_annotation_dir;

    #[test]
    fn deterministic_and_valid() {
        let vocab = demo_vocabulary();
        let opts = SyntheticOptions::default();
        let a = generate_videos(3, 6, &vocab, &opts).unwrap();
        let b = generate_videos(3, 6, &vocab, &opts).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_videos(4, 6, &vocab, &opts).unwrap());
        for v in &a {
            v.validate().unwrap();
            assert!(!v.relations.is_empty());
            for r in &v.relations {
                assert!(vocab.predicates_base.contains(&r.predicate));
            }
            let cats: std::collections::BTreeSet<_> = v.tracklets.iter().map(|t| t.category.clone()).collect();
            assert_eq!(cats.len(), v.tracklets.len());
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = demo_vocabulary();
        let paths = gen_synthetic(1, 3, &vocab, &SyntheticOptions::default(), dir.path()).unwrap();
        let loaded = load_annotation_dir(&paths.annotations).unwrap();
        assert_eq!(loaded, generate_videos(1, 3, &vocab, &SyntheticOptions::default()).unwrap());
    }
}
