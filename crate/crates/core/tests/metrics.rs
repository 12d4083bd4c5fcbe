mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ovvrd::data::{BBox, PredictionSet, RelationPrediction, VideoAnnotation};
use ovvrd::evaluation::{evaluate, ground_truth, match_predictions, viou, Split, Task, Trajectory, MATCH_THRESHOLD};

fn fixtures(seed: u64, n: usize) -> (Vec<VideoAnnotation>, Vec<PredictionSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| metric_fixture(&mut rng, &format!("v{i}"))).unzip()
}

fn verbatim(video: &VideoAnnotation) -> PredictionSet {
    let preds = ground_truth(video)
        .into_iter()
        .map(|g| RelationPrediction {
            end_fid: g.begin_fid + g.sub_traj.len(),
            triplet: g.triplet,
            score: 0.9,
            begin_fid: g.begin_fid,
            sub_traj: g.sub_traj,
            obj_traj: g.obj_traj,
            sub_tid: None,
            obj_tid: None,
        })
        .collect();
    PredictionSet::ranked(video.video_id.clone(), preds)
}

#[test]
fn five_video_fixture_matches_brute_force() {
    let vocab = metric_vocab();
    let (videos, preds) = fixtures(5, 5);
    for task in Task::ALL {
        for split in [Split::All, Split::Novel] {
            let got = evaluate(&preds, &videos, &vocab, task, split);
            let want = oracle_evaluate(&preds, &videos, &vocab, task, split);
            assert!(exactly_equal(got.map, want.map), "{task:?} {split:?}");
            assert!(exactly_equal(got.r50, want.r50));
            assert!(exactly_equal(got.r100, want.r100));
        }
    }
}

#[test]
fn ground_truth_as_predictions_is_perfect() {
    let vocab = metric_vocab();
    let (videos, _) = fixtures(8, 6);
    let preds: Vec<_> = videos.iter().map(verbatim).collect();
    for task in Task::ALL {
        let r = evaluate(&preds, &videos, &vocab, task, Split::All);
        assert_eq!((r.map, r.r50, r.r100), (Some(1.0), Some(1.0), Some(1.0)));
    }
}

#[test]
fn novel_split_without_novel_ground_truth_is_flagged() {
    let vocab = metric_vocab();
    let (mut videos, _) = fixtures(9, 3);
    for v in &mut videos {
        v.relations.retain(|r| !vocab.is_novel_predicate(&r.predicate));
    }
    let preds: Vec<_> = videos.iter().map(verbatim).collect();
    let r = evaluate(&preds, &videos, &vocab, Task::PredCls, Split::Novel);
    assert!(r.empty_split);
    assert_eq!((r.map, r.r50, r.r100), (None, None, None));
}

#[test]
fn two_predictions_for_one_relation_match_once() {
    let vocab = metric_vocab();
    let (videos, _) = fixtures(21, 8);
    let video = videos.iter().find(|v| v.relations.len() == 1).expect("fixture with one relation");
    let mut set = verbatim(video);
    let mut second = set.predictions[0].clone();
    second.score = 0.5;
    set.predictions.push(second);
    let gts = ground_truth(video);
    let m = match_predictions(&set.predictions, &gts, Some(video), Task::SgDet, MATCH_THRESHOLD);
    assert_eq!(m, vec![Some(0), None]);
    let r = evaluate(&[set], std::slice::from_ref(video), &vocab, Task::SgDet, Split::All);
    assert_eq!(r.r50, Some(1.0));
    assert_eq!(r.map, Some(1.0));
}

#[test]
fn unknown_videos_are_skipped_and_reported() {
    let vocab = metric_vocab();
    let (videos, mut preds) = fixtures(3, 2);
    preds.push(PredictionSet::ranked("ghost", Vec::new()));
    let r = evaluate(&preds, &videos, &vocab, Task::SgCls, Split::All);
    assert_eq!(r.skipped_videos, vec!["ghost".to_string()]);
    assert_eq!(r.n_videos, 2);
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..40.0f64, 1.0..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn evaluation_agrees_with_oracle(seed in any::<u64>(), n in 1usize..4) {
        let vocab = metric_vocab();
        let (videos, preds) = fixtures(seed, n);
        for task in Task::ALL {
            for split in [Split::All, Split::Novel] {
                let got = evaluate(&preds, &videos, &vocab, task, split);
                let want = oracle_evaluate(&preds, &videos, &vocab, task, split);
                prop_assert!(exactly_equal(got.map, want.map));
                prop_assert!(exactly_equal(got.r50, want.r50));
                prop_assert!(exactly_equal(got.r100, want.r100));
                if let (Some(a), Some(b)) = (got.r50, got.r100) {
                    prop_assert!(a <= b);
                }
            }
        }
    }

    #[test]
    fn evaluation_ignores_video_order(seed in any::<u64>()) {
        let vocab = metric_vocab();
        let (videos, preds) = fixtures(seed, 3);
        let a = evaluate(&preds, &videos, &vocab, Task::SgDet, Split::All);
        let rv: Vec<_> = videos.iter().rev().cloned().collect();
        let rp: Vec<_> = preds.iter().rev().cloned().collect();
        let b = evaluate(&rp, &rv, &vocab, Task::SgDet, Split::All);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn viou_is_symmetric_and_bounded(
        a in prop::collection::vec(arb_box(), 1..6),
        b in prop::collection::vec(arb_box(), 1..6),
        sa in 0usize..4,
        sb in 0usize..4,
    ) {
        let x = viou(Trajectory::new(sa, &a), Trajectory::new(sb, &b));
        let y = viou(Trajectory::new(sb, &b), Trajectory::new(sa, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - oracle_viou(sa, &a, sb, &b)).abs() < 1e-12);
        prop_assert_eq!(viou(Trajectory::new(sa, &a), Trajectory::new(sa, &a)), 1.0);
    }
}
