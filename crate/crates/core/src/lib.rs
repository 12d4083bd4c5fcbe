//! Open-vocabulary video visual relation detection.
//!
//! Relations between pairs of object tracklets are scored by comparing
//! refined visual features against learned text prompts, so predicates and
//! objects never seen during training can still be recognized. See the guide
//! under `book/` for a walk-through; its listings run as doc tests.

pub mod autograd;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod nn;
pub mod ov_tracklet;
pub mod st_refiner;
pub mod vt_aggregation;
pub mod prompt_align;
pub mod model;
pub mod objectives;
pub mod evaluation;
pub mod train;
pub mod infer;
pub mod synthetic;
pub mod pipeline;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/tracklets.md")]
    mod tracklets {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
