//! Open-vocabulary tracklet classification and pairwise motion descriptors.

use ndarray::{Array1, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::data::{union_box, BBox, Tracklet};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Width of the raw motion descriptor.
pub const MOTION_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryDistribution {
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
}

impl CategoryDistribution {
    /// Index and probability of the most likely label; ties go to the
    /// earlier label.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        (best, self.probs[best])
    }

    pub fn top_label(&self) -> &str {
        &self.labels[self.argmax().0]
    }
}

/// Temperature softmax over `cos(v, t_c) / tau`.
pub fn softmax_with_temperature(cosines: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    if cosines.is_empty() {
        return Err(Error::Argument("no categories to classify over".into()));
    }
    let logits: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Classifies a visual embedding against one text embedding per label.
pub fn classify_tracklet(
    v: &Array1<f64>,
    text_embs: ArrayView2<f64>,
    labels: &[String],
    tau: f64,
) -> Result<CategoryDistribution> {
    if text_embs.nrows() != labels.len() || text_embs.ncols() != v.len() {
        return Err(Error::Shape(format!(
            "text embeddings [{}, {}] vs {} labels of dim {}",
            text_embs.nrows(),
            text_embs.ncols(),
            labels.len(),
            v.len()
        )));
    }
    let cosines: Vec<f64> = text_embs.rows().into_iter().map(|t| t.dot(v)).collect();
    Ok(CategoryDistribution {
        labels: labels.to_vec(),
        probs: softmax_with_temperature(&cosines, tau)?,
    })
}

fn center_velocity(t: &Tracklet, fid: usize, begin: usize, end: usize) -> (f64, f64) {
    let c = |f: usize| t.box_at(f).expect("frame inside common span").center();
    let (a, b) = if fid > begin {
        (fid - 1, fid)
    } else if fid + 1 < end {
        (fid, fid + 1)
    } else {
        return (0.0, 0.0);
    };
    let (ca, cb) = (c(a), c(b));
    (cb.0 - ca.0, cb.1 - ca.1)
}

/// Raw per-frame motion descriptor of a subject/object pair, one row per
/// sampled frame:
/// `[dcx/w_u, dcy/h_u, ln(w_s/w_o), ln(h_s/h_o), vx_s - vx_o, vy_s - vy_o, IoU, i/T]`.
///
/// Offsets point from subject to object; velocities are first differences of
/// box centers (forward difference on the first frame of the common span),
/// and offsets and velocities are divided by the union box size.
pub fn motion_features(sub: &Tracklet, obj: &Tracklet, frames: &[usize]) -> Result<Mat> {
    let (begin, end) = sub.overlap(obj).ok_or_else(|| {
        Error::Argument(format!("tracklets {} and {} never co-occur", sub.tid, obj.tid))
    })?;
    if frames.is_empty() {
        return Err(Error::Argument("no sampled frames".into()));
    }
    let n = frames.len() as f64;
    let mut out = Mat::zeros((frames.len(), MOTION_DIM));
    for (i, &fid) in frames.iter().enumerate() {
        if fid < begin || fid >= end {
            return Err(Error::Argument(format!(
                "frame {fid} outside common span [{begin}, {end})"
            )));
        }
        let (bs, bo): (&BBox, &BBox) = (sub.box_at(fid).unwrap(), obj.box_at(fid).unwrap());
        let u = union_box(bs, bo);
        let (wu, hu) = (u.width(), u.height());
        let (cs, co) = (bs.center(), bo.center());
        let (vs, vo) = (
            center_velocity(sub, fid, begin, end),
            center_velocity(obj, fid, begin, end),
        );
        let row = [
            (co.0 - cs.0) / wu,
            (co.1 - cs.1) / hu,
            (bs.width() / bo.width()).ln(),
            (bs.height() / bo.height()).ln(),
            (vs.0 - vo.0) / wu,
            (vs.1 - vo.1) / hu,
            bs.iou(bo),
            i as f64 / n,
        ];
        out.row_mut(i).assign(&Array1::from(row.to_vec()));
    }
    Ok(out)
}

/// The learnable motion map: `GELU(linear(m_t))`, `MOTION_DIM -> d`.
#[derive(Clone, Debug)]
pub struct MotionProjection {
    pub linear: Linear,
}

impl MotionProjection {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        MotionProjection {
            linear: Linear::new(store, "motion", rng, MOTION_DIM, d),
        }
    }

    pub fn forward(&self, g: &Graph, raw: Var) -> Var {
        g.gelu(self.linear.forward(g, raw))
    }
}
