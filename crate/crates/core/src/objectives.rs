//! Training losses: object/subject classification, relation BCE,
//! interaction BCE and their weighted sum.

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

/// Probability floor inside logarithms.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_obj_sub: f64,
    pub l_rel: f64,
    pub l_int: f64,
    pub total: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LossBreakdown {
    pub fn new(l_obj_sub: f64, l_rel: f64, l_int: f64, gamma: f64, delta: f64) -> Self {
        LossBreakdown {
            l_obj_sub,
            l_rel,
            l_int,
            total: gamma * l_obj_sub + l_rel + delta * l_int,
            gamma,
            delta,
        }
    }
}

fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::Shape(format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Argument(format!("target index {t} out of range for {classes} classes")));
    }
    Ok(())
}

/// Sum over rows of softmax cross-entropy, `[1, 1]`.
fn cross_entropy_sum(g: &Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (rows, classes) = g.shape(logits);
    check_targets(targets, rows, classes)?;
    let at: Vec<(usize, usize)> = targets.iter().enumerate().map(|(r, &c)| (r, c)).collect();
    Ok(g.scale(g.sum(g.select(g.log_softmax_rows(logits), &at)), -1.0))
}

/// `CE(subject) + CE(object)` averaged over the pairs (rows) of the batch.
pub fn loss_obj_sub(g: &Graph, logits_s: Var, logits_o: Var, y_s: &[usize], y_o: &[usize]) -> Result<Var> {
    let pairs = g.shape(logits_s).0;
    if pairs == 0 || g.shape(logits_o).0 != pairs {
        return Err(Error::Shape("subject and object logits need the same non-zero row count".into()));
    }
    let s = cross_entropy_sum(g, logits_s, y_s)?;
    let o = cross_entropy_sum(g, logits_o, y_o)?;
    Ok(g.scale(g.add(o, s), 1.0 / pairs as f64))
}

fn guard_probs(g: &Graph, probs: Var, what: &str) -> Result<()> {
    if let Some(p) = g.value(probs).iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Numerical(format!("{what} probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Mean binary cross-entropy over every entry of `probs`.
fn bce_mean(g: &Graph, probs: Var, targets: &Mat) -> Result<Var> {
    if g.shape(probs) != targets.dim() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs targets {:?}",
            g.shape(probs),
            targets.dim()
        )));
    }
    let n = targets.len() as f64;
    let y = g.leaf(targets.clone());
    let not_y = g.leaf(targets.mapv(|v| 1.0 - v));
    let log_p = g.log_clamped(probs, LOG_EPS);
    let log_q = g.log_clamped(g.add_const(g.scale(probs, -1.0), 1.0), LOG_EPS);
    let ll = g.add(g.sum(g.mul(y, log_p)), g.sum(g.mul(not_y, log_q)));
    Ok(g.scale(ll, -1.0 / n))
}

/// Relation loss: BCE averaged over the scored (base) predicate classes and
/// over pairs. `scores` and `y_rel` are `[P, |C_b|]`.
pub fn loss_rel(g: &Graph, scores: Var, y_rel: &Mat) -> Result<Var> {
    if y_rel.ncols() == 0 {
        return Err(Error::Argument("no predicate classes to score".into()));
    }
    guard_probs(g, scores, "relation")?;
    bce_mean(g, scores, y_rel)
}

/// Interaction loss: per-frame BCE averaged over frames (and pairs).
/// `probs` and `y_int` are `[frames, 1]`.
pub fn loss_int(g: &Graph, probs: Var, y_int: &Mat) -> Result<Var> {
    if y_int.is_empty() {
        return Err(Error::Argument("empty interaction span".into()));
    }
    guard_probs(g, probs, "interaction")?;
    bce_mean(g, probs, y_int)
}

/// `gamma * l_obj_sub + l_rel + delta * l_int`.
pub fn total_loss(g: &Graph, l_obj_sub: Var, l_rel: Var, l_int: Var, gamma: f64, delta: f64) -> Result<(Var, LossBreakdown)> {
    if !(gamma >= 0.0 && delta >= 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative (gamma={gamma}, delta={delta})")));
    }
    let total = g.add(g.add(g.scale(l_obj_sub, gamma), l_rel), g.scale(l_int, delta));
    let breakdown = LossBreakdown::new(g.scalar(l_obj_sub), g.scalar(l_rel), g.scalar(l_int), gamma, delta);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::f64::consts::LN_2;

    #[test]
    fn uniform_two_class_ce() {
        let g = Graph::new();
        let z = g.leaf(array![[0.3, 0.3]]);
        let l = loss_obj_sub(&g, z, z, &[0], &[1]).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 2.0 * LN_2, epsilon = 1e-12);
        assert!(loss_obj_sub(&g, z, z, &[2], &[0]).is_err());
    }

    #[test]
    fn confident_ce_vanishes() {
        let g = Graph::new();
        let z = g.leaf(array![[200.0, 0.0, 0.0]]);
        let l = loss_obj_sub(&g, z, z, &[0], &[0]).unwrap();
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let z0 = array![[0.2, -1.0, 0.7], [1.5, 0.1, -0.3]];
        let f = |z: &Mat| {
            let g = Graph::new();
            let s = g.leaf(z.clone());
            let o = g.leaf(array![[0.4, 0.0, -0.2], [1.0, -1.0, 0.5]]);
            let l = loss_obj_sub(&g, s, o, &[2, 0], &[1, 1]).unwrap();
            (g.scalar(l), g.backward(l).wrt(s).unwrap().clone())
        };
        let (_, analytic) = f(&z0);
        for idx in 0..6 {
            let h = 1e-6;
            let mut p = z0.clone();
            let mut m = z0.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (f(&p).0 - f(&m).0) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()) + 1e-10);
        }
    }

    #[test]
    fn relation_bce_examples() {
        let g = Graph::new();
        let l = loss_rel(&g, g.leaf(array![[0.5]]), &array![[1.0]]).unwrap();
        assert_abs_diff_eq!(g.scalar(l), LN_2, epsilon = 1e-12);
        let perfect = loss_rel(&g, g.leaf(array![[1.0, 1e-300]]), &array![[1.0, 0.0]]).unwrap();
        assert!(g.scalar(perfect) < 1e-6);
        assert!(matches!(
            loss_rel(&g, g.leaf(array![[1.2]]), &array![[1.0]]),
            Err(Error::Numerical(_))
        ));
        assert!(loss_rel(&g, g.leaf(array![[f64::NAN]]), &array![[1.0]]).is_err());
    }

    #[test]
    fn interaction_examples() {
        let g = Graph::new();
        let l = loss_int(&g, g.leaf(array![[1.0], [1.0]]), &array![[1.0], [1.0]]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let l = loss_int(&g, g.leaf(array![[0.5]]), &array![[0.0]]).unwrap();
        assert_abs_diff_eq!(g.scalar(l), LN_2, epsilon = 1e-12);
        let a = g.scalar(loss_int(&g, g.leaf(array![[0.9]]), &array![[1.0]]).unwrap());
        let b = g.scalar(loss_int(&g, g.leaf(array![[0.3]]), &array![[1.0]]).unwrap());
        let both = g.scalar(loss_int(&g, g.leaf(array![[0.9], [0.3]]), &array![[1.0], [1.0]]).unwrap());
        assert_abs_diff_eq!(both, (a + b) / 2.0, epsilon = 1e-15);
        assert!(loss_int(&g, g.leaf(Mat::zeros((0, 1))), &Mat::zeros((0, 1))).is_err());
    }

    #[test]
    fn weighted_total() {
        let g = Graph::new();
        let (a, b, c) = (g.constant(0.5), g.constant(0.25), g.constant(0.25));
        let (t, br) = total_loss(&g, a, b, c, 1.0, 1.0).unwrap();
        assert_eq!(g.scalar(t), 1.0);
        assert_eq!(br.total, 1.0);
        let (t, _) = total_loss(&g, a, b, c, 0.0, 0.0).unwrap();
        assert_eq!(g.scalar(t), 0.25);
        assert!(matches!(total_loss(&g, a, b, c, -1.0, 0.0), Err(Error::Config(_))));
    }
}
