//! Training objectives: labeled cross-entropy, confidence-weighted
//! pseudo-label cross-entropy, and the teacher–student consistency KL.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Added inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

fn check_rows(g: &Graph, probs: Var, labels: &[usize], op: &'static str) -> Result<(), TensorError> {
    let shape = g.value(probs).shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("expected [{}, K] probabilities", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(TensorError::InvalidArgument(format!(
            "{op}: label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    Ok(())
}

fn log_probs(g: &mut Graph, probs: Var) -> Result<Var, TensorError> {
    let shifted = g.add_scalar(probs, LOG_EPS)?;
    g.log(shifted)
}

/// `-mean_i log(p_i[y_i] + eps)`.
pub fn labeled_ce(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var, TensorError> {
    check_rows(g, probs, labels, "labeled_ce")?;
    let picked = g.gather(probs, labels)?;
    let logs = log_probs(g, picked)?;
    let m = g.mean(logs)?;
    g.scale(m, -1.0)
}

/// `-mean_i w_i log(p_i[y_i] + eps)` with `w_i = p_i[y_i]` held constant.
pub fn weighted_ce(g: &mut Graph, probs: Var, pseudo_labels: &[usize]) -> Result<Var, TensorError> {
    check_rows(g, probs, pseudo_labels, "weighted_ce")?;
    let picked = g.gather(probs, pseudo_labels)?;
    let weights = g.detach(picked)?;
    let logs = log_probs(g, picked)?;
    let weighted = g.mul(weights, logs)?;
    let m = g.mean(weighted)?;
    g.scale(m, -1.0)
}

/// [`weighted_ce`] with the weights supplied as plain numbers.
pub fn weighted_ce_fixed(g: &mut Graph, probs: Var, pseudo_labels: &[usize], weights: &[f64]) -> Result<Var, TensorError> {
    check_rows(g, probs, pseudo_labels, "weighted_ce")?;
    if weights.len() != pseudo_labels.len() {
        return Err(TensorError::LengthMismatch {
            shape: vec![pseudo_labels.len()],
            expected: pseudo_labels.len(),
            actual: weights.len(),
        });
    }
    let picked = g.gather(probs, pseudo_labels)?;
    let w = g.constant(Tensor::from_vec(weights.to_vec())?)?;
    let logs = log_probs(g, picked)?;
    let weighted = g.mul(w, logs)?;
    let m = g.mean(weighted)?;
    g.scale(m, -1.0)
}

/// `mean_i KL(a_i || s_i)` where the assistant rows `a` carry no gradient.
pub fn pair_kl(g: &mut Graph, assistant: Var, student: Var) -> Result<Var, TensorError> {
    let (sa, ss) = (g.value(assistant).shape(), g.value(student).shape());
    if sa != ss || sa.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "pair_kl",
            lhs: sa.to_vec(),
            rhs: ss.to_vec(),
        });
    }
    if g.requires_grad(assistant) {
        return Err(TensorError::InvalidArgument(
            "pair_kl: assistant probabilities must be detached".into(),
        ));
    }
    let log_a = log_probs(g, assistant)?;
    let log_s = log_probs(g, student)?;
    let diff = g.sub(log_a, log_s)?;
    let terms = g.mul(assistant, diff)?;
    let per_row = g.sum_last_axis(terms)?;
    g.mean(per_row)
}

/// Ramp-up weight `2 / (1 + exp(-m t)) - 1`; `t` is clamped to `[0, 1]`.
pub fn lambda_rampup(t: f64, m: f64) -> f64 {
    let clamped = t.clamp(0.0, 1.0);
    if clamped != t {
        log::warn!("ramp-up progress {t} clamped to {clamped}");
    }
    2.0 / (1.0 + libm::exp(-m * clamped)) - 1.0
}

/// Scalar values of every term of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_lab")]
    pub labeled: f64,
    #[serde(rename = "L_unl")]
    pub unlabeled: f64,
    #[serde(rename = "L_pair")]
    pub pair: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `L_lab + L_unl + lambda * L_pair`; absent terms count as zero.
///
/// Passing `pair = None` gives the variant without assistant feedback.
pub fn total_loss(
    g: &mut Graph,
    labeled: Var,
    unlabeled: Option<Var>,
    pair: Option<Var>,
    lambda: f64,
) -> Result<(Var, LossBreakdown), TensorError> {
    let scalar = |g: &Graph, v: Option<Var>| v.map_or(Ok(0.0), |v| g.value(v).item());
    let mut breakdown = LossBreakdown {
        labeled: g.value(labeled).item()?,
        unlabeled: scalar(g, unlabeled)?,
        pair: scalar(g, pair)?,
        lambda,
        total: 0.0,
    };
    let mut total = labeled;
    if let Some(u) = unlabeled {
        total = g.add(total, u)?;
    }
    if let Some(p) = pair {
        let weighted = g.scale(p, lambda)?;
        total = g.add(total, weighted)?;
    }
    breakdown.total = g.value(total).item()?;
    Ok((total, breakdown))
}

/// Scalar zero node, used when a batch has no labeled rows.
pub fn zero_loss(g: &mut Graph) -> Result<Var, TensorError> {
    g.constant(Tensor::scalar(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(g: &mut Graph, rows: usize, data: &[f64]) -> Var {
        let k = data.len() / rows;
        g.leaf(Tensor::new(vec![rows, k], data.to_vec()).unwrap(), true).unwrap()
    }

    #[test]
    fn ce_hand_example() {
        let mut g = Graph::new();
        let p = probs(&mut g, 1, &[0.25, 0.75]);
        let l = labeled_ce(&mut g, p, &[1]).unwrap();
        assert!((g.value(l).item().unwrap() - (-(0.75f64 + LOG_EPS).ln())).abs() < 1e-12);
    }

    #[test]
    fn ce_reference_values() {
        let mut g = Graph::new();
        let p = probs(&mut g, 2, &[0.0, 1.0, 0.5, 0.5]);
        let l = labeled_ce(&mut g, p, &[1, 0]).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2 / 2.0).abs() < 1e-11);

        let q = probs(&mut g, 1, &[0.9, 0.1]);
        let w = weighted_ce(&mut g, q, &[0]).unwrap();
        assert!((g.value(w).item().unwrap() - 0.094_824).abs() < 1e-6);
        let h = probs(&mut g, 1, &[0.5, 0.5]);
        let w = weighted_ce(&mut g, h, &[1]).unwrap();
        let u = labeled_ce(&mut g, h, &[1]).unwrap();
        assert!((g.value(w).item().unwrap() - 0.5 * g.value(u).item().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let mut g = Graph::new();
        let p = probs(&mut g, 1, &[0.5, 0.5]);
        assert!(labeled_ce(&mut g, p, &[2]).is_err());
        assert!(labeled_ce(&mut g, p, &[0, 1]).is_err());
    }

    #[test]
    fn weight_is_not_differentiated() {
        // with w frozen the derivative is -w / (p + eps) per picked entry, over B
        let mut g = Graph::new();
        let p = probs(&mut g, 2, &[0.2, 0.8, 0.6, 0.4]);
        let l = weighted_ce(&mut g, p, &[1, 0]).unwrap();
        let expected = -(0.8 * (0.8f64 + LOG_EPS).ln() + 0.6 * (0.6f64 + LOG_EPS).ln()) / 2.0;
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        let gp = grads.get(p).unwrap();
        let want = [0.0, -0.8 / (0.8 + LOG_EPS) / 2.0, -0.6 / (0.6 + LOG_EPS) / 2.0, 0.0];
        for (a, b) in gp.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn kl_vanishes_for_identical_rows() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap()).unwrap();
        let s = probs(&mut g, 1, &[0.2, 0.3, 0.5]);
        let kl = pair_kl(&mut g, a, s).unwrap();
        assert!(g.value(kl).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()).unwrap();
        let s = probs(&mut g, 1, &[0.25, 0.75]);
        let kl = pair_kl(&mut g, a, s).unwrap();
        let want = 0.5 * (4.0f64 / 3.0).ln();
        assert!((g.value(kl).item().unwrap() - want).abs() < 1e-10);
        assert!((want - 0.143_841).abs() < 1e-6);
    }

    #[test]
    fn kl_requires_detached_assistant() {
        let mut g = Graph::new();
        let a = probs(&mut g, 1, &[0.5, 0.5]);
        let s = probs(&mut g, 1, &[0.5, 0.5]);
        assert!(pair_kl(&mut g, a, s).is_err());
        let b = g.constant(Tensor::full(&[2, 2], 0.5)).unwrap();
        assert!(matches!(pair_kl(&mut g, b, s), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn rampup_values() {
        assert_eq!(lambda_rampup(0.0, 8.0), 0.0);
        assert!((lambda_rampup(1.0, 8.0) - 0.999_329).abs() < 1e-6);
        assert!((lambda_rampup(0.5, 8.0) - 0.964_028).abs() < 1e-6);
        assert_eq!(lambda_rampup(-0.5, 8.0), 0.0);
        assert_eq!(lambda_rampup(2.0, 8.0), lambda_rampup(1.0, 8.0));
    }

    #[test]
    fn total_combines_terms() {
        let mut g = Graph::new();
        let lab = g.leaf(Tensor::scalar(0.5), true).unwrap();
        let unl = g.leaf(Tensor::scalar(0.1), true).unwrap();
        let pair = g.leaf(Tensor::scalar(0.2), true).unwrap();
        let (t, b) = total_loss(&mut g, lab, Some(unl), Some(pair), 0.5).unwrap();
        assert!((g.value(t).item().unwrap() - 0.7).abs() < 1e-15);
        assert_eq!((b.labeled, b.unlabeled, b.pair), (0.5, 0.1, 0.2));

        let (t, _) = total_loss(&mut g, lab, Some(unl), Some(pair), 0.0).unwrap();
        assert!((g.value(t).item().unwrap() - 0.6).abs() < 1e-15);

        let (t, b) = total_loss(&mut g, lab, None, None, 0.5).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 0.5);
        assert_eq!((b.unlabeled, b.pair), (0.0, 0.0));
    }
}
