//! Class-weighted cross entropy over the bag-level probabilities.
//!
//! Only the true-class entry of the probability vector enters the loss (and
//! its complement in the binary sigmoid case); the pooled I-1 probabilities
//! are consumed as-is without renormalization.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-12;

/// Positive per-class weights; length 2 for the binary sigmoid head (indexed
/// by the binary label), length C otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(n: usize) -> ClassWeights {
        ClassWeights { w: vec![1.0; n] }
    }

    /// Inverse-frequency balancing: w_c = total / (n_classes * count_c).
    pub fn from_counts(counts: &[u64]) -> Result<ClassWeights> {
        if counts.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(
                "class weights require every class count >= 1".into(),
            ));
        }
        let total: u64 = counts.iter().sum();
        let c = counts.len() as f64;
        Ok(ClassWeights {
            w: counts
                .iter()
                .map(|&n| total as f64 / (c * n as f64))
                .collect(),
        })
    }
}

/// Record the weighted cross-entropy loss of a bag on the graph.
///
/// `probs` is the length-C probability node from a forward pass; `classes`
/// is the head's class count (1 for the binary sigmoid case, where `weights`
/// has two entries indexed by the binary label).
pub fn weighted_ce(
    graph: &mut Graph,
    probs: Var,
    label: usize,
    weights: &ClassWeights,
    classes: usize,
) -> Result<Var> {
    if classes == 1 {
        if label > 1 {
            return Err(Error::InvalidArgument(format!(
                "binary label {label} out of range"
            )));
        }
        if weights.w.len() != 2 {
            return Err(Error::InvalidArgument(
                "binary head needs 2 class weights".into(),
            ));
        }
        let p = graph.clamp(probs, PROB_EPS, 1.0);
        let log_p = graph.log(p)?;
        let pos = graph.scale(log_p, -(weights.w[1] * label as f64));
        let neg_p = graph.neg(probs);
        let one_minus = graph.add_scalar(neg_p, 1.0);
        let one_minus = graph.clamp(one_minus, PROB_EPS, 1.0);
        let log_q = graph.log(one_minus)?;
        let neg_term = graph.scale(log_q, -(weights.w[0] * (1.0 - label as f64)));
        graph.add(pos, neg_term)
    } else {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        if weights.w.len() != classes {
            return Err(Error::InvalidArgument(
                "class weight count does not match classes".into(),
            ));
        }
        let mut one_hot = vec![0.0; classes];
        one_hot[label] = 1.0;
        let mask = graph.leaf(Tensor::vector(one_hot));
        let picked = graph.mul(probs, mask)?;
        let p_true = graph.sum(picked);
        let clamped = graph.clamp(p_true, PROB_EPS, 1.0);
        let log_p = graph.log(clamped)?;
        Ok(graph.scale(log_p, -weights.w[label]))
    }
}

/// Evaluate the loss outside a training graph.
pub fn weighted_ce_value(
    probs: &[f64],
    label: usize,
    weights: &ClassWeights,
    classes: usize,
) -> Result<f64> {
    let mut graph = Graph::new();
    let p = graph.leaf(Tensor::vector(probs.to_vec()));
    let loss = weighted_ce(&mut graph, p, label, weights, classes)?;
    Ok(graph.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use crate::head::{forward, MilConfig, MilOrdering, Pooling};
    use crate::rng::RandomStream;

    #[test]
    fn weights_from_isic_binary_counts() {
        // MEL 3611, NV 10293
        let w = ClassWeights::from_counts(&[3611, 10293]).unwrap();
        let total = 13904.0;
        assert!((w.w[0] - total / (2.0 * 3611.0)).abs() <= 1e-12);
        assert!((w.w[1] - total / (2.0 * 10293.0)).abs() <= 1e-12);
        assert!((w.w[1] - 0.675410).abs() < 1e-6);
    }

    #[test]
    fn equal_counts_give_unit_weights() {
        let w = ClassWeights::from_counts(&[50, 50, 50]).unwrap();
        assert!(w.w.iter().all(|&x| (x - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn weighted_mean_of_weights_is_one() {
        let counts = [7u64, 19, 3, 42];
        let w = ClassWeights::from_counts(&counts).unwrap();
        let total: u64 = counts.iter().sum();
        let mean: f64 = counts
            .iter()
            .zip(&w.w)
            .map(|(&n, &wc)| n as f64 / total as f64 * wc)
            .sum();
        assert!((mean - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_count_rejected() {
        assert!(ClassWeights::from_counts(&[1, 0]).is_err());
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let w = ClassWeights::uniform(3);
        let loss = weighted_ce_value(&[0.0, 1.0, 0.0], 1, &w, 3).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn half_probability_gives_ln2() {
        let w = ClassWeights::uniform(2);
        let loss = weighted_ce_value(&[0.5, 0.5], 0, &w, 2).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn binary_weighted_case() {
        // p = 0.2, y = 1, w = [1, 2] -> -2 ln 0.2
        let w = ClassWeights { w: vec![1.0, 2.0] };
        let loss = weighted_ce_value(&[0.2], 1, &w, 1).unwrap();
        assert!((loss - (-2.0 * 0.2f64.ln())).abs() <= 1e-12);
        assert!((loss - 3.21888).abs() < 1e-5);
    }

    #[test]
    fn loss_nonnegative_and_matches_unweighted() {
        let mut rng = RandomStream::new(3);
        for _ in 0..100 {
            let p = rng.next_f64();
            let w = ClassWeights::uniform(2);
            let loss = weighted_ce_value(&[p], usize::from(rng.next_f64() < 0.5), &w, 1).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let w = ClassWeights::uniform(3);
        assert!(weighted_ce_value(&[0.2, 0.3, 0.5], 3, &w, 3).is_err());
        let wb = ClassWeights::uniform(2);
        assert!(weighted_ce_value(&[0.2], 2, &wb, 1).is_err());
    }

    #[test]
    fn saturated_prediction_stays_finite() {
        let w = ClassWeights::uniform(2);
        let loss = weighted_ce_value(&[0.0], 1, &w, 1).unwrap();
        assert!(loss.is_finite());
        let loss = weighted_ce_value(&[1.0], 0, &w, 1).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn loss_gradients_through_every_ordering() {
        let mut rng = RandomStream::new(19);
        for ordering in [MilOrdering::I1, MilOrdering::I2, MilOrdering::E] {
            for classes in [1usize, 3] {
                let cfg = MilConfig {
                    ordering,
                    pooling: Pooling::Topk,
                    k_fraction: 0.5,
                    classes,
                    embed_dim: 4,
                };
                let z = rng.uniform_tensor(-1.0, 1.0, &[5, 4]).unwrap();
                let w = rng.uniform_tensor(-1.0, 1.0, &[classes, 4]).unwrap();
                let b = rng.uniform_tensor(-0.5, 0.5, &[classes]).unwrap();
                let weights = ClassWeights::uniform(classes.max(2));
                let label = 0usize;
                let cfg2 = cfg.clone();
                let weights2 = weights.clone();
                let err = grad_check(
                    move |g, vars| {
                        let (probs, _, _) = forward(g, vars[1], vars[0], vars[2], &cfg2)?;
                        weighted_ce(g, probs, label, &weights2, cfg2.classes)
                    },
                    &[w, z, b],
                    1e-5,
                )
                .unwrap();
                assert!(err <= 1e-6, "{ordering:?} C={classes} err {err}");
            }
        }
    }
}
