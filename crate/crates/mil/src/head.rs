//! The MIL classification block: linear projection `h`, permutation-invariant
//! top-k pooling `phi`, and activation `sigma`, composable in three orders.
//!
//! I-1 activates per-patch scores before pooling, I-2 pools logits and then
//! activates, and E pools the patch representations column-wise before the
//! linear head. With k = 1 the pooling is max, with k = bag size it is the
//! average, so the embedding-level average case degenerates to global average
//! pooling followed by a linear classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MilOrdering {
    I1,
    I2,
    E,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Topk,
    Average,
}

/// Full configuration of the MIL head. `classes == 1` encodes the binary
/// sigmoid case; `classes >= 2` uses row softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilConfig {
    pub ordering: MilOrdering,
    pub pooling: Pooling,
    #[serde(default = "default_k_fraction")]
    pub k_fraction: f64,
    pub classes: usize,
    pub embed_dim: usize,
}

fn default_k_fraction() -> f64 {
    0.25
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "k_fraction {} not in (0, 1]",
                self.k_fraction
            )));
        }
        if self.classes == 0 {
            return Err(Error::InvalidConfig("classes must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of label values this head distinguishes (2 for the binary
    /// sigmoid case).
    pub fn label_count(&self) -> usize {
        self.classes.max(2)
    }
}

/// Weights of the linear projection h: W is classes x embed_dim, b length
/// classes.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl HeadParams {
    pub fn init(config: &MilConfig, stream: &mut RandomStream) -> Result<HeadParams> {
        let bound = (6.0 / config.embed_dim as f64).sqrt();
        Ok(HeadParams {
            w: stream.uniform_tensor(-bound, bound, &[config.classes, config.embed_dim])?,
            b: Tensor::zeros(&[config.classes]),
        })
    }

    pub fn zeros(config: &MilConfig) -> HeadParams {
        HeadParams {
            w: Tensor::zeros(&[config.classes, config.embed_dim]),
            b: Tensor::zeros(&[config.classes]),
        }
    }
}

/// Forward output: bag-level class scores plus the pooling selections
/// (per class column for I-1/I-2, per feature dimension for E).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub selected: Vec<Vec<usize>>,
    pub k_used: usize,
}

/// Map a k fraction to a patch count: ceil(fraction * M), clamped to [1, M].
/// Max pooling resolves to 1 and average pooling to M.
pub fn resolve_k(pooling: Pooling, k_fraction: f64, instances: usize) -> usize {
    match pooling {
        Pooling::Max => 1,
        Pooling::Average => instances,
        Pooling::Topk => {
            let k = (k_fraction * instances as f64).ceil() as usize;
            k.clamp(1, instances)
        }
    }
}

/// Per-patch logits: delegates to matmul_bias.
pub fn project(graph: &mut Graph, z: Var, w: Var, b: Var) -> Result<Var> {
    graph.matmul_bias(w, z, b)
}

/// Apply the activation family selected by the class count: elementwise
/// sigmoid for classes == 1, row softmax otherwise.
fn activate_rows(graph: &mut Graph, logits: Var, classes: usize) -> Result<Var> {
    if classes == 1 {
        Ok(graph.sigmoid(logits))
    } else {
        graph.softmax_rows(logits)
    }
}

/// Recorded forward pass for any ordering. Returns the bag probability node
/// (a length-C vector on the graph) and the pooling selections.
pub fn forward(
    graph: &mut Graph,
    z: Var,
    w: Var,
    b: Var,
    config: &MilConfig,
) -> Result<(Var, Vec<Vec<usize>>, usize)> {
    config.validate()?;
    let m = graph.value(z).rows();
    if graph.value(z).cols() != config.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "bag has {} columns, head expects {}",
            graph.value(z).cols(),
            config.embed_dim
        )));
    }
    let k = resolve_k(config.pooling, config.k_fraction, m);
    match config.ordering {
        MilOrdering::I1 => {
            let logits = project(graph, z, w, b)?;
            let probs = activate_rows(graph, logits, config.classes)?;
            let pooled = graph.topk_mean_columns(probs, k)?;
            let selected = graph.topk_selected(pooled).unwrap().to_vec();
            Ok((pooled, selected, k))
        }
        MilOrdering::I2 => {
            let logits = project(graph, z, w, b)?;
            let pooled = graph.topk_mean_columns(logits, k)?;
            let selected = graph.topk_selected(pooled).unwrap().to_vec();
            let probs = if config.classes == 1 {
                graph.sigmoid(pooled)
            } else {
                let row = graph.reshape(pooled, vec![1, config.classes])?;
                let sm = graph.softmax_rows(row)?;
                graph.reshape(sm, vec![config.classes])?
            };
            Ok((probs, selected, k))
        }
        MilOrdering::E => {
            let pooled = graph.topk_mean_columns(z, k)?;
            let selected = graph.topk_selected(pooled).unwrap().to_vec();
            let row = graph.reshape(pooled, vec![1, config.embed_dim])?;
            let logits = project(graph, row, w, b)?;
            let probs = if config.classes == 1 {
                let s = graph.sigmoid(logits);
                graph.reshape(s, vec![1])?
            } else {
                let sm = graph.softmax_rows(logits)?;
                graph.reshape(sm, vec![config.classes])?
            };
            Ok((probs, selected, k))
        }
    }
}

/// Decide a hard label from bag probabilities: threshold 0.5 for the binary
/// sigmoid head (exactly 0.5 goes to class 0), argmax with ties to the lowest
/// index otherwise.
pub fn predict_label(probs: &[f64], classes: usize) -> usize {
    if classes == 1 {
        usize::from(probs[0] > 0.5)
    } else {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Inference convenience: run a forward pass on a throwaway graph.
pub fn predict(z: &Tensor, head: &HeadParams, config: &MilConfig) -> Result<Prediction> {
    let mut graph = Graph::new();
    let zv = graph.leaf(z.clone());
    let wv = graph.leaf(head.w.clone());
    let bv = graph.leaf(head.b.clone());
    let (probs_var, selected, k_used) = forward(&mut graph, zv, wv, bv, config)?;
    let probs = graph.value(probs_var).data().to_vec();
    let label = predict_label(&probs, config.classes);
    Ok(Prediction {
        probs,
        label,
        selected,
        k_used,
    })
}
