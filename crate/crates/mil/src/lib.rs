//! Multi-class multiple-instance learning over bags of patch
//! representations.
//!
//! An image (or a precomputed bag of instance embeddings) is classified by a
//! MIL block built from three pieces: a linear projection `h`, a
//! permutation-invariant top-k average pooling `phi`, and an activation
//! `sigma`. The order of the three pieces selects the approach: instance
//! level with activation before pooling (I-1), instance level with pooling
//! before activation (I-2), or embedding level (E), where patch features are
//! pooled column-wise before the classifier. Everything trains end to end
//! through a small reverse-mode autodiff tape, and each trained model can
//! explain its decision with per-patch heatmaps.
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability; the `mil` binary wires the same pieces into `gen-data`,
//! `train`, `eval`, `explain`, and `selftest` subcommands.

pub mod cli;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod graph;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{grad_check, Graph, Var};
pub use head::{predict, resolve_k, HeadParams, MilConfig, MilOrdering, Pooling, Prediction};
pub use rng::RandomStream;
pub use tensor::Tensor;
