//! Differentiable numeric backbone: tensors, layer kernels, a reverse-mode
//! tape, Adam, and the `DCLW` weights container.
//!
//! All arithmetic is `f64` and single-threaded, so a given sequence of
//! operations is bit-reproducible.

mod adam;
mod graph;
pub(crate) mod kernels;
mod layers;
mod tensor;
pub mod weights;

pub use adam::AdamState;
pub use graph::{BatchStats, Graph, Mode, NodeId};
pub(crate) use graph::{kl_value, mean_abs_diff_value, mse_value, soft_assign_value};
pub use layers::{Layer, LayerSpec, ParamStore, Sequential, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
