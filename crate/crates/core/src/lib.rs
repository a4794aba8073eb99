//! Deep embedded clustering with affine augmentation.
//!
//! The pipeline: [`corpus`] ingests a labeled image tree, [`augment`] adds
//! rotated, sheared and scaled copies, [`cae`] trains a convolutional
//! autoencoder under reconstruction and consistency objectives, [`cluster`]
//! runs K-means and DEC/IDEC fine-tuning, [`metrics`] scores partitions, and
//! [`ablation`] drives whole grids of experiments.

pub mod ablation;
pub mod augment;
pub mod cae;
pub mod cluster;
pub mod corpus;
pub mod diffnum;
mod error;
pub mod metrics;
pub mod rng;

pub use diffnum::{AdamState, Graph, LayerSpec, Mode, NodeId, ParamStore, Sequential, Tensor};
pub use error::{Error, Result};
