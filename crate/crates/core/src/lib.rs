//! Lyapunov-certified test-time feature reconstruction for graph neural networks.
//!
//! A trained SGC model is treated as a plant: freezing every node feature but
//! one turns the GNN into an affine map from that node's feature to its logits.
//! A neural controller maps the node's current prediction to a replacement
//! feature; a neural Lyapunov function certifies that iterating this loop drives
//! the prediction toward the one-hot ground truth. Controller and Lyapunov
//! network are trained jointly with counterexamples produced by an interval
//! branch-and-bound verifier.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod cegis;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod neuralnet;
pub mod numerics;
pub mod reconstruct;
pub mod sgc;
pub mod verifier;

pub use error::{Error, Result};
