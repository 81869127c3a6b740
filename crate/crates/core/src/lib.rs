//! Multi-prize ticket search: sparse binary subnetworks inside randomly
//! weighted neural networks, found by training per-weight pruning scores
//! while the weights themselves stay frozen.
//!
//! The crate is organized around the lifecycle of a ticket:
//!
//! - [`tensor`]: minimal tensors plus a reverse-mode tape whose only
//!   differentiable parameters are pruning scores (through the
//!   straight-through relaxation) and batch-norm affine terms.
//! - [`estimators`]: the straight-through score gradient and the
//!   quadratic-spline surrogate used to backpropagate through `sgn`.
//! - [`layers`]: masked-binary layers, network specs and assembly for the
//!   1-bit-weight/32-bit-activation and 1-bit/1-bit variants.
//! - [`search`]: the binarize-prune optimizer, with per-batch score steps,
//!   per-epoch mask and gain recomputation, and error diagnostics.
//! - [`packed`]: the deployment form, two bitplanes per layer driving
//!   XNOR-popcount and masked sign-accumulation kernels.
//! - [`theory`]: constructive verifier for the subnetwork existence
//!   bounds; builds the masks the proofs prescribe and measures the error.
//! - [`data`]: MNIST IDX and CIFAR-10 binary loaders plus synthetic sets.
//! - [`checkpoint`], [`config`], [`cli`]: persistence, run configuration
//!   and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod estimators;
pub mod layers;
pub mod packed;
pub mod search;
pub mod theory;
pub mod tensor;

mod error;

pub use error::{Error, Result};
