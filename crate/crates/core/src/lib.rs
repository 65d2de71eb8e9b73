//! Orthogonal sparse reparameterization of embedding spaces.
//!
//! A learned rotation `U = exp(A - A^T)` maps mean-centered embeddings into a
//! basis where a top-k mask keeps most of the signal; the inverse rotation
//! maps the sparse code back. The crate also carries sparse-autoencoder
//! baselines, matched-reconstruction-error evaluation metrics and
//! concept-based axis labelling.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod concepts;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sae;
pub mod train;

pub use error::{CedarError, Result};
pub use linalg::Matrix;
pub use model::{CedarModel, SparseCode};
