//! Diversity-guided MLP reduction for vision transformers.
//!
//! The library prunes the hidden layer of transformer MLP blocks down to a
//! target expansion ratio while preserving the diversity of the retained
//! neuron weights, then recovers the pruned model by distilling it against
//! the original one. Everything needed to run that pipeline at desk scale
//! lives here:
//!
//! * [`linalg`] — dense row-major matrices, Gram-Schmidt elimination and a
//!   Jacobi eigensolver;
//! * [`model`] — architecture configs, weight containers, parameter/FLOPs
//!   accounting and the published-model presets;
//! * [`pruning`] — the diversity-guided neuron selection plus the baseline
//!   criteria (ℓ2, random, Taylor) and structural slicing;
//! * [`nn`] — forward and analytic backward passes for the toy transformer;
//! * [`distill`] — the teacher→student trainer (AdamW, cosine schedule);
//! * [`eval`] — kNN classification, functional distance, weight-diversity
//!   spectra;
//! * [`io`] — the `DGMR` container format for models, datasets and
//!   embeddings.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the `f64`
//! aliases below are what the CLI and the test suites use.

pub mod distill;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod pruning;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` matrix, the default working precision.
pub type Mat = linalg::DenseMatrix<f64>;
/// `f64` vector.
pub type Vect = linalg::DenseVector<f64>;
/// `f64` model.
pub type Model64 = model::Model<f64>;
/// `f64` dataset.
pub type Dataset64 = distill::Dataset<f64>;
/// `f64` embedding set.
pub type EmbeddingSet64 = eval::EmbeddingSet<f64>;
