//! Numerical toolkit for visually grounded speech models.
//!
//! - [`losses`]: masked/marginalized InfoNCE matching loss, the masked-prediction
//!   contrastive loss, the codebook diversity loss and the combined objectives,
//!   all with analytic gradients and a finite-difference checker.
//! - [`retrieval`]: dense coarse scoring, top-k selection and coarse-to-fine
//!   re-ranking with a pluggable fine scorer; recall@N.
//! - [`abx`], [`semeval`], [`unitlm`]: the phonetic, semantic and
//!   lexical/syntactic evaluation pipelines over precomputed features.
//! - [`quantizer`], [`masking`]: codebook assignment, k-means unit discovery and
//!   span masking.
//! - [`featstore`]: the `FVF1` feature format and line-delimited manifests.

pub mod abx;
pub mod cli;
pub mod error;
pub mod featstore;
pub mod losses;
pub mod masking;
pub mod quantizer;
pub mod retrieval;
pub mod semeval;
pub mod synth;
pub mod unitlm;
mod vecmath;

pub use error::{Error, Result};
