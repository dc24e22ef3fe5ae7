//! Bi-orthogonal factor decomposition of transformer attention.
//!
//! Activations of a layer are split into a layer effect, a positional effect
//! and a content residual ([`factorization`]). Each head's query-key interaction
//! matrix `W = W_Q W_Kᵀ` is split into bi-orthogonal modes by SVD
//! ([`spectral`]). Projecting every factor onto every mode attributes attention
//! energy to informational sources ([`energy`]), which feeds the specialization
//! simplex ([`specialization`]), position probes ([`probes`]), positional
//! geometry and layer correlations ([`geometry`]) and token-grid mode heatmaps
//! ([`heatmaps`]). [`synth`] plants known structure for testing.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod activations;
pub mod energy;
pub mod error;
pub mod factorization;
pub mod geometry;
pub mod heatmaps;
pub mod linalg;
pub mod probes;
pub mod specialization;
pub mod spectral;
pub mod synth;

pub use activations::{ActivationBlock, TokenKind, TokenLayout};
pub use error::{Error, Result};
pub use factorization::{factorize, FactorSet, TokenSubset};
pub use linalg::Matrix;
pub use spectral::{decompose_head, ModeBasis};
