//! Discrete latent perspective learning at desk scale.
//!
//! The crate decomposes visual features into a discrete latent perspective
//! representation, maintains a dataset-level perspective embedding space,
//! transforms perspectives through estimated homographies, and fuses the
//! original and transformed views with perspective-invariant attention. A
//! synthetic shifted-view segmentation harness ties the pieces together and
//! every differentiable operation is verified against a finite-difference
//! oracle.

pub mod bundle;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod pdd;
pub mod pht;
pub mod pia;
pub mod pointness;
pub mod posenc;
pub mod space;
pub mod tensor;
pub mod verify;
pub mod vr;

pub use error::{Error, Result};
pub use tensor::Tensor;
