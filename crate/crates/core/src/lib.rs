//! Cross-modality person re-identification by hierarchical factor disentanglement.
//!
//! The crate splits each person image into an identity prototype plus an
//! attribute code (style / illumination / pose), trains a generator and a pair
//! of discriminators to swap the identity-excluded factors across modalities,
//! and learns a retrieval feature on top of the identity-discriminative half.
//! Everything is generic over the scalar type: `f32` for training speed,
//! `f64` for finite-difference verification.

pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hfl;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
pub mod plot;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod types;

pub use config::RunConfig;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Scalar used for training and evaluation (fast path).
pub type TrainScalar = f32;
/// Scalar used by the finite-difference gradient verification suite.
pub type CheckScalar = f64;
