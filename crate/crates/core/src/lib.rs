//! Numerical core for studying attention normalization at toy scale:
//! dense matrix primitives, seven attention formulations with exact
//! analytic gradients, a spurious-correlation retrieval task, a one-layer
//! Transformer classifier with manual backprop, and AdamW.
//!
//! Everything is plain `f64` with deterministic, splittable randomness;
//! every backward pass is validated against a finite-difference oracle
//! (see [`verify`]).

pub mod attention;
mod error;
pub mod matrix;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod toy_data;
pub mod toy_model;
pub mod verify;

pub use error::CoreError;
pub use matrix::Matrix;
pub use rng::Rng;
