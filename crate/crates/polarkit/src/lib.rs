//! Two-stage polarization detection pipeline: structured supervised
//! fine-tuning with a rigid slot-filling output schema, followed by DPO
//! refinement over automatically constructed preference pairs.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod fixtures;
pub mod gen;
mod hash;
pub mod optim;
pub mod pairs;
pub mod scalar;
pub mod schema;

pub use scalar::Scalar;

/// Single-precision toy model, the default for end-to-end pipeline runs.
pub type ToyLm32 = gen::ToyLm<f32>;
/// Double-precision toy model, used where finite-difference gradient checks
/// need headroom below their tolerance.
pub type ToyLm64 = gen::ToyLm<f64>;
