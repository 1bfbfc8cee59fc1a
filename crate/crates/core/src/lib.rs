//! Flow-matching models guided at inference time by trajectory control.
//!
//! The crate trains small MLP vector fields with conditional flow matching,
//! integrates them with explicit Euler stepping, and steers the resulting
//! trajectories toward measurement-consistent endpoints with four solvers:
//! a global control optimizer, receding-horizon control with a K-step
//! lookahead, its single-step specialization, and a greedy one-step-horizon
//! controller using a straight-line terminal estimate.

pub mod control;
pub mod data;
pub mod dynamics;
pub mod field;
pub mod inverse;
pub mod metrics;
pub mod model;
pub mod tape;

pub use field::VectorField;
pub use tape::{NodeId, Shape, Tape, Tensor};
