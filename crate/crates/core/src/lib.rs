//! Shadow-aware neural radiance fields for overhead scenes.
//!
//! Everything is built from first principles on dense linear algebra: a
//! fixed-architecture MLP radiance field with hand-derived backprop, a
//! differentiable volume renderer with an optional sun-visibility / sky-color
//! decomposition, Adam with exponential learning-rate decay, and an analytic
//! box-and-plane scene generator that doubles as the verification oracle.
//!
//! The crate is generic over the scalar type: `f32` is the training default,
//! `f64` backs the finite-difference gradient oracles in the test suite.

pub mod augment;
pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod optim;
pub mod real;
pub mod render;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod threads;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
