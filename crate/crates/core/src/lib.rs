//! Training score-based diffusion priors from corrupted observations by
//! expectation-maximization, at desk scale.
//!
//! The pipeline alternates posterior sampling of clean signals from
//! corrupted measurements (E-step, adaptive diffusion posterior sampling)
//! with denoising-score-matching refits of the score network (M-step).
//! Every stage carries an analytic or brute-force oracle used by the test
//! suites: conjugate-Gaussian posteriors, closed-form diffused scores,
//! finite-difference gradients, and moment checks.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod em;
pub mod error;
pub mod linalg;
pub mod net;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod tape;
pub mod tensor;
pub mod testing;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
