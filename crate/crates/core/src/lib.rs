//! Continuous-time self-attention and Oja-type flows of tokens on the unit
//! sphere: equilibria, their classification, and linear stability.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod stability;

pub use attention::ModelParams;
pub use dynamics::{IntegrationOptions, System, Trajectory};
pub use error::{Error, Result};
pub use geometry::SphereConfiguration;
pub use linalg::{Matrix, ValueSpectrum, Vector};
pub use par::Execution;
pub use stability::{EquilibriumClass, EquilibriumReport, Tolerances, Verdict};
