//! Graph-level anomaly detection with view-fused and spectrum-guided
//! selective state space blocks.

// Index loops mirror the math; negated float comparisons are there to catch NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sgm;
pub mod spectral;
pub mod ssm;
pub mod tape;
pub mod train;
pub mod vfm;

pub use error::{Error, Result};
pub use matrix::Matrix;
