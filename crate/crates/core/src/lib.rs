//! Effective-resistance spectral sparsification with end-to-end stability
//! checks for polynomial-filter GNNs: filter and representation errors, Gram
//! geometry, class statistics and matched gradient-descent trajectories.

pub mod config;
pub mod error;
pub mod fmt;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod seed;
pub mod sparsify;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Matrix;
