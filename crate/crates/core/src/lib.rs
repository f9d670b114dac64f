//! Cross-domain alignment with optimal transport and conditional flow matching.

pub mod alignment;
pub mod costs;
pub mod data;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod genot;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod ot;

pub use dataset::{FeatureMatrix, PairedSet};
pub use error::{Error, Result};
pub use linalg::Matrix;
