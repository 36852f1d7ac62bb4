//! Latent subclass discovery in explanation space.
//!
//! A dense classifier is trained on a labeled dataset, every instance gets a
//! saliency explanation for its predicted label, the explanations are
//! projected with PCA and each predicted class is clustered with DBSCAN.
//! Classes that split into several large clusters are flagged as candidates
//! for latent structure. A raw-data baseline runs the same analysis on the
//! instances themselves.

pub mod artifacts;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod introspect;
pub mod matrix;
pub mod model;
pub mod real;
pub mod reduce;

pub use error::{Error, ErrorKind, Result};
pub use matrix::Matrix;
