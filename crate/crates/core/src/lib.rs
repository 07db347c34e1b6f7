//! Unsupervised reconstruction of dynamic MRI sequences from undersampled
//! k-t-space, trained by enforcing equivariance to diffeo-temporal transforms.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod export;
pub mod forward;
pub mod group;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod train;
pub mod video;

pub use error::{Error, Result};
