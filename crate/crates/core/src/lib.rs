//! GradCAM interpretability measures and entropy-regularized training on a
//! small higher-order reverse-mode autodiff engine.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod gradcam;
pub mod measures;
pub mod network;
pub mod trainer;

pub use error::{Error, Result};
