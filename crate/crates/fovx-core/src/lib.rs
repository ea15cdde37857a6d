//! Field-of-view extension for diffusion MRI: imputes missing inferior or
//! superior slices of a DWI study using plane- and shell-specific
//! conditional generators guided by a registered T1 image, plus the
//! synthetic-phantom and evaluation machinery around it.

pub mod cli;
pub mod dwi;
pub mod error;
pub mod fov;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod phantom;
pub mod preprocess;

pub use error::{FovxError, Result};
