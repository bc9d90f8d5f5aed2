pub mod archive;
pub mod contrastive;
pub mod daf;
pub mod data;
pub mod error;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use image::{ImageTensor, Mask};
