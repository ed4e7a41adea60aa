//! Missingness approximations, toy classifiers and the experiments that
//! measure how removal choices bias model predictions.

pub mod attribution;
pub mod data;
pub mod error;
pub mod experiments;
pub mod image;
pub mod io;
pub mod metrics;
pub mod missingness;
pub mod nn;
pub mod seed;
pub mod superpixels;

pub use error::{Error, Result};
pub use image::Image;
