//! Fast Fourier-Bessel steerable PCA for stacks of square images.
//!
//! The pipeline samples each image's Fourier transform on a polar grid with
//! a type-2 NUFFT, expands it in a truncated Fourier-Bessel basis, and runs
//! PCA over all in-plane rotations and reflections of the data, one small
//! covariance block per angular frequency. The steerable basis then drives
//! Marchenko-Pastur component selection and eigenvalue shrinkage for
//! denoising.

pub mod basis;
pub mod bench;
pub mod denoise;
pub mod error;
pub mod fbcoeff;
pub mod image;
pub mod mrc;
pub mod polarft;
pub mod simulate;
pub mod spca;
pub mod specfun;

pub use error::{Error, Result};
pub use image::ImageStack;
