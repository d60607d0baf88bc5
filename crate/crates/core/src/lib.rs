//! Adaptive Fourier-Bessel convolution for image segmentation.
//!
//! Per-pixel kernels are synthesized from a fixed multi-size
//! Fourier-Bessel basis bank ([`fb_basis`]) with coefficients produced by a
//! small convolutional generator ([`adaptive`]), trained end to end in front
//! of a compact U-Net ([`segnet`]).

pub mod adaptive;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod fb_basis;
pub mod inspect;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
