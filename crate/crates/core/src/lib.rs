//! Physics-guided unrolled MRI reconstruction with self-supervised
//! training on undersampled k-space (SSDU), plus supervised training and a
//! CG-SENSE baseline on synthetic multi-coil data.
//!
//! The crate builds up from a small reverse-mode autodiff tape
//! ([`autodiff`]) and centered orthonormal FFTs ([`fft`]), through the
//! multi-coil encoding operator ([`mri`]) and CG solves ([`solvers`]), to
//! the unrolled network ([`network`]), training loop ([`train`]), data
//! simulator ([`sim`]), metrics ([`metrics`]), file formats
//! ([`container`], [`config`]) and experiment runners ([`sweep`]).

pub mod autodiff;
mod bytes;
pub mod config;
pub mod container;
pub mod conv;
pub mod error;
pub mod fft;
pub mod metrics;
pub mod mri;
pub mod network;
pub mod sim;
pub mod solvers;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
