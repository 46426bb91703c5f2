//! Patch-craft video denoising.
//!
//! The pipeline searches spatio-temporal nearest-neighbor patches for every
//! pixel, tiles them into artificial "patch-craft" frames, denoises the
//! augmented stack with a separable-convolution network ([`scnn`]) and then
//! refines the result over a sliding temporal window ([`tcnn`]).

pub mod error;
pub mod patchcraft;
pub mod patchmatch;
pub mod pipeline;
pub mod scnn;
pub mod sepconv;
pub mod tcnn;
pub mod tensor;
pub mod train;
pub mod videoio;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
