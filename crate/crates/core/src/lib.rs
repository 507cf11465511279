//! Blind image deblurring driven by a multi-scale latent structure prior.
//!
//! A blurry image down-sampled far enough is, to good approximation, a
//! low-resolution copy of the sharp scene. Starting from that coarse prior the
//! pipeline climbs an image pyramid; at every level it rebuilds a sharper
//! estimate by local self-example patch matching, solves for the kernel in the
//! gradient domain with a sparse compensation field, and runs a TV-regularized
//! non-blind deconvolution. A final refinement at full resolution adds
//! second-order derivatives and a guided-filter prior update. A projective
//! pose-basis variant handles spatially varying blur.
//!
//! Every numeric routine is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common case.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod conv;
pub mod error;
pub mod eval;
pub mod fft;
pub mod gradient;
pub mod guided;
pub mod image;
pub mod io;
pub mod kernel;
pub mod kernelest;
pub mod nonblind;
pub mod nonuniform;
pub mod patchmatch;
pub mod pipeline;
pub mod pyramid;
pub mod scalar;
pub mod scenes;
pub mod synth;

pub use crate::config::{AdmmConfig, DeblurConfig, GuidedConfig, PatchConfig, PoseConfig, PostprocessConfig};
pub use crate::conv::{convolve2d, Boundary};
pub use crate::error::{Error, Result};
pub use crate::gradient::{gradient, Direction, GradientField};
pub use crate::image::ImageBuffer;
pub use crate::kernel::BlurKernel;
pub use crate::scalar::Real;

/// Double-precision image.
pub type Image = ImageBuffer<f64>;
/// Double-precision kernel.
pub type Kernel = BlurKernel<f64>;
/// Single-precision image.
pub type ImageF32 = ImageBuffer<f32>;
/// Single-precision kernel.
pub type KernelF32 = BlurKernel<f32>;
/// Double-precision gradient field.
pub type Gradients = GradientField<f64>;
