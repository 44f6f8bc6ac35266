//! Differentiable layer operations: convolution, anti-aliased downsampling
//! (conv + blurpool), bilinear upsampling, spectral feature filtering,
//! multi-head attention, soft-argmax decoding, and the regression losses.
//! Each op registers a hand-derived backward rule on the tape; all of them
//! are covered by the central-difference gradient suite.

mod attention;
mod blur;
mod conv;
mod fourier;
mod loss;
mod resize;
mod softargmax;

pub use attention::{mha, AttentionParams};
pub use blur::{blurpool2d, naive_subsample2d, BlurKernel};
pub use conv::{conv2d, ConvParams};
pub use fourier::{dft2, ff_parser, idft2, SpectralFilter};
pub use loss::{bce_heatmap_loss, l1_coord_loss};
pub use resize::bilinear_upsample;
pub use softargmax::soft_argmax;
