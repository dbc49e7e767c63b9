//! Deformable convolution, its interpolation sampler, and position-sensitive
//! pooling.

mod conv;
mod layer;
mod psroi;
pub(crate) mod sample;

pub use layer::{DeformConv1d, DeformConv2d};
pub use psroi::bin_range;
pub use sample::{bilinear_sample, interp_kernel, linear_sample};
