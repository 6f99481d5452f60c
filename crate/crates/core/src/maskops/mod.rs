//! Mask post-processing: smoothing, binarization, connected components,
//! resolution changes and box extraction.

mod components;
mod filter;
mod io;
mod resample;
mod types;

pub use components::{connected_components, Component, Connectivity};
pub use filter::{binarize, denoise, gaussian_kernel, gaussian_smooth, reflect_index, FilterParams};
pub use io::{decode_mask_bits, encode_mask_bits, read_mask, read_pgm, write_mask, write_pgm};
pub use resample::{downsample_soft, upsample_mask};
pub use types::{mask_to_box, BBox, BoxPolicy, Mask, SoftMask};
