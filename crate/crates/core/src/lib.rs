//! Token-to-box weakly supervised localization.
//!
//! The pipeline takes per-image transformer token maps, fuses the last
//! three blocks with the positional embedding, clusters the fused tokens
//! with the class token as the foreground anchor, cleans the resulting
//! mask, trains a shallow per-token attention filter on those pseudo masks,
//! refines the targets by predicting on image quadrants, and finally turns
//! masks into boxes and scores them.
//!
//! Stages:
//! - [`token_io`]: CTM token-map files and the dataset manifest.
//! - [`merge`]: weighted fusion of token layers.
//! - [`cluster`]: k-means, foreground selection and clustering diagnostics.
//! - [`maskops`]: smoothing, binarization, components and box extraction.
//! - [`atf`]: the attention filter, its gradients and SGD training.
//! - [`refine`]: quadrant prediction and stitching.
//! - [`eval`]: IoU and localization accuracy.
//! - [`synth`]: planted-truth generator and brute-force oracles.
//! - [`pipeline`]: the batch commands driving all of the above.

pub mod atf;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod maskops;
pub mod merge;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod synth;
pub mod token_io;

pub use error::{Error, Result};
