//! Planted-truth synthetic token maps and brute-force reference oracles.

mod generate;
mod oracle;

pub use generate::{generate_synthetic, write_synthetic, SynthConfig, SynthDataset, SynthImage, SYNTH_PATCH};
pub use oracle::{direct_convolution_oracle, exact_kmeans_oracle, finite_difference_grad, gaussian_kernel_2d, train_loss};
