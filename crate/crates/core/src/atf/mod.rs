//! The attention filter: a few per-token convolution blocks (conv, batch
//! norm, ReLU) followed by a two-channel background/foreground head.
//!
//! Models are generic over the float type so gradients can be checked in
//! both single and double precision; the pipeline uses `f32`.

mod forward;
mod io;
mod train;

pub use forward::{atf_forward, atf_loss_grad, atf_predict, cross_entropy, hidden_features, BatchGrid, ForwardCache, Mode};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{cosine_lr, sgd_step, train_atf, TrainConfig, TrainLog};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Float types the filter can run in.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Send + Sync + Debug + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtfConfig {
    pub n_hidden_blocks: usize,
    /// Spatial size of the first block's kernel, 1 or 3.
    pub first_kernel: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for AtfConfig {
    fn default() -> Self {
        AtfConfig {
            n_hidden_blocks: 2,
            first_kernel: 1,
            dim: 768,
            seed: 0,
        }
    }
}

impl AtfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hidden_blocks == 0 {
            return Err(Error::InvalidArgument("n_hidden_blocks must be at least 1".into()));
        }
        if self.first_kernel != 1 && self.first_kernel != 3 {
            return Err(Error::InvalidArgument(format!(
                "first_kernel must be 1 or 3, got {}",
                self.first_kernel
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dim must be positive".into()));
        }
        Ok(())
    }
}

/// Convolution followed by batch normalization; ReLU is applied in the
/// forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtfModel<T = f32> {
    pub config: AtfConfig,
    pub blocks: Vec<ConvBlock<T>>,
    /// `[2][dim]`; channel 0 is background, channel 1 foreground.
    pub head_weight: Vec<T>,
    pub head_bias: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Fresh model: weights uniform in `±1/sqrt(fan_in)`, zero biases, identity
/// batch norm. Deterministic in `config.seed`, and the same draws are used
/// for every float type.
pub fn init_atf<T: Real>(config: &AtfConfig) -> Result<AtfModel<T>> {
    config.validate()?;
    let d = config.dim;
    let mut rng = rng_for(config.seed, 0);
    let mut uniform = |n: usize, fan_in: usize| -> Vec<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
    };
    let blocks = (0..config.n_hidden_blocks)
        .map(|b| {
            let k = if b == 0 { config.first_kernel } else { 1 };
            ConvBlock {
                kernel: k,
                weight: uniform(d * d * k * k, d * k * k),
                bias: vec![T::zero(); d],
                gamma: vec![T::one(); d],
                beta: vec![T::zero(); d],
                running_mean: vec![T::zero(); d],
                running_var: vec![T::one(); d],
                eps: T::of(BN_EPS),
            }
        })
        .collect();
    let head_weight = uniform(2 * d, d);
    Ok(AtfModel {
        config: *config,
        blocks,
        head_weight,
        head_bias: vec![T::zero(); 2],
    })
}

impl<T: Real> AtfModel<T> {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Trainable tensors in declaration order: per block weight, bias,
    /// gamma, beta; then head weight and head bias.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.extend([&b.weight[..], &b.bias[..], &b.gamma[..], &b.beta[..]]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Zero tensors shaped like [`AtfModel::params`].
    pub fn zeros_like_params(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> AtfModel<U> {
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::of(x.to_f64().unwrap())).collect() };
        AtfModel {
            config: self.config,
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    kernel: b.kernel,
                    weight: conv(&b.weight),
                    bias: conv(&b.bias),
                    gamma: conv(&b.gamma),
                    beta: conv(&b.beta),
                    running_mean: conv(&b.running_mean),
                    running_var: conv(&b.running_var),
                    eps: U::of(b.eps.to_f64().unwrap()),
                })
                .collect(),
            head_weight: conv(&self.head_weight),
            head_bias: conv(&self.head_bias),
        }
    }

    pub fn is_finite(&self) -> bool {
        let stats = self
            .blocks
            .iter()
            .flat_map(|b| b.running_mean.iter().chain(&b.running_var));
        self.params()
            .into_iter()
            .flatten()
            .chain(stats)
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = AtfConfig {
            dim: 6,
            seed: 9,
            ..Default::default()
        };
        let a: AtfModel = init_atf(&cfg).unwrap();
        let b: AtfModel = init_atf(&cfg).unwrap();
        assert_eq!(a, b);
        let other: AtfModel = init_atf(&AtfConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn parameter_count_two_blocks_dim_8() {
        let m: AtfModel = init_atf(&AtfConfig {
            n_hidden_blocks: 2,
            dim: 8,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(m.parameter_count(), 2 * (8 * 8 + 8 + 2 * 8) + (2 * 8 + 2));
        assert_eq!(m.parameter_count(), 194);
    }

    #[test]
    fn three_by_three_first_block_shape() {
        let m: AtfModel = init_atf(&AtfConfig {
            n_hidden_blocks: 2,
            first_kernel: 3,
            dim: 4,
            seed: 1,
        })
        .unwrap();
        assert_eq!(m.blocks[0].kernel, 3);
        assert_eq!(m.blocks[0].weight.len(), 4 * 4 * 3 * 3);
        assert_eq!(m.blocks[1].weight.len(), 16);
    }

    #[test]
    fn init_bounds_and_bn_identity() {
        let m: AtfModel<f64> = init_atf(&AtfConfig {
            n_hidden_blocks: 1,
            first_kernel: 3,
            dim: 5,
            seed: 2,
        })
        .unwrap();
        let bound = 1.0 / (45f64).sqrt();
        assert!(m.blocks[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(m.head_weight.iter().all(|w| w.abs() <= 1.0 / 5f64.sqrt()));
        let b = &m.blocks[0];
        assert!(b.bias.iter().chain(&b.beta).chain(&b.running_mean).all(|&v| v == 0.0));
        assert!(b.gamma.iter().chain(&b.running_var).all(|&v| v == 1.0));
        assert_eq!(b.eps, 1e-5);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            AtfConfig { n_hidden_blocks: 0, ..Default::default() },
            AtfConfig { first_kernel: 2, ..Default::default() },
            AtfConfig { dim: 0, ..Default::default() },
        ] {
            assert!(init_atf::<f32>(&cfg).is_err());
        }
    }

    #[test]
    fn f32_and_f64_share_draws() {
        let cfg = AtfConfig { dim: 3, seed: 4, ..Default::default() };
        let a: AtfModel<f32> = init_atf(&cfg).unwrap();
        let b: AtfModel<f64> = init_atf(&cfg).unwrap();
        assert_eq!(b.cast::<f32>(), a);
    }
}
