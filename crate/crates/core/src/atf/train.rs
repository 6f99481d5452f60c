use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forward::{atf_loss_grad, BatchGrid, ForwardCache};
use super::{init_atf, AtfConfig, AtfModel, Real, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::maskops::Mask;
use crate::merge::MergedMap;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    /// Images per minibatch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr0: 0.1,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("bad momentum {}", self.momentum)));
        }
        Ok(())
    }
}

/// Per-epoch training trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Token-weighted mean minibatch loss.
    pub loss: Vec<f64>,
    /// Train-mode token accuracy against the training targets.
    pub token_acc: Vec<f64>,
    pub lr: Vec<f64>,
}

impl TrainLog {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }

    /// `epoch,loss,token_acc,lr` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,token_acc,lr\n");
        for e in 0..self.epochs() {
            let _ = writeln!(out, "{},{},{},{}", e, self.loss[e], self.token_acc[e], self.lr[e]);
        }
        out
    }
}

/// Cosine annealing from `lr0` at epoch 0 towards zero at `epochs`.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    0.5 * lr0 * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

/// Heavy-ball update: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step<T: Real>(model: &mut AtfModel<T>, grads: &[Vec<T>], velocity: &mut [Vec<T>], lr: f64, momentum: f64) {
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, g), v) in model.params_mut().into_iter().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = mu * *vv + gv;
            *pv = *pv - lr * *vv;
        }
    }
}

fn update_running_stats<T: Real>(model: &mut AtfModel<T>, cache: &ForwardCache<T>) {
    let n = cache.tokens();
    let m = T::of(BN_MOMENTUM);
    let unbias = if n > 1 {
        T::of(n as f64 / (n - 1) as f64)
    } else {
        T::one()
    };
    for (block, (mean, var)) in model.blocks.iter_mut().zip(&cache.batch_stats) {
        for c in 0..mean.len() {
            block.running_mean[c] = (T::one() - m) * block.running_mean[c] + m * mean[c];
            block.running_var[c] = (T::one() - m) * block.running_var[c] + m * var[c] * unbias;
        }
    }
}

/// Trains a fresh filter on `(merged map, target mask)` pairs with
/// minibatch SGD, momentum and a per-epoch cosine schedule.
///
/// Only filter parameters change; the token maps are read-only.
pub fn train_atf<T: Real>(
    dataset: &[(MergedMap, Mask)],
    tcfg: &TrainConfig,
    acfg: &AtfConfig,
) -> Result<(AtfModel<T>, TrainLog)> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for (i, (map, mask)) in dataset.iter().enumerate() {
        if map.dim != acfg.dim {
            return Err(Error::Shape(format!(
                "image {i}: dim {} differs from model dim {}",
                map.dim, acfg.dim
            )));
        }
        if (map.height, map.width) != (mask.height, mask.width) {
            return Err(Error::Shape(format!(
                "image {i}: map {}x{} vs mask {}x{}",
                map.height, map.width, mask.height, mask.width
            )));
        }
    }
    let mut model: AtfModel<T> = init_atf(acfg)?;
    let grids: Vec<Vec<T>> = dataset
        .iter()
        .map(|(m, _)| m.grid.iter().map(|&v| T::of(v as f64)).collect())
        .collect();
    let mut velocity = model.zeros_like_params();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng_for(tcfg.seed, 0x7261_696e);
    let mut log = TrainLog::default();

    for epoch in 0..tcfg.epochs {
        let lr = cosine_lr(tcfg.lr0, epoch, tcfg.epochs);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut tokens) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<BatchGrid<'_, T>> = chunk
                .iter()
                .map(|&i| BatchGrid::new(dataset[i].0.height, dataset[i].0.width, &grids[i]))
                .collect();
            let targets: Vec<&Mask> = chunk.iter().map(|&i| &dataset[i].1).collect();
            let (loss, grads, cache) = atf_loss_grad(&model, &batch, &targets)?;
            let n = cache.tokens();
            loss_sum += loss.to_f64().unwrap() * n as f64;
            tokens += n;
            let labels = targets.iter().flat_map(|m| m.bits.iter());
            correct += cache
                .logits
                .chunks_exact(2)
                .zip(labels)
                .filter(|(l, &fg)| (l[1] > l[0]) == fg)
                .count();
            update_running_stats(&mut model, &cache);
            sgd_step(&mut model, &grads, &mut velocity, lr, tcfg.momentum);
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("model diverged in epoch {epoch}")));
        }
        let mean_loss = loss_sum / tokens as f64;
        let acc = correct as f64 / tokens as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.5} token_acc {acc:.4} lr {lr:.5}");
        log.loss.push(mean_loss);
        log.token_acc.push(acc);
        log.lr.push(lr);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Vec<(MergedMap, Mask)> {
        (0..4usize)
            .map(|k| {
                let mask = Mask::from_rows(&[&[1, 0, 0], &[0, 1, (k % 2) as u8]]);
                let grid = mask
                    .bits
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &fg)| {
                        let j = ((i + k) % 3) as f32 * 0.1;
                        if fg {
                            [2.0 + j, -1.0]
                        } else {
                            [-1.0 - j, 2.0]
                        }
                    })
                    .collect();
                (
                    MergedMap {
                        height: 2,
                        width: 3,
                        dim: 2,
                        grid,
                        class_token: vec![2.0, -1.0],
                    },
                    mask,
                )
            })
            .collect()
    }

    fn acfg() -> AtfConfig {
        AtfConfig {
            n_hidden_blocks: 2,
            first_kernel: 1,
            dim: 2,
            seed: 3,
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 20), 0.1);
        assert!((cosine_lr(0.1, 10, 20) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 19, 20) < 0.001);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let data = toy_dataset();
        let tcfg = TrainConfig {
            epochs: 1,
            lr0: 0.0,
            batch_size: 2,
            ..Default::default()
        };
        let (model, log) = train_atf::<f32>(&data, &tcfg, &acfg()).unwrap();
        let init: AtfModel<f32> = init_atf(&acfg()).unwrap();
        assert_eq!(model.params(), init.params());
        assert_eq!(log.epochs(), 1);
    }

    #[test]
    fn training_is_deterministic_and_learns_toy_problem() {
        let data = toy_dataset();
        let tcfg = TrainConfig {
            epochs: 30,
            batch_size: 2,
            ..Default::default()
        };
        let (m1, l1) = train_atf::<f32>(&data, &tcfg, &acfg()).unwrap();
        let (m2, l2) = train_atf::<f32>(&data, &tcfg, &acfg()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert_eq!(l1.lr.len(), 30);
        assert!(l1.loss.last().unwrap() < &l1.loss[0]);
        assert_eq!(*l1.token_acc.last().unwrap(), 1.0);
        for (map, mask) in &data {
            assert_eq!(&crate::atf::atf_predict(&m1, map).unwrap(), mask);
        }
    }

    #[test]
    fn training_does_not_touch_inputs() {
        let data = toy_dataset();
        let before = data.clone();
        let _ = train_atf::<f32>(&data, &TrainConfig { epochs: 2, ..Default::default() }, &acfg()).unwrap();
        assert_eq!(data, before);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = toy_dataset();
        assert!(train_atf::<f32>(&[], &TrainConfig::default(), &acfg()).is_err());
        let wrong_dim = AtfConfig { dim: 3, ..acfg() };
        assert!(train_atf::<f32>(&data, &TrainConfig::default(), &wrong_dim).is_err());
        let bad = TrainConfig { epochs: 0, ..Default::default() };
        assert!(train_atf::<f32>(&data, &bad, &acfg()).is_err());
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let log = TrainLog {
            loss: vec![0.5, 0.25],
            token_acc: vec![0.75, 1.0],
            lr: vec![0.1, 0.05],
        };
        assert_eq!(log.to_csv(), "epoch,loss,token_acc,lr\n0,0.5,0.75,0.1\n1,0.25,1,0.05\n");
    }
}
