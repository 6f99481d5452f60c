use super::{AtfModel, ConvBlock, Real};
use crate::error::{Error, Result};
use crate::maskops::{reflect_index, Mask};
use crate::merge::MergedMap;

/// One image's `[row][col][dim]` grid.
#[derive(Debug, Clone, Copy)]
pub struct BatchGrid<'a, T> {
    pub height: usize,
    pub width: usize,
    pub data: &'a [T],
}

impl<'a, T> BatchGrid<'a, T> {
    pub fn new(height: usize, width: usize, data: &'a [T]) -> Self {
        BatchGrid { height, width, data }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

impl<'a> BatchGrid<'a, f32> {
    pub fn from_map(map: &'a MergedMap) -> Self {
        BatchGrid::new(map.height, map.width, &map.grid)
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Statistics of the current batch (all tokens of all images).
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    active: Vec<bool>,
}

/// Intermediates of a forward pass, kept for the backward pass and for the
/// running-statistics update.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    shapes: Vec<(usize, usize)>,
    blocks: Vec<BlockCache<T>>,
    /// Per-block batch mean and biased variance (train mode only).
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
    /// Output of the last hidden block, `N x dim`.
    pub features: Vec<T>,
    /// `N x 2`, token-major: `[background, foreground]` per token.
    pub logits: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn tokens(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }
}

impl<T: Real> ForwardCache<T> {
    /// Smallest `|gamma * xhat + beta|` over every ReLU input. Finite
    /// differences are only meaningful when this stays well above the step.
    pub fn relu_margin(&self, model: &AtfModel<T>) -> T {
        let d = model.dim();
        let mut margin = T::infinity();
        for (block, bc) in model.blocks.iter().zip(&self.blocks) {
            for (i, &x) in bc.xhat.iter().enumerate() {
                let c = i % d;
                margin = margin.min((block.gamma[c] * x + block.beta[c]).abs());
            }
        }
        margin
    }
}

fn neighbours(shapes: &[(usize, usize)], k: usize) -> Vec<usize> {
    // For every token, the source token index of each kernel tap.
    let r = (k / 2) as isize;
    let mut out = Vec::new();
    let mut base = 0;
    for &(h, w) in shapes {
        for row in 0..h {
            for col in 0..w {
                for ky in 0..k as isize {
                    for kx in 0..k as isize {
                        let sr = reflect_index(row as isize + ky - r, h);
                        let sc = reflect_index(col as isize + kx - r, w);
                        out.push(base + sr * w + sc);
                    }
                }
            }
        }
        base += h * w;
    }
    out
}

fn conv_forward<T: Real>(block: &ConvBlock<T>, x: &[T], n: usize, d: usize, taps: &[usize]) -> Vec<T> {
    let kk = block.kernel * block.kernel;
    let mut z = vec![T::zero(); n * d];
    for t in 0..n {
        let out = &mut z[t * d..(t + 1) * d];
        for (o, zo) in out.iter_mut().enumerate() {
            let mut acc = block.bias[o];
            for i in 0..d {
                let w = &block.weight[(o * d + i) * kk..(o * d + i + 1) * kk];
                if kk == 1 {
                    acc = acc + w[0] * x[t * d + i];
                } else {
                    for (tap, &wv) in w.iter().enumerate() {
                        acc = acc + wv * x[taps[t * kk + tap] * d + i];
                    }
                }
            }
            *zo = acc;
        }
    }
    z
}

/// Returns `(d_weight, d_bias, d_input)`.
fn conv_backward<T: Real>(block: &ConvBlock<T>, x: &[T], dz: &[T], n: usize, d: usize, taps: &[usize]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let kk = block.kernel * block.kernel;
    let mut dw = vec![T::zero(); block.weight.len()];
    let mut db = vec![T::zero(); d];
    let mut dx = vec![T::zero(); n * d];
    for t in 0..n {
        for o in 0..d {
            let g = dz[t * d + o];
            db[o] = db[o] + g;
            for i in 0..d {
                let base = (o * d + i) * kk;
                for tap in 0..kk {
                    let src = if kk == 1 { t } else { taps[t * kk + tap] };
                    dw[base + tap] = dw[base + tap] + g * x[src * d + i];
                    dx[src * d + i] = dx[src * d + i] + g * block.weight[base + tap];
                }
            }
        }
    }
    (dw, db, dx)
}

fn check_batch<T: Real>(model: &AtfModel<T>, grids: &[BatchGrid<'_, T>]) -> Result<()> {
    let d = model.dim();
    if grids.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for (i, g) in grids.iter().enumerate() {
        if g.height == 0 || g.width == 0 || g.data.len() != g.cells() * d {
            return Err(Error::Shape(format!(
                "batch item {i}: {}x{} grid with {} values does not match dim {d}",
                g.height,
                g.width,
                g.data.len()
            )));
        }
    }
    Ok(())
}

/// Runs the filter over a batch of grids.
///
/// Returns logits as `N x 2` (token-major, images concatenated in batch
/// order) together with the cache needed for [`atf_loss_grad`].
pub fn atf_forward<T: Real>(model: &AtfModel<T>, grids: &[BatchGrid<'_, T>], mode: Mode) -> Result<ForwardCache<T>> {
    check_batch(model, grids)?;
    let d = model.dim();
    let shapes: Vec<(usize, usize)> = grids.iter().map(|g| (g.height, g.width)).collect();
    let n: usize = grids.iter().map(BatchGrid::cells).sum();
    let mut x: Vec<T> = Vec::with_capacity(n * d);
    for g in grids {
        x.extend_from_slice(g.data);
    }
    let nt = T::of(n as f64);

    let mut caches = Vec::with_capacity(model.blocks.len());
    let mut batch_stats = Vec::new();
    for block in &model.blocks {
        let taps = if block.kernel > 1 {
            neighbours(&shapes, block.kernel)
        } else {
            Vec::new()
        };
        let z = conv_forward(block, &x, n, d, &taps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); d];
                for t in 0..n {
                    for c in 0..d {
                        mean[c] = mean[c] + z[t * d + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nt);
                let mut var = vec![T::zero(); d];
                for t in 0..n {
                    for c in 0..d {
                        let dv = z[t * d + c] - mean[c];
                        var[c] = var[c] + dv * dv;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nt);
                (mean, var)
            }
            Mode::Eval => (block.running_mean.clone(), block.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + block.eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        let mut active = vec![false; n * d];
        for t in 0..n {
            for c in 0..d {
                let j = t * d + c;
                xhat[j] = (z[j] - mean[c]) * inv_std[c];
                let y = block.gamma[c] * xhat[j] + block.beta[c];
                if y > T::zero() {
                    out[j] = y;
                    active[j] = true;
                }
            }
        }
        if mode == Mode::Train {
            batch_stats.push((mean, var));
        }
        caches.push(BlockCache {
            input: std::mem::replace(&mut x, out),
            xhat,
            inv_std,
            active,
        });
    }

    let mut logits = vec![T::zero(); n * 2];
    for t in 0..n {
        for c in 0..2 {
            let w = &model.head_weight[c * d..(c + 1) * d];
            logits[t * 2 + c] = w
                .iter()
                .zip(&x[t * d..(t + 1) * d])
                .fold(model.head_bias[c], |acc, (&wv, &xv)| acc + wv * xv);
        }
    }
    Ok(ForwardCache {
        shapes,
        blocks: caches,
        batch_stats,
        features: x,
        logits,
    })
}

/// Mean two-class softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &[T], targets: &[bool]) -> (T, Vec<T>) {
    let n = targets.len();
    assert_eq!(logits.len(), 2 * n, "logits/targets length mismatch");
    let nt = T::of(n as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); 2 * n];
    for (t, &fg) in targets.iter().enumerate() {
        let (l0, l1) = (logits[2 * t], logits[2 * t + 1]);
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let lse = m + (e0 + e1).ln();
        let target = if fg { l1 } else { l0 };
        total = total + (lse - target);
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        grad[2 * t] = (p0 - if fg { T::zero() } else { T::one() }) / nt;
        grad[2 * t + 1] = (p1 - if fg { T::one() } else { T::zero() }) / nt;
    }
    (total / nt, grad)
}

fn flatten_targets(grids: &[BatchGrid<'_, impl Copy>], targets: &[&Mask]) -> Result<Vec<bool>> {
    if grids.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} grids but {} targets",
            grids.len(),
            targets.len()
        )));
    }
    let mut out = Vec::new();
    for (i, (g, m)) in grids.iter().zip(targets).enumerate() {
        if (g.height, g.width) != (m.height, m.width) {
            return Err(Error::Shape(format!(
                "batch item {i}: grid {}x{} vs target {}x{}",
                g.height, g.width, m.height, m.width
            )));
        }
        out.extend_from_slice(&m.bits);
    }
    Ok(out)
}

/// Loss over a batch in train mode and analytic gradients for every
/// trainable tensor, ordered as [`AtfModel::params`].
pub fn atf_loss_grad<T: Real>(
    model: &AtfModel<T>,
    grids: &[BatchGrid<'_, T>],
    targets: &[&Mask],
) -> Result<(T, Vec<Vec<T>>, ForwardCache<T>)> {
    let labels = flatten_targets(grids, targets)?;
    let cache = atf_forward(model, grids, Mode::Train)?;
    let (loss, dlogits) = cross_entropy(&cache.logits, &labels);
    let d = model.dim();
    let n = labels.len();
    let nt = T::of(n as f64);

    // Head.
    let mut d_head_w = vec![T::zero(); 2 * d];
    let mut d_head_b = vec![T::zero(); 2];
    let mut da = vec![T::zero(); n * d];
    for t in 0..n {
        for c in 0..2 {
            let g = dlogits[t * 2 + c];
            d_head_b[c] = d_head_b[c] + g;
            for i in 0..d {
                d_head_w[c * d + i] = d_head_w[c * d + i] + g * cache.features[t * d + i];
                da[t * d + i] = da[t * d + i] + g * model.head_weight[c * d + i];
            }
        }
    }

    let mut block_grads = Vec::with_capacity(model.blocks.len());
    for (block, bc) in model.blocks.iter().zip(&cache.blocks).rev() {
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut dxhat = vec![T::zero(); n * d];
        for j in 0..n * d {
            if bc.active[j] {
                let c = j % d;
                dgamma[c] = dgamma[c] + da[j] * bc.xhat[j];
                dbeta[c] = dbeta[c] + da[j];
                dxhat[j] = da[j] * block.gamma[c];
            }
        }
        let mut sum_dxhat = vec![T::zero(); d];
        let mut sum_dxhat_xhat = vec![T::zero(); d];
        for j in 0..n * d {
            let c = j % d;
            sum_dxhat[c] = sum_dxhat[c] + dxhat[j];
            sum_dxhat_xhat[c] = sum_dxhat_xhat[c] + dxhat[j] * bc.xhat[j];
        }
        let mut dz = vec![T::zero(); n * d];
        for j in 0..n * d {
            let c = j % d;
            dz[j] = bc.inv_std[c] / nt * (nt * dxhat[j] - sum_dxhat[c] - bc.xhat[j] * sum_dxhat_xhat[c]);
        }
        let taps = if block.kernel > 1 {
            neighbours(&cache.shapes, block.kernel)
        } else {
            Vec::new()
        };
        let (dw, db, dx) = conv_backward(block, &bc.input, &dz, n, d, &taps);
        block_grads.push([dw, db, dgamma, dbeta]);
        da = dx;
    }
    block_grads.reverse();
    let mut grads: Vec<Vec<T>> = block_grads.into_iter().flatten().collect();
    grads.push(d_head_w);
    grads.push(d_head_b);
    Ok((loss, grads, cache))
}

fn grid_as<T: Real>(map: &MergedMap) -> Vec<T> {
    map.grid.iter().map(|&v| T::of(v as f64)).collect()
}

/// Eval-mode mask: foreground where the foreground logit is strictly larger.
pub fn atf_predict<T: Real>(model: &AtfModel<T>, map: &MergedMap) -> Result<Mask> {
    if map.dim != model.dim() {
        return Err(Error::Shape(format!(
            "map dim {} does not match model dim {}",
            map.dim,
            model.dim()
        )));
    }
    let data = grid_as::<T>(map);
    let cache = atf_forward(model, &[BatchGrid::new(map.height, map.width, &data)], Mode::Eval)?;
    let bits = cache.logits.chunks_exact(2).map(|l| l[1] > l[0]).collect();
    Mask::from_bits(map.height, map.width, bits)
}

/// Eval-mode activations of the last hidden block, `cells x dim`.
pub fn hidden_features<T: Real>(model: &AtfModel<T>, map: &MergedMap) -> Result<Vec<f64>> {
    let data = grid_as::<T>(map);
    let cache = atf_forward(model, &[BatchGrid::new(map.height, map.width, &data)], Mode::Eval)?;
    Ok(cache.features.iter().map(|v| v.to_f64().unwrap()).collect())
}
