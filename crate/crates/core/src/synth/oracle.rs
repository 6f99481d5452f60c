//! Reference computations that deliberately avoid the production code
//! paths they are used to check.

use crate::atf::{atf_forward, cross_entropy, AtfModel, BatchGrid, Mode, Real};
use crate::error::{Error, Result};
use crate::maskops::Mask;

/// Global k-means optimum by enumerating every partition of the points
/// into exactly `k` nonempty groups.
///
/// Returns the optimal within-group sum of squares and one optimal
/// labelling (groups numbered by first member).
pub fn exact_kmeans_oracle(points: &[f64], dim: usize, k: usize) -> Result<(f64, Vec<usize>)> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Shape("point buffer does not match dim".into()));
    }
    let n = points.len() / dim;
    if n > 12 || k > 3 || k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "enumeration needs 1 <= k <= 3, k <= n <= 12 (n={n}, k={k})"
        )));
    }
    let mut labels = vec![0usize; n];
    let mut best = (f64::INFINITY, Vec::new());
    enumerate(points, dim, k, 0, 0, &mut labels, &mut best);
    Ok(best)
}

// Restricted growth strings: label[i] <= max(label[..i]) + 1.
fn enumerate(points: &[f64], dim: usize, k: usize, i: usize, used: usize, labels: &mut [usize], best: &mut (f64, Vec<usize>)) {
    let n = labels.len();
    if i == n {
        if used == k {
            let cost = partition_cost(points, dim, labels, k);
            if cost < best.0 {
                *best = (cost, labels.to_vec());
            }
        }
        return;
    }
    // Not enough points left to open the remaining groups.
    if k - used > n - i {
        return;
    }
    for l in 0..=used.min(k - 1) {
        labels[i] = l;
        enumerate(points, dim, k, i + 1, used.max(l + 1), labels, best);
    }
}

fn partition_cost(points: &[f64], dim: usize, labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for g in 0..k {
        let members: Vec<&[f64]> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == g)
            .map(|(i, _)| &points[i * dim..(i + 1) * dim])
            .collect();
        let m = members.len() as f64;
        for d in 0..dim {
            let mean = members.iter().map(|p| p[d]).sum::<f64>() / m;
            total += members.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>();
        }
    }
    total
}

fn mirror(i: isize, n: isize) -> isize {
    // Fold repeatedly: -1 -> 0, n -> n - 1.
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i;
        }
    }
}

/// Naive 2-D correlation of a `height x width` grid with an odd-sized
/// kernel (`kernel_h x kernel_w`, row-major) using mirrored borders.
pub fn direct_convolution_oracle(
    values: &[f64],
    height: usize,
    width: usize,
    kernel: &[f64],
    kernel_h: usize,
    kernel_w: usize,
) -> Result<Vec<f64>> {
    if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) || kernel.len() != kernel_h * kernel_w {
        return Err(Error::InvalidArgument("kernel must have odd dimensions".into()));
    }
    if values.len() != height * width {
        return Err(Error::Shape("grid size mismatch".into()));
    }
    let (ry, rx) = ((kernel_h / 2) as isize, (kernel_w / 2) as isize);
    let mut out = vec![0.0; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for ky in -ry..=ry {
                for kx in -rx..=rx {
                    let sy = mirror(y + ky, height as isize) as usize;
                    let sx = mirror(x + kx, width as isize) as usize;
                    let w = kernel[((ky + ry) as usize) * kernel_w + (kx + rx) as usize];
                    acc += w * values[sy * width + sx];
                }
            }
            out[y as usize * width + x as usize] = acc;
        }
    }
    Ok(out)
}

/// Square Gaussian kernel built directly in two dimensions.
pub fn gaussian_kernel_2d(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()))
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Train-mode mean cross-entropy of `model` on a fixed batch.
pub fn train_loss<T: Real>(model: &AtfModel<T>, grids: &[BatchGrid<'_, T>], targets: &[&Mask]) -> Result<T> {
    let labels: Vec<bool> = targets.iter().flat_map(|m| m.bits.iter().copied()).collect();
    let cache = atf_forward(model, grids, Mode::Train)?;
    if cache.logits.len() != 2 * labels.len() {
        return Err(Error::Shape("targets do not cover the batch".into()));
    }
    Ok(cross_entropy(&cache.logits, &labels).0)
}

/// Central differences of [`train_loss`] for every trainable parameter,
/// shaped like [`AtfModel::params`].
pub fn finite_difference_grad<T: Real>(
    model: &AtfModel<T>,
    grids: &[BatchGrid<'_, T>],
    targets: &[&Mask],
    epsilon: T,
) -> Result<Vec<Vec<T>>> {
    let mut probe = model.clone();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (t, &len) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + epsilon;
            let plus = train_loss(&probe, grids, targets)?;
            probe.params_mut()[t][i] = orig - epsilon;
            let minus = train_loss(&probe, grids, targets)?;
            probe.params_mut()[t][i] = orig;
            g.push((plus - minus) / (epsilon + epsilon));
        }
        out.push(g);
    }
    Ok(out)
}
