use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{linalg, Tensor};

/// Row-wise softmax of a rank-2 tensor with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = x.dims2("softmax_rows")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Backward of [`softmax_rows`] given its output `y`: `dx = y ⊙ (dy − ⟨dy, y⟩_row)`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    y.expect_same_shape(dy, "softmax_rows_backward")?;
    let (_, cols) = y.dims2("softmax_rows_backward")?;
    let mut dx = dy.clone();
    for (drow, yrow) in dx.data_mut().chunks_exact_mut(cols).zip(y.data().chunks_exact(cols)) {
        let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
        for (d, &p) in drow.iter_mut().zip(yrow) {
            *d = p * (*d - dot);
        }
    }
    Ok(dx)
}

/// Mean over the leading axes of `x`, leaving the trailing channel axis.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let rows = x.len() / x.shape().last().copied().unwrap_or(1);
    x.sum_rows().scale(T::one() / T::of(rows as f64))
}

/// Global average pooling of an `H×W×C` map into a length-`C` vector.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.dims3("global_avg_pool")?;
    Ok(mean_rows(x))
}

/// Spreads `dq` evenly over the `H×W` positions of `shape`.
pub fn global_avg_pool_backward<T: Scalar>(shape: &[usize], dq: &Tensor<T>) -> Result<Tensor<T>> {
    let &[h, w, c] = shape else {
        return Err(Error::shape("global_avg_pool_backward", shape, dq.shape()));
    };
    if dq.len() != c {
        return Err(Error::shape("global_avg_pool_backward", shape, dq.shape()));
    }
    let inv = T::one() / T::of((h * w) as f64);
    let mut dx = Tensor::zeros(shape);
    dx.add_row_vector(&dq.scale(inv))?;
    Ok(dx)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, "relu_backward", |v, d| if v > T::zero() { d } else { T::zero() })
}

pub struct LayerNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

/// Normalizes each row over its last axis, then applies `gamma`/`beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let cols = *x.shape().last().unwrap_or(&0);
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let n = T::of(cols as f64);
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.len() / cols);
    for row in normalized.data_mut().chunks_exact_mut(cols) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let mut y = normalized.clone();
    for row in y.data_mut().chunks_exact_mut(cols) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Returns `dx` and accumulates into `dgamma`/`dbeta`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    cache.normalized.expect_same_shape(dy, "layer_norm_backward")?;
    let cols = gamma.len();
    let n = T::of(cols as f64);
    let mut dx = dy.clone();
    let rows = dx
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(cache.normalized.data().chunks_exact(cols))
        .zip(&cache.inv_std);
    for ((drow, xhat), &inv) in rows {
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for c in 0..cols {
            dgamma.data_mut()[c] += drow[c] * xhat[c];
            dbeta.data_mut()[c] += drow[c];
            let dn = drow[c] * gamma.data()[c];
            mean_d += dn;
            mean_dx += dn * xhat[c];
        }
        mean_d /= n;
        mean_dx /= n;
        for c in 0..cols {
            let dn = drow[c] * gamma.data()[c];
            drow[c] = inv * (dn - mean_d - xhat[c] * mean_dx);
        }
    }
    Ok(dx)
}

/// Valid `x` range `[lo, hi)` of output columns and the source column offset for tap `kx`.
fn tap_span(w: usize, kx: usize) -> (usize, usize) {
    match kx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w - 1),
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, cin) = x.dims3("conv3x3")?;
    let width = 9 * cin;
    let mut col = Tensor::zeros(&[h * w, width]);
    let src = x.data();
    let dst = col.data_mut();
    for y in 0..h {
        for ky in 0..3 {
            let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else {
                continue;
            };
            for kx in 0..3 {
                let (lo, hi) = tap_span(w, kx);
                let tap = (ky * 3 + kx) * cin;
                for xx in lo..hi {
                    let from = (sy * w + xx + kx - 1) * cin;
                    let to = (y * w + xx) * width + tap;
                    dst[to..to + cin].copy_from_slice(&src[from..from + cin]);
                }
            }
        }
    }
    Ok(col)
}

fn col2im<T: Scalar>(col: &Tensor<T>, h: usize, w: usize, cin: usize) -> Tensor<T> {
    let width = 9 * cin;
    let mut x = Tensor::zeros(&[h, w, cin]);
    let src = col.data();
    let dst = x.data_mut();
    for y in 0..h {
        for ky in 0..3 {
            let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else {
                continue;
            };
            for kx in 0..3 {
                let (lo, hi) = tap_span(w, kx);
                let tap = (ky * 3 + kx) * cin;
                for xx in lo..hi {
                    let to = (sy * w + xx + kx - 1) * cin;
                    let from = (y * w + xx) * width + tap;
                    for (d, &v) in dst[to..to + cin].iter_mut().zip(&src[from..from + cin]) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

fn check_conv_weights<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<usize> {
    let (_, _, cin) = x.dims3("conv3x3")?;
    let (taps, cout) = weight.dims2("conv3x3")?;
    if taps != 9 * cin || bias.len() != cout {
        return Err(Error::shape("conv3x3", x.shape(), weight.shape()));
    }
    Ok(cout)
}

/// Same-padded 3×3 convolution of an `H×W×Cin` map.
///
/// `weight` is laid out as `[(ky·3 + kx)·Cin + ci, co]`, i.e. a `9·Cin × Cout` matrix.
pub fn conv3x3<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let cout = check_conv_weights(x, weight, bias)?;
    let (h, w, _) = x.dims3("conv3x3")?;
    let mut y = linalg::matmul(&im2col(x)?, weight)?;
    y.add_row_vector(bias)?;
    y.reshape(&[h, w, cout])
}

/// Returns `dx` and accumulates into `dweight`/`dbias`.
pub fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, cin) = x.dims3("conv3x3_backward")?;
    let (_, cout) = weight.dims2("conv3x3_backward")?;
    if dy.shape() != [h, w, cout] {
        return Err(Error::shape("conv3x3_backward", x.shape(), dy.shape()));
    }
    let dy2 = dy.clone().reshape(&[h * w, cout])?;
    let col = im2col(x)?;
    dweight.add_assign(&linalg::matmul_at_b(&col, &dy2)?)?;
    dbias.add_assign(&dy2.sum_rows())?;
    let dcol = linalg::matmul_a_bt(&dy2, weight)?;
    Ok(col2im(&dcol, h, w, cin))
}

/// Input gradient of [`conv3x3`] alone, for frozen weights.
pub fn conv3x3_backward_input<T: Scalar>(weight: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, cout) = dy.dims3("conv3x3_backward_input")?;
    let (taps, wcout) = weight.dims2("conv3x3_backward_input")?;
    if wcout != cout || taps % 9 != 0 {
        return Err(Error::shape("conv3x3_backward_input", weight.shape(), dy.shape()));
    }
    let dcol = linalg::matmul_a_bt(&dy.clone().reshape(&[h * w, cout])?, weight)?;
    Ok(col2im(&dcol, h, w, taps / 9))
}
