//! Differentiable tensor helpers built from primitive candle ops.
//!
//! Everything here has a backward pass through candle's autodiff, which is
//! why softmax and layer norm are spelled out rather than taken from fused
//! kernels.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{shape_err, Result};

/// Row-stochastic [n_out, n_in] matrix of 1-D linear interpolation weights
/// with aligned corners (the first and last samples map onto each other).
pub fn interp_matrix(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if n_in == 0 || n_out == 0 {
        return Err(shape_err!("cannot interpolate {n_in} -> {n_out} samples"));
    }
    let mut w = vec![0f64; n_out * n_in];
    for i in 0..n_out {
        let src = if n_out == 1 || n_in == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        w[i * n_in + lo] += 1.0 - frac;
        if frac > 0.0 {
            w[i * n_in + hi] += frac;
        }
    }
    Ok(Tensor::from_vec(w, (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// 2-D convolution of [N, C, H, W] by [O, C, k, k].
///
/// candle's CPU kernel mistakes a contiguous input with C == H == W for a
/// channels-last buffer and reads it in the wrong order; such inputs are
/// passed as a channels-last copy viewed as [N, C, H, W], which takes the
/// kernel's general strided path.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let x = if c == h && h == w && c > 1 {
        x.permute((0, 2, 3, 1))?.contiguous()?.permute((0, 3, 1, 2))?
    } else {
        x.clone()
    };
    Ok(x.conv2d(weight, padding, stride, 1, 1)?)
}

/// Bilinear resize of the two trailing dimensions (aligned corners).
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(shape_err!("bilinear resize needs rank >= 2, got {dims:?}"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ry = interp_matrix(h, height, x.dtype(), x.device())?;
    let rx = interp_matrix(w, width, x.dtype(), x.device())?.t()?;
    let rows = ry.broadcast_matmul(&x.contiguous()?)?;
    Ok(rows.broadcast_matmul(&rx)?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax over dimension `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?;
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Layer normalisation over the last dimension with affine parameters.
pub fn layer_norm_last(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Mean per-pixel two-class cross entropy between logits [2, H, W] and a
/// 0/1 target [H, W].
pub fn cross_entropy_2class(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let dims = logits.dims();
    if dims.len() != 3 || dims[0] != 2 || target.dims() != &dims[1..] {
        return Err(shape_err!(
            "cross entropy needs logits [2,H,W] and target [H,W], got {:?} and {:?}",
            dims,
            target.dims()
        ));
    }
    let target = target.to_dtype(logits.dtype())?;
    let onehot = Tensor::stack(&[(1.0 - &target)?, target], 0)?;
    let logp = log_softmax(logits, 0)?;
    let n = (dims[1] * dims[2]) as f64;
    Ok(((logp * onehot)?.sum_all()? / -n)?)
}

/// Softmax probability of the foreground channel of [2, H, W] logits.
pub fn foreground_probability(logits: &Tensor) -> Result<Tensor> {
    let diff = (logits.get(1)? - logits.get(0)?)?;
    // sigmoid(l1 - l0) == softmax(l)[1]
    let neg = diff.neg()?.exp()?;
    Ok((neg + 1.0)?.recip()?)
}
