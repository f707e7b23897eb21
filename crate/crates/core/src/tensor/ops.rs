//! Numeric kernels shared by the autodiff graph and the plain executor.
//! All functions are pure: inputs by reference, outputs freshly allocated.
//! Layout is NCHW for feature maps, [out, in/groups, kh, kw] for conv
//! weights, [out, in] for linear weights.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::DimensionMismatch {
            op: what,
            detail: format!("expected rank-4 tensor, got shape {:?}", s),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::DimensionMismatch {
            op: what,
            detail: format!("expected rank-2 tensor, got shape {:?}", s),
        });
    }
    Ok((s[0], s[1]))
}

fn conv_check<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, iw) = dims4(x, "conv2d input")?;
    let (cout, cin_g, kh, kw) = dims4(w, "conv2d weight")?;
    if stride == 0 || groups == 0 {
        return Err(Error::InvalidArgument("conv2d stride and groups must be positive".into()));
    }
    if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::DimensionMismatch {
            op: "conv2d",
            detail: format!("channels in={} out={} groups={} weight in/groups={}", cin, cout, groups, cin_g),
        });
    }
    if h + 2 * pad < kh || iw + 2 * pad < kw {
        return Err(Error::DimensionMismatch {
            op: "conv2d",
            detail: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, iw + 2 * pad),
        });
    }
    Ok((n, cin, h, iw, cout, kh, kw, cin_g))
}

/// 2-d convolution, no bias.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, in_w, cout, kh, kw, cin_g) = conv_check(x, w, stride, pad, groups)?;
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(in_w, kw, stride, pad);
    let cout_g = cout / groups;
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    // Pointwise path: each output plane is a weighted sum of input planes.
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let plane = h * in_w;
        for ni in 0..n {
            for g in 0..groups {
                for cog in 0..cout_g {
                    let co = g * cout_g + cog;
                    let yp = &mut yd[(ni * cout + co) * plane..][..plane];
                    for cig in 0..cin_g {
                        let ci = g * cin_g + cig;
                        let wv = wd[co * cin_g + cig];
                        let xp = &xd[(ni * cin + ci) * plane..][..plane];
                        for (yv, &xv) in yp.iter_mut().zip(xp) {
                            *yv = *yv + wv * xv;
                        }
                    }
                }
            }
        }
        return Ok(y);
    }
    // General path: copy each input plane into a zero-padded buffer so the
    // per-tap inner loops run full length with no boundary clipping.
    let (ph, pw) = (h + 2 * pad, in_w + 2 * pad);
    let mut padded = vec![T::zero(); ph * pw];
    for ni in 0..n {
        for g in 0..groups {
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let xplane = &xd[(ni * cin + ci) * h * in_w..][..h * in_w];
                for r in 0..h {
                    padded[(r + pad) * pw + pad..][..in_w]
                        .copy_from_slice(&xplane[r * in_w..][..in_w]);
                }
                for cog in 0..cout_g {
                    let co = g * cout_g + cog;
                    let wbase = (co * cin_g + cig) * kh * kw;
                    for ohi in 0..oh {
                        let yrow = &mut yd[((ni * cout + co) * oh + ohi) * ow..][..ow];
                        for khi in 0..kh {
                            let prow = (ohi * stride + khi) * pw;
                            for kwi in 0..kw {
                                let wv = wd[wbase + khi * kw + kwi];
                                if stride == 1 {
                                    let xs = &padded[prow + kwi..][..ow];
                                    for (yv, &xv) in yrow.iter_mut().zip(xs) {
                                        *yv = *yv + wv * xv;
                                    }
                                } else {
                                    for (owi, yv) in yrow.iter_mut().enumerate() {
                                        *yv = *yv + wv * padded[prow + owi * stride + kwi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    x_shape: &[usize],
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(x_shape);
    let (n, cin, h, in_w, cout, kh, kw, cin_g) = conv_check(&dx, w, stride, pad, groups)?;
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(in_w, kw, stride, pad);
    if dy.shape() != [n, cout, oh, ow] {
        return Err(Error::DimensionMismatch {
            op: "conv2d backward",
            detail: format!("dy shape {:?} vs expected {:?}", dy.shape(), [n, cout, oh, ow]),
        });
    }
    let cout_g = cout / groups;
    let dyd = dy.data();
    let wd = w.data();
    let dxd = dx.data_mut();
    // Pointwise path: each input-gradient plane is a weighted sum of
    // output-gradient planes.
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let plane = h * in_w;
        for ni in 0..n {
            for g in 0..groups {
                for cig in 0..cin_g {
                    let ci = g * cin_g + cig;
                    let dxp = &mut dxd[(ni * cin + ci) * plane..][..plane];
                    for cog in 0..cout_g {
                        let co = g * cout_g + cog;
                        let wv = wd[co * cin_g + cig];
                        let dyp = &dyd[(ni * cout + co) * plane..][..plane];
                        for (dxv, &dyv) in dxp.iter_mut().zip(dyp) {
                            *dxv = *dxv + wv * dyv;
                        }
                    }
                }
            }
        }
        return Ok(dx);
    }
    // General path: scatter into a zero-padded plane buffer with full-length
    // per-tap loops, then copy the interior back out.
    let (ph, pw) = (h + 2 * pad, in_w + 2 * pad);
    let mut padded = vec![T::zero(); ph * pw];
    for ni in 0..n {
        for g in 0..groups {
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                for v in padded.iter_mut() {
                    *v = T::zero();
                }
                for cog in 0..cout_g {
                    let co = g * cout_g + cog;
                    let wbase = (co * cin_g + cig) * kh * kw;
                    for ohi in 0..oh {
                        let dyrow = &dyd[((ni * cout + co) * oh + ohi) * ow..][..ow];
                        for khi in 0..kh {
                            let prow = (ohi * stride + khi) * pw;
                            for kwi in 0..kw {
                                let wv = wd[wbase + khi * kw + kwi];
                                if stride == 1 {
                                    let dxs = &mut padded[prow + kwi..][..ow];
                                    for (dxv, &dyv) in dxs.iter_mut().zip(dyrow) {
                                        *dxv = *dxv + wv * dyv;
                                    }
                                } else {
                                    for (owi, &dyv) in dyrow.iter().enumerate() {
                                        let idx = prow + owi * stride + kwi;
                                        padded[idx] = padded[idx] + wv * dyv;
                                    }
                                }
                            }
                        }
                    }
                }
                let dxplane = &mut dxd[(ni * cin + ci) * h * in_w..][..h * in_w];
                for r in 0..h {
                    dxplane[r * in_w..][..in_w]
                        .copy_from_slice(&padded[(r + pad) * pw + pad..][..in_w]);
                }
            }
        }
    }
    Ok(dx)
}

/// Gradient of a convolution with respect to its weight.
pub fn conv2d_backward_weight<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let mut dw = Tensor::zeros(w_shape);
    let (n, cin, h, in_w, cout, kh, kw, cin_g) = conv_check(x, &dw, stride, pad, groups)?;
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(in_w, kw, stride, pad);
    if dy.shape() != [n, cout, oh, ow] {
        return Err(Error::DimensionMismatch {
            op: "conv2d backward",
            detail: format!("dy shape {:?} vs expected {:?}", dy.shape(), [n, cout, oh, ow]),
        });
    }
    let cout_g = cout / groups;
    let dyd = dy.data();
    let xd = x.data();
    let dwd = dw.data_mut();
    // Pointwise path: each weight gradient is a dot product of one input
    // plane with one output-gradient plane.
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let plane = h * in_w;
        for ni in 0..n {
            for g in 0..groups {
                for cog in 0..cout_g {
                    let co = g * cout_g + cog;
                    let dyp = &dyd[(ni * cout + co) * plane..][..plane];
                    for cig in 0..cin_g {
                        let ci = g * cin_g + cig;
                        let xp = &xd[(ni * cin + ci) * plane..][..plane];
                        let mut acc = T::zero();
                        for (&xv, &dyv) in xp.iter().zip(dyp) {
                            acc = acc + xv * dyv;
                        }
                        dwd[co * cin_g + cig] = dwd[co * cin_g + cig] + acc;
                    }
                }
            }
        }
        return Ok(dw);
    }
    // General path: zero-padded input planes give full-length per-tap dot
    // products with no boundary clipping.
    let (ph, pw) = (h + 2 * pad, in_w + 2 * pad);
    let mut padded = vec![T::zero(); ph * pw];
    for ni in 0..n {
        for g in 0..groups {
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let xplane = &xd[(ni * cin + ci) * h * in_w..][..h * in_w];
                for r in 0..h {
                    padded[(r + pad) * pw + pad..][..in_w]
                        .copy_from_slice(&xplane[r * in_w..][..in_w]);
                }
                for cog in 0..cout_g {
                    let co = g * cout_g + cog;
                    let wbase = (co * cin_g + cig) * kh * kw;
                    for ohi in 0..oh {
                        let dyrow = &dyd[((ni * cout + co) * oh + ohi) * ow..][..ow];
                        for khi in 0..kh {
                            let prow = (ohi * stride + khi) * pw;
                            for kwi in 0..kw {
                                let mut acc = T::zero();
                                if stride == 1 {
                                    let xs = &padded[prow + kwi..][..ow];
                                    for (&xv, &dyv) in xs.iter().zip(dyrow) {
                                        acc = acc + xv * dyv;
                                    }
                                } else {
                                    for (owi, &dyv) in dyrow.iter().enumerate() {
                                        acc = acc + padded[prow + owi * stride + kwi] * dyv;
                                    }
                                }
                                let wi = wbase + khi * kw + kwi;
                                dwd[wi] = dwd[wi] + acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dw)
}

/// Normalization epsilon shared by every layer in train and eval mode.
pub const NORM_EPS: f64 = 1e-5;

/// Normalization statistics for one layer: per-channel mean and biased
/// variance collected over batch and spatial dimensions.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel mean and biased variance of one batch, accumulated in f64
/// with a two-pass sweep (mean first, then centered squares).
pub fn batch_norm_stats<T: Scalar>(x: &Tensor<T>) -> Result<NormStats> {
    let (n, c, h, w) = dims4(x, "norm input")?;
    let m = (n * h * w).max(1) as f64;
    let plane = h * w;
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                sum += xd[i].to_f64_val();
            }
        }
        mean[ci] = sum / m;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let d = xd[i].to_f64_val() - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / m;
    }
    Ok(NormStats { mean, var })
}

/// Batch normalization in training mode: per-batch statistics, biased
/// variance. Returns the output plus the per-channel mean and inverse
/// standard deviation needed by the backward pass.
pub fn bn_train_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = dims4(x, "norm input")?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::DimensionMismatch {
            op: "norm",
            detail: format!("{} channels, scale {} shift {}", c, scale.len(), shift.len()),
        });
    }
    let m = n * h * w;
    if m == 0 {
        return Err(Error::InvalidArgument("norm over an empty batch".into()));
    }
    let mf = T::from_f64_val(m as f64);
    let xd = x.data();
    let plane = h * w;
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        let mut sq = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &v in &xd[base..base + plane] {
                s = s + v;
                sq = sq + v * v;
            }
        }
        let mu = s / mf;
        let var = (sq / mf - mu * mu).max(T::zero());
        mean[ci] = mu;
        inv_std[ci] = T::one() / (var + eps).sqrt();
    }
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    let sd = scale.data();
    let bd = shift.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let g = sd[ci] * inv_std[ci];
            let b = bd[ci] - mean[ci] * g;
            for i in base..base + plane {
                yd[i] = xd[i] * g + b;
            }
        }
    }
    Ok((y, mean, inv_std))
}

/// Gradients for training-mode batch normalization.
pub fn bn_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    scale: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dims4(x, "norm input")?;
    let m = n * h * w;
    let mf = T::from_f64_val(m as f64);
    let plane = h * w;
    let xd = x.data();
    let dyd = dy.data();
    let sd = scale.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dscale = Tensor::zeros(&[c]);
    let mut dshift = Tensor::zeros(&[c]);
    for ci in 0..c {
        // First pass: sum(dy) and sum(dy * xhat) over the channel.
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let xhat = (xd[i] - mean[ci]) * inv_std[ci];
                sum_dy = sum_dy + dyd[i];
                sum_dy_xhat = sum_dy_xhat + dyd[i] * xhat;
            }
        }
        dscale.data_mut()[ci] = sum_dy_xhat;
        dshift.data_mut()[ci] = sum_dy;
        let k = sd[ci] * inv_std[ci] / mf;
        let dxd = dx.data_mut();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let xhat = (xd[i] - mean[ci]) * inv_std[ci];
                dxd[i] = k * (mf * dyd[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    Ok((dx, dscale, dshift))
}

/// Batch normalization with frozen statistics (inference mode).
pub fn bn_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    stats: &NormStats,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "norm input")?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::DimensionMismatch {
            op: "norm eval",
            detail: format!("{} channels, stats cover {}", c, stats.mean.len()),
        });
    }
    let plane = h * w;
    let xd = x.data();
    let sd = scale.data();
    let bd = shift.data();
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    for ci in 0..c {
        let g = sd[ci] * T::from_f64_val(1.0 / (stats.var[ci] + eps).sqrt());
        let b = bd[ci] - T::from_f64_val(stats.mean[ci]) * g;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                yd[i] = xd[i] * g + b;
            }
        }
    }
    Ok(y)
}

/// Accumulate per-channel sums for statistics calibration. `acc` holds
/// (sum, sum of squares, count) per channel.
pub fn bn_collect<T: Scalar>(x: &Tensor<T>, acc: &mut (Vec<f64>, Vec<f64>, u64)) -> Result<()> {
    let (n, c, h, w) = dims4(x, "norm input")?;
    if acc.0.is_empty() {
        acc.0 = vec![0.0; c];
        acc.1 = vec![0.0; c];
    }
    if acc.0.len() != c {
        return Err(Error::DimensionMismatch {
            op: "norm calibration",
            detail: format!("{} channels vs accumulator {}", c, acc.0.len()),
        });
    }
    let plane = h * w;
    let xd = x.data();
    for ci in 0..c {
        let mut s = 0.0;
        let mut sq = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &v in &xd[base..base + plane] {
                let v = v.to_f64_val();
                s += v;
                sq += v * v;
            }
        }
        acc.0[ci] += s;
        acc.1[ci] += sq;
    }
    acc.2 += (n * plane) as u64;
    Ok(())
}

/// Finish a calibration accumulator into mean/variance.
pub fn bn_finish(acc: &(Vec<f64>, Vec<f64>, u64)) -> NormStats {
    let count = acc.2.max(1) as f64;
    let mean: Vec<f64> = acc.0.iter().map(|&s| s / count).collect();
    let var: Vec<f64> = acc
        .1
        .iter()
        .zip(&mean)
        .map(|(&sq, &mu)| (sq / count - mu * mu).max(0.0))
        .collect();
    NormStats { mean, var }
}

/// x * clamp(x + 3, 0, 6) / 6, applied elementwise.
pub fn hardswish_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let three = T::from_f64_val(3.0);
    let six = T::from_f64_val(6.0);
    let mut y = x.clone();
    for v in y.data_mut() {
        let gate = (*v + three).max(T::zero()).min(six);
        *v = *v * gate / six;
    }
    y
}

/// Derivative of hardswish: 0 below -3, 1 above 3, (2x + 3)/6 between.
pub fn hardswish_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let three = T::from_f64_val(3.0);
    let six = T::from_f64_val(6.0);
    let two = T::from_f64_val(2.0);
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let d = if v <= -three {
            T::zero()
        } else if v >= three {
            T::one()
        } else {
            (two * v + three) / six
        };
        *g = *g * d;
    }
    dx
}

/// max(0, x) elementwise.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.max(T::zero());
    }
    y
}

/// Gradient of relu; passes where the input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

/// Mean over the spatial dimensions: [N, C, H, W] to [N, C].
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "pool input")?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::InvalidArgument("pool over empty spatial extent".into()));
    }
    let inv = T::from_f64_val(1.0 / plane as f64);
    let xd = x.data();
    let mut y = Tensor::zeros(&[n, c]);
    let yd = y.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut s = T::zero();
            for &v in &xd[base..base + plane] {
                s = s + v;
            }
            yd[ni * c + ci] = s * inv;
        }
    }
    Ok(y)
}

/// Gradient of global average pooling.
pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = dims2(dy, "pool gradient")?;
    let plane = h * w;
    let inv = T::from_f64_val(1.0 / plane as f64);
    let dyd = dy.data();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dxd = dx.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let g = dyd[ni * c + ci] * inv;
            let base = (ni * c + ci) * plane;
            for v in &mut dxd[base..base + plane] {
                *v = g;
            }
        }
    }
    Ok(dx)
}

/// Fully connected layer: y = x w^T + b with x [N, D], w [K, D], b [K].
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, d) = dims2(x, "linear input")?;
    let (k, dw) = dims2(w, "linear weight")?;
    if d != dw {
        return Err(Error::DimensionMismatch {
            op: "linear",
            detail: format!("input features {} vs weight features {}", d, dw),
        });
    }
    if let Some(b) = b {
        if b.len() != k {
            return Err(Error::DimensionMismatch {
                op: "linear",
                detail: format!("bias {} vs outputs {}", b.len(), k),
            });
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut y = Tensor::zeros(&[n, k]);
    let yd = y.data_mut();
    for ni in 0..n {
        let xrow = &xd[ni * d..(ni + 1) * d];
        for ki in 0..k {
            let wrow = &wd[ki * d..(ki + 1) * d];
            let mut s = T::zero();
            for (a, b) in xrow.iter().zip(wrow) {
                s = s + *a * *b;
            }
            yd[ni * k + ki] = s;
        }
    }
    if let Some(b) = b {
        let bd = b.data();
        for ni in 0..n {
            for ki in 0..k {
                yd[ni * k + ki] = yd[ni * k + ki] + bd[ki];
            }
        }
    }
    Ok(y)
}

/// Gradients of the fully connected layer: (dx, dw, db).
pub fn linear_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, k) = dims2(dy, "linear gradient")?;
    let (_, d) = dims2(x, "linear input")?;
    let dyd = dy.data();
    let xd = x.data();
    let wd = w.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[k]);
    {
        let dxd = dx.data_mut();
        for ni in 0..n {
            for ki in 0..k {
                let g = dyd[ni * k + ki];
                let wrow = &wd[ki * d..(ki + 1) * d];
                let xrow = &mut dxd[ni * d..(ni + 1) * d];
                for (o, &wv) in xrow.iter_mut().zip(wrow) {
                    *o = *o + g * wv;
                }
            }
        }
    }
    {
        let dwd = dw.data_mut();
        for ni in 0..n {
            for ki in 0..k {
                let g = dyd[ni * k + ki];
                let xrow = &xd[ni * d..(ni + 1) * d];
                let wrow = &mut dwd[ki * d..(ki + 1) * d];
                for (o, &xv) in wrow.iter_mut().zip(xrow) {
                    *o = *o + g * xv;
                }
            }
        }
    }
    {
        let dbd = db.data_mut();
        for ni in 0..n {
            for ki in 0..k {
                dbd[ki] = dbd[ki] + dyd[ni * k + ki];
            }
        }
    }
    Ok((dx, dw, db))
}

/// Row-wise softmax of a [N, K] logit matrix.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = dims2(logits, "softmax input")?;
    let xd = logits.data();
    let mut y = Tensor::zeros(&[n, k]);
    let yd = y.data_mut();
    for ni in 0..n {
        let row = &xd[ni * k..(ni + 1) * k];
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in yd[ni * k..(ni + 1) * k].iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            z = z + e;
        }
        for o in &mut yd[ni * k..(ni + 1) * k] {
            *o = *o / z;
        }
    }
    Ok(y)
}

/// Per-row cross entropy against integer targets: -log softmax(x)[t],
/// computed via log-sum-exp for stability.
pub fn cross_entropy_rows<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<T>> {
    let (n, k) = dims2(logits, "cross entropy input")?;
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            op: "cross entropy",
            detail: format!("{} rows vs {} targets", n, targets.len()),
        });
    }
    let xd = logits.data();
    let mut out = Vec::with_capacity(n);
    for (ni, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::IndexOutOfRange { what: "class target", index: t, size: k });
        }
        let row = &xd[ni * k..(ni + 1) * k];
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        out.push(m + z.ln() - row[t]);
    }
    Ok(out)
}

/// Index of the largest value in each row, first occurrence winning ties.
pub fn argmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k) = dims2(x, "argmax input")?;
    if k == 0 {
        return Err(Error::InvalidArgument("argmax over empty rows".into()));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let row = &xd[ni * k..(ni + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        // 3x3 kernel with a single center 1 and pad 1 is the identity.
        let x = t(&[1, 1, 3, 3], (0..9).map(|i| i as f64).collect());
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0;
        let w = t(&[1, 1, 3, 3], wv);
        let y = conv2d_forward(&x, &w, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_hand_computed_example() {
        // 2x2 kernel of ones over a 3x3 ramp, stride 1, no padding:
        // each output is the sum of a 2x2 window.
        let x = t(&[1, 1, 3, 3], (1..=9).map(|i| i as f64).collect());
        let w = t(&[1, 1, 2, 2], vec![1.0; 4]);
        let y = conv2d_forward(&x, &w, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_stride_two_downsamples() {
        let x = t(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect());
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0;
        let w = t(&[1, 1, 3, 3], wv);
        let y = conv2d_forward(&x, &w, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn depthwise_conv_keeps_channels_separate() {
        // Two channels, each with its own 1x1 kernel (2x and 3x).
        let x = t(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = t(&[2, 1, 1, 1], vec![2.0, 3.0]);
        let y = conv2d_forward(&x, &w, 1, 0, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0, 15.0, 18.0, 21.0, 24.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..2 * 3 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..4 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[2, 3, 5, 5], xs);
        let w = t(&[4, 3, 3, 3], ws);
        let stride = 2;
        let pad = 1;
        let y = conv2d_forward(&x, &w, stride, pad, 1).unwrap();
        // Loss = sum of outputs weighted by a fixed pattern.
        let dy_data: Vec<f64> = (0..y.len()).map(|i| ((i * 7 + 3) % 11) as f64 / 10.0 - 0.5).collect();
        let dy = t(y.shape(), dy_data.clone());
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            conv2d_forward(x, w, stride, pad, 1)
                .unwrap()
                .data()
                .iter()
                .zip(&dy_data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let dx = conv2d_backward_input(&dy, x.shape(), &w, stride, pad, 1).unwrap();
        let dw = conv2d_backward_weight(&dy, &x, w.shape(), stride, pad, 1).unwrap();
        let h = 1e-5;
        for idx in [0usize, 7, 31, 74, 149] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-6, "dx[{}]: {} vs {}", idx, num, dx.data()[idx]);
        }
        for idx in [0usize, 13, 55, 107] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((num - dw.data()[idx]).abs() < 1e-6, "dw[{}]: {} vs {}", idx, num, dw.data()[idx]);
        }
    }

    #[test]
    fn norm_output_has_zero_mean_unit_variance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| rng.gen_range(-2.0..5.0)).collect();
        let x = t(&[2, 2, 4, 4], xs);
        let scale = t(&[2], vec![1.0, 1.0]);
        let shift = t(&[2], vec![0.0, 0.0]);
        let (y, _, _) = bn_train_forward(&x, &scale, &shift, 1e-12).unwrap();
        let m = 2 * 4 * 4;
        for ci in 0..2 {
            let mut s = 0.0;
            let mut sq = 0.0;
            for ni in 0..2 {
                let base = (ni * 2 + ci) * 16;
                for &v in &y.data()[base..base + 16] {
                    s += v;
                    sq += v * v;
                }
            }
            let mu = s / m as f64;
            let var = sq / m as f64 - mu * mu;
            assert!(mu.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn norm_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[2, 2, 3, 3], xs);
        let scale = t(&[2], vec![1.3, 0.7]);
        let shift = t(&[2], vec![0.1, -0.2]);
        let eps = 1e-5;
        let dy_data: Vec<f64> = (0..x.len()).map(|i| ((i * 13 + 5) % 17) as f64 / 10.0 - 0.8).collect();
        let loss = |x: &Tensor<f64>, s: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let (y, _, _) = bn_train_forward(x, s, b, eps).unwrap();
            y.data().iter().zip(&dy_data).map(|(a, b)| a * b).sum()
        };
        let (_, mean, inv_std) = bn_train_forward(&x, &scale, &shift, eps).unwrap();
        let dy = t(x.shape(), dy_data.clone());
        let (dx, dscale, dshift) = bn_train_backward(&dy, &x, &scale, &mean, &inv_std).unwrap();
        let h = 1e-6;
        for idx in [0usize, 5, 17, 35] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &scale, &shift) - loss(&xm, &scale, &shift)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-5, "dx[{}]: {} vs {}", idx, num, dx.data()[idx]);
        }
        for ci in 0..2 {
            let mut sp = scale.clone();
            sp.data_mut()[ci] += h;
            let mut sm = scale.clone();
            sm.data_mut()[ci] -= h;
            let num = (loss(&x, &sp, &shift) - loss(&x, &sm, &shift)) / (2.0 * h);
            assert!((num - dscale.data()[ci]).abs() < 1e-5);
            let mut bp = shift.clone();
            bp.data_mut()[ci] += h;
            let mut bm = shift.clone();
            bm.data_mut()[ci] -= h;
            let num = (loss(&x, &scale, &bp) - loss(&x, &scale, &bm)) / (2.0 * h);
            assert!((num - dshift.data()[ci]).abs() < 1e-5);
        }
    }

    #[test]
    fn calibrated_stats_match_single_batch_stats() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..4 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[4, 2, 3, 3], xs);
        // Collecting the full tensor in two halves equals one-shot statistics.
        let a = x.slice(&[0..2, 0..2, 0..3, 0..3]).unwrap();
        let b = x.slice(&[2..4, 0..2, 0..3, 0..3]).unwrap();
        let mut acc = (vec![], vec![], 0);
        bn_collect(&a, &mut acc).unwrap();
        bn_collect(&b, &mut acc).unwrap();
        let stats = bn_finish(&acc);
        let scale = t(&[2], vec![1.0, 1.0]);
        let shift = t(&[2], vec![0.0, 0.0]);
        let (_, mean, inv_std) = bn_train_forward(&x, &scale, &shift, 1e-5).unwrap();
        for ci in 0..2 {
            assert!((stats.mean[ci] - mean[ci]).abs() < 1e-12);
            let var = 1.0 / (inv_std[ci] * inv_std[ci]) - 1e-5;
            assert!((stats.var[ci] - var).abs() < 1e-9);
        }
    }

    #[test]
    fn hardswish_known_values() {
        let x = t(&[5], vec![-4.0, -3.0, 0.0, 3.0, 4.0]);
        let y = hardswish_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 3.0, 4.0]);
        let x = t(&[1], vec![1.0]);
        let y = hardswish_forward(&x);
        assert!((y.data()[0] - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn hardswish_gradient_matches_finite_differences() {
        let xs = vec![-3.5, -2.0, -0.5, 0.0, 0.5, 2.0, 3.5];
        let x = t(&[7], xs.clone());
        let dy = t(&[7], vec![1.0; 7]);
        let dx = hardswish_backward(&x, &dy);
        let h = 1e-6;
        for (i, &v) in xs.iter().enumerate() {
            let f = |z: f64| z * (z + 3.0).clamp(0.0, 6.0) / 6.0;
            let num = (f(v + h) - f(v - h)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() < 1e-5, "x={}: {} vs {}", v, num, dx.data()[i]);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x = t(&[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = t(&[2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = t(&[2], vec![0.3, -0.1]);
        let dy_data: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) / 3.0).collect();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            linear_forward(x, w, Some(b))
                .unwrap()
                .data()
                .iter()
                .zip(&dy_data)
                .map(|(a, c)| a * c)
                .sum()
        };
        let dy = t(&[3, 2], dy_data.clone());
        let (dx, dw, db) = linear_backward(&dy, &x, &w).unwrap();
        let h = 1e-6;
        for idx in 0..12 {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..8 {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((num - dw.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..2 {
            let mut bp = b.clone();
            bp.data_mut()[idx] += h;
            let mut bm = b.clone();
            bm.data_mut()[idx] -= h;
            let num = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((num - db.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_give_log_k() {
        let logits = t(&[2, 4], vec![0.0; 8]);
        let ce = cross_entropy_rows(&logits, &[0, 3]).unwrap();
        for v in ce {
            assert!((v - (4.0f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_shift_invariant_and_stable() {
        let logits = t(&[1, 3], vec![1000.0, 1001.0, 999.0]);
        let ce = cross_entropy_rows(&logits, &[1]).unwrap();
        let small = t(&[1, 3], vec![0.0, 1.0, -1.0]);
        let ce2 = cross_entropy_rows(&small, &[1]).unwrap();
        assert!((ce[0] - ce2[0]).abs() < 1e-9);
        assert!(ce[0].is_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = t(&[2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0]);
        let p = softmax_rows(&logits).unwrap();
        for ni in 0..2 {
            let s: f64 = p.data()[ni * 3..(ni + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((p.data()[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pool_averages_each_plane() {
        let x = t(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[2.5, 25.0]);
        let dy = t(&[1, 2], vec![4.0, 8.0]);
        let dx = global_avg_pool_backward(&dy, 2, 2).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn argmax_breaks_ties_toward_first() {
        let x = t(&[2, 3], vec![1.0, 3.0, 3.0, 0.5, 0.1, 0.2]);
        assert_eq!(argmax_rows(&x).unwrap(), vec![1, 0]);
    }
}
