//! Dense NCHW kernels with their adjoints.
//!
//! Every forward function here has a matching `*_backward` that maps an
//! output gradient to input gradients. The autograd graph composes them; the
//! kernels themselves are stateless and recompute whatever they need.

use ndarray::{concatenate, s, Array2, Array4, ArrayView2, ArrayView3, Axis, Ix4};

use crate::error::{Error, Result};

pub type Tensor = Array4<f64>;

/// Stride, dilation and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Padding that keeps the spatial size for stride 1 and odd kernels.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

/// Unfolds one (C, H, W) image into a (C*kh*kw, oh*ow) column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((channels * kh * kw, oh * ow));
    let out = cols.as_slice_mut().expect("fresh array is contiguous");
    let pad = geom.padding as isize;
    for c in 0..channels {
        let plane = &img[c * height * width..(c + 1) * height * width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                let di = (ki * geom.dilation) as isize - pad;
                let dj = (kj * geom.dilation) as isize - pad;
                for oi in 0..oh {
                    let ii = (oi * geom.stride) as isize + di;
                    if ii < 0 || ii >= height as isize {
                        continue;
                    }
                    let src_row = &plane[ii as usize * width..(ii as usize + 1) * width];
                    let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * geom.stride) as isize + dj;
                        if jj >= 0 && jj < width as isize {
                            *d = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a (C, H, W) buffer.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: ArrayView2<f64>,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    img: &mut [f64],
) {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let pad = geom.padding as isize;
    for c in 0..channels {
        let plane = &mut img[c * height * width..(c + 1) * height * width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let col = &src[row * oh * ow..(row + 1) * oh * ow];
                let di = (ki * geom.dilation) as isize - pad;
                let dj = (kj * geom.dilation) as isize - pad;
                for oi in 0..oh {
                    let ii = (oi * geom.stride) as isize + di;
                    if ii < 0 || ii >= height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * width..(ii as usize + 1) * width];
                    let col_row = &col[oi * ow..(oi + 1) * ow];
                    for (oj, v) in col_row.iter().enumerate() {
                        let jj = (oj * geom.stride) as isize + dj;
                        if jj >= 0 && jj < width as isize {
                            dst_row[jj as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(y: &mut Tensor, bias: Option<&Tensor>) {
    if let Some(b) = bias {
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            plane += b[[0, c, 0, 0]];
        }
    }
}

fn bias_grad(dy: &Tensor) -> Tensor {
    let co = dy.dim().1;
    let mut db = Tensor::zeros((1, co, 1, 1));
    for (c, plane) in dy.axis_iter(Axis(1)).enumerate() {
        db[[0, c, 0, 0]] = plane.sum();
    }
    db
}

/// 2-D cross-correlation. `weight` is (out, in, kh, kw); `bias` is (1, out, 1, 1).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let (n, ci, h, w) = x.dim();
    let (co, wci, kh, kw) = weight.dim();
    if ci != wci {
        return Err(Error::shape(format!(
            "conv2d: input has {ci} channels, kernel expects {wci}"
        )));
    }
    let (oh, ow) = match (geom.out_len(h, kh), geom.out_len(w, kw)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: {h}x{w} input too small for {kh}x{kw} kernel"
            )))
        }
    };
    let xs = contiguous(x);
    let wmat = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("kernel reshape");
    let mut y = Tensor::zeros((n, co, oh, ow));
    for b in 0..n {
        let img = &xs[b * ci * h * w..(b + 1) * ci * h * w];
        let cols = im2col(img, ci, h, w, kh, kw, geom, oh, ow);
        let out = wmat.dot(&cols);
        y.slice_mut(s![b, .., .., ..])
            .assign(&out.into_shape_with_order((co, oh, ow)).expect("output reshape"));
    }
    add_bias(&mut y, bias);
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let (n, ci, h, w) = x.dim();
    let (co, _, kh, kw) = weight.dim();
    let (_, _, oh, ow) = dy.dim();
    let xs = contiguous(x);
    let dys = contiguous(dy);
    let wmat = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("kernel reshape");
    let mut dx = Tensor::zeros((n, ci, h, w));
    let mut dw = Array2::<f64>::zeros((co, ci * kh * kw));
    {
        let dxs = dx.as_slice_mut().expect("fresh array is contiguous");
        for b in 0..n {
            let img = &xs[b * ci * h * w..(b + 1) * ci * h * w];
            let cols = im2col(img, ci, h, w, kh, kw, geom, oh, ow);
            let g = ArrayView2::from_shape((co, oh * ow), &dys[b * co * oh * ow..(b + 1) * co * oh * ow])
                .expect("grad view");
            dw += &g.dot(&cols.t());
            let dcols = wmat.t().dot(&g);
            col2im(
                dcols.view(),
                ci,
                h,
                w,
                kh,
                kw,
                geom,
                oh,
                ow,
                &mut dxs[b * ci * h * w..(b + 1) * ci * h * w],
            );
        }
    }
    let dw = dw.into_shape_with_order((co, ci, kh, kw)).expect("kernel reshape");
    (dx, dw, bias_grad(dy))
}

/// Transposed convolution (no padding, no dilation). `weight` is (in, out, k, k).
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (n, ci, h, w) = x.dim();
    let (wci, co, kh, kw) = weight.dim();
    if ci != wci {
        return Err(Error::shape(format!(
            "conv_transpose2d: input has {ci} channels, kernel expects {wci}"
        )));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let geom = ConvGeom {
        stride,
        dilation: 1,
        padding: 0,
    };
    let xs = contiguous(x);
    let wmat = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((ci, co * kh * kw))
        .expect("kernel reshape");
    let mut y = Tensor::zeros((n, co, oh, ow));
    {
        let ys = y.as_slice_mut().expect("fresh array is contiguous");
        for b in 0..n {
            let xin = ArrayView2::from_shape((ci, h * w), &xs[b * ci * h * w..(b + 1) * ci * h * w])
                .expect("input view");
            let cols = wmat.t().dot(&xin);
            col2im(
                cols.view(),
                co,
                oh,
                ow,
                kh,
                kw,
                geom,
                h,
                w,
                &mut ys[b * co * oh * ow..(b + 1) * co * oh * ow],
            );
        }
    }
    add_bias(&mut y, bias);
    Ok(y)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, ci, h, w) = x.dim();
    let (_, co, kh, kw) = weight.dim();
    let (_, _, oh, ow) = dy.dim();
    let geom = ConvGeom {
        stride,
        dilation: 1,
        padding: 0,
    };
    let xs = contiguous(x);
    let dys = contiguous(dy);
    let wmat = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((ci, co * kh * kw))
        .expect("kernel reshape");
    let mut dx = Tensor::zeros((n, ci, h, w));
    let mut dw = Array2::<f64>::zeros((ci, co * kh * kw));
    for b in 0..n {
        let cols = im2col(
            &dys[b * co * oh * ow..(b + 1) * co * oh * ow],
            co,
            oh,
            ow,
            kh,
            kw,
            geom,
            h,
            w,
        );
        let xin = ArrayView2::from_shape((ci, h * w), &xs[b * ci * h * w..(b + 1) * ci * h * w])
            .expect("input view");
        dw += &xin.dot(&cols.t());
        let dxb = wmat.dot(&cols);
        dx.slice_mut(s![b, .., .., ..])
            .assign(&dxb.into_shape_with_order((ci, h, w)).expect("reshape"));
    }
    let dw = dw.into_shape_with_order((ci, co, kh, kw)).expect("kernel reshape");
    (dx, dw, bias_grad(dy))
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn group_stats(x: &Tensor, groups: usize) -> Vec<(f64, f64)> {
    let (n, c, h, w) = x.dim();
    let per = c / groups;
    let m = (per * h * w) as f64;
    let xs = contiguous(x);
    let mut stats = Vec::with_capacity(n * groups);
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * per) * h * w;
            let chunk = &xs[start..start + per * h * w];
            let mean = chunk.iter().sum::<f64>() / m;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            stats.push((mean, 1.0 / (var + GROUP_NORM_EPS).sqrt()));
        }
    }
    stats
}

/// Group normalization with per-channel affine `gamma`/`beta` of shape (1, C, 1, 1).
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
    let (n, c, _, _) = x.dim();
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("group_norm: {c} channels not divisible into {groups} groups")));
    }
    let per = c / groups;
    let stats = group_stats(x, groups);
    let mut y = x.to_owned();
    for b in 0..n {
        for ch in 0..c {
            let (mean, inv) = stats[b * groups + ch / per];
            let (ga, be) = (gamma[[0, ch, 0, 0]], beta[[0, ch, 0, 0]]);
            y.slice_mut(s![b, ch, .., ..])
                .mapv_inplace(|v| (v - mean) * inv * ga + be);
        }
    }
    Ok(y)
}

pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dim();
    let per = c / groups;
    let m = (per * h * w) as f64;
    let stats = group_stats(x, groups);
    let mut dx = Tensor::zeros(x.raw_dim());
    let mut dgamma = Tensor::zeros((1, c, 1, 1));
    let mut dbeta = Tensor::zeros((1, c, 1, 1));
    for b in 0..n {
        for g in 0..groups {
            let (mean, inv) = stats[b * groups + g];
            let chans = g * per..(g + 1) * per;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ch in chans.clone() {
                let ga = gamma[[0, ch, 0, 0]];
                for (xv, dv) in x
                    .slice(s![b, ch, .., ..])
                    .iter()
                    .zip(dy.slice(s![b, ch, .., ..]).iter())
                {
                    let xhat = (xv - mean) * inv;
                    dgamma[[0, ch, 0, 0]] += dv * xhat;
                    dbeta[[0, ch, 0, 0]] += dv;
                    sum_dxhat += dv * ga;
                    sum_dxhat_xhat += dv * ga * xhat;
                }
            }
            for ch in chans {
                let ga = gamma[[0, ch, 0, 0]];
                let xin = x.slice(s![b, ch, .., ..]);
                let dyin = dy.slice(s![b, ch, .., ..]);
                let mut dst = dx.slice_mut(s![b, ch, .., ..]);
                for ((d, xv), dv) in dst.iter_mut().zip(xin.iter()).zip(dyin.iter()) {
                    let xhat = (xv - mean) * inv;
                    *d = inv / m * (m * dv * ga - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-axis interpolation taps for half-pixel-centred bilinear resampling.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of the two trailing axes (half-pixel centres, edge clamp).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.to_owned();
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut y = Tensor::zeros((n, c, out_h, out_w));
    for b in 0..n {
        for ch in 0..c {
            let src = x.slice(s![b, ch, .., ..]);
            let mut dst = y.slice_mut(s![b, ch, .., ..]);
            for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                    let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                    dst[[oi, oj]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    y
}

pub fn resize_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, out_h, out_w) = dy.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.to_owned();
    }
    let ty = linear_taps(in_h, out_h);
    let tx = linear_taps(in_w, out_w);
    let mut dx = Tensor::zeros((n, c, in_h, in_w));
    for b in 0..n {
        for ch in 0..c {
            let g = dy.slice(s![b, ch, .., ..]);
            let mut dst = dx.slice_mut(s![b, ch, .., ..]);
            for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = g[[oi, oj]];
                    dst[[y0, x0]] += v * (1.0 - fy) * (1.0 - fx);
                    dst[[y0, x1]] += v * (1.0 - fy) * fx;
                    dst[[y1, x0]] += v * fy * (1.0 - fx);
                    dst[[y1, x1]] += v * fy * fx;
                }
            }
        }
    }
    dx
}

/// Softmax over the spatial positions of every (sample, channel) plane.
pub fn spatial_softmax(x: &Tensor) -> Tensor {
    let mut y = x.as_standard_layout().into_owned();
    let (n, c, _, _) = x.dim();
    for b in 0..n {
        for ch in 0..c {
            let mut plane = y.slice_mut(s![b, ch, .., ..]);
            let max = plane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            plane.mapv_inplace(|v| (v - max).exp());
            let total = plane.sum();
            plane.mapv_inplace(|v| v / total);
        }
    }
    y
}

pub fn spatial_softmax_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let (n, c, _, _) = out.dim();
    let mut dx = Tensor::zeros(out.raw_dim());
    for b in 0..n {
        for ch in 0..c {
            let sm = out.slice(s![b, ch, .., ..]);
            let g = dy.slice(s![b, ch, .., ..]);
            let dot: f64 = sm.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let mut dst = dx.slice_mut(s![b, ch, .., ..]);
            for ((d, sv), gv) in dst.iter_mut().zip(sm.iter()).zip(g.iter()) {
                *d = sv * (gv - dot);
            }
        }
    }
    dx
}

/// Channel softmax of the spatial means: (N, C, H, W) -> (N, C, 1, 1).
pub fn channel_softmax_gap(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    let mut y = Tensor::zeros((n, c, 1, 1));
    for b in 0..n {
        let means: Vec<f64> = (0..c)
            .map(|ch| x.slice(s![b, ch, .., ..]).sum() / area)
            .collect();
        let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = means.iter().map(|m| (m - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (ch, e) in exps.into_iter().enumerate() {
            y[[b, ch, 0, 0]] = e / total;
        }
    }
    y
}

pub fn channel_softmax_gap_backward(out: &Tensor, dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, _, _) = out.dim();
    let area = (h * w) as f64;
    let mut dx = Tensor::zeros((n, c, h, w));
    for b in 0..n {
        let dot: f64 = (0..c).map(|ch| out[[b, ch, 0, 0]] * dy[[b, ch, 0, 0]]).sum();
        for ch in 0..c {
            let dm = out[[b, ch, 0, 0]] * (dy[[b, ch, 0, 0]] - dot);
            dx.slice_mut(s![b, ch, .., ..]).fill(dm / area);
        }
    }
    dx
}

/// Checks that `small` broadcasts onto `big` (each axis equal or 1).
pub fn broadcast_compatible(big: &Tensor, small: &Tensor) -> bool {
    big.shape()
        .iter()
        .zip(small.shape())
        .all(|(a, b)| a == b || *b == 1)
}

/// Sums `grad` down to `shape`, reversing a broadcast.
pub fn reduce_to(grad: &Tensor, shape: Ix4) -> Tensor {
    let mut g = grad.to_owned();
    let target = [shape[0], shape[1], shape[2], shape[3]];
    for (axis, &len) in target.iter().enumerate() {
        if len == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let views: Vec<_> = parts.iter().map(|t| t.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::shape(format!("concat: {e}")))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub const BCE_EPS: f64 = 1e-7;

/// Pixel-mean binary cross-entropy with predictions clamped to [eps, 1 - eps].
pub fn bce_mean(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> f64 {
    let m = pred.len() as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / m
}
