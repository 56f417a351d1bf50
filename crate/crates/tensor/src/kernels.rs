//! Forward and backward kernels on raw NCHW tensors. The autodiff graph calls
//! into these; they are also usable directly for inference-only code.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer size, in elements.
const COL_BUDGET: usize = 1 << 22;

/// Square convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    /// Stride-1 convolution that keeps the spatial size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.pad;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    wo: usize,
    rows: std::ops::Range<usize>,
    col: &mut [S],
) {
    let k = g.kernel;
    let ncols = rows.len() * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for (rel, oy) in rows.clone().enumerate() {
                    let seg = &mut dst[rel * wo..(rel + 1) * wo];
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        seg.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    wo: usize,
    rows: std::ops::Range<usize>,
    x: &mut [S],
) {
    let k = g.kernel;
    let ncols = rows.len() * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for (rel, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[rel * wo..(rel + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn row_chunk(col_rows: usize, wo: usize, ho: usize) -> usize {
    (COL_BUDGET / (col_rows * wo).max(1)).clamp(1, ho.max(1))
}

fn conv_out_dims(h: usize, w: usize, g: &ConvGeom) -> Result<(usize, usize)> {
    match (g.out_len(h), g.out_len(w)) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((ho, wo)),
        _ => Err(TensorError::Shape(format!(
            "input {h}x{w} too small for kernel {} dilation {} pad {}",
            g.kernel, g.dilation, g.pad
        ))),
    }
}

/// `x: [n, cin, h, w]`, `weight: [cout, cin, k, k]`, `bias: [cout]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    g: &ConvGeom,
) -> Result<Tensor<S>> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin || kh != g.kernel || kw != g.kernel {
        return Err(TensorError::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let (ho, wo) = conv_out_dims(h, w, g)?;
    let ckk = cin * g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let in_plane = cin * h * w;
    let out_plane = cout * ho * wo;
    let chunk = row_chunk(ckk, wo, ho);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); ckk * chunk * wo]
    };
    for b in 0..n {
        let xs = &x.data()[b * in_plane..(b + 1) * in_plane];
        let os = &mut out.data_mut()[b * out_plane..(b + 1) * out_plane];
        if g.is_pointwise() {
            S::gemm(cout, cin, h * w, weight.data(), false, xs, false, os, h * w, false);
        } else {
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + chunk).min(ho);
                let ncols = (r1 - r0) * wo;
                let col = &mut col[..ckk * ncols];
                im2col(xs, cin, h, w, g, wo, r0..r1, col);
                S::gemm(
                    cout,
                    ckk,
                    ncols,
                    weight.data(),
                    false,
                    col,
                    false,
                    &mut os[r0 * wo..],
                    ho * wo,
                    false,
                );
                r0 = r1;
            }
        }
        if let Some(bias) = bias {
            for (co, plane) in os.chunks_mut(ho * wo).enumerate() {
                let bv = bias.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]. Each output is only computed when requested.
pub struct ConvGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> Result<ConvGrads<S>> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, _, _, _) = weight.dims4()?;
    let (_, _, ho, wo) = grad_out.dims4()?;
    let ckk = cin * g.kernel * g.kernel;
    let in_plane = cin * h * w;
    let out_plane = cout * ho * wo;
    let mut gx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut gw = need.1.then(|| Tensor::zeros(weight.shape()));
    let mut gb = need.2.then(|| Tensor::zeros(&[cout]));
    let chunk = row_chunk(ckk, wo, ho);
    let mut col = vec![S::zero(); ckk * chunk * wo];
    let mut gchunk = vec![S::zero(); cout * chunk * wo];
    for b in 0..n {
        let xs = &x.data()[b * in_plane..(b + 1) * in_plane];
        let gos = &grad_out.data()[b * out_plane..(b + 1) * out_plane];
        if let Some(gb) = gb.as_mut() {
            for (co, plane) in gos.chunks(ho * wo).enumerate() {
                gb.data_mut()[co] += plane.iter().copied().sum::<S>();
            }
        }
        if g.is_pointwise() {
            if let Some(gw) = gw.as_mut() {
                S::gemm(cout, h * w, cin, gos, false, xs, true, gw.data_mut(), cin, true);
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx.data_mut()[b * in_plane..(b + 1) * in_plane];
                S::gemm(cin, cout, h * w, weight.data(), true, gos, false, gxs, h * w, false);
            }
            continue;
        }
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + chunk).min(ho);
            let ncols = (r1 - r0) * wo;
            let gc = &mut gchunk[..cout * ncols];
            for co in 0..cout {
                gc[co * ncols..(co + 1) * ncols]
                    .copy_from_slice(&gos[co * ho * wo + r0 * wo..co * ho * wo + r1 * wo]);
            }
            let col = &mut col[..ckk * ncols];
            if let Some(gw) = gw.as_mut() {
                im2col(xs, cin, h, w, g, wo, r0..r1, col);
                S::gemm(cout, ncols, ckk, gc, false, col, true, gw.data_mut(), ckk, true);
            }
            if let Some(gx) = gx.as_mut() {
                S::gemm(ckk, cout, ncols, weight.data(), true, gc, false, col, ncols, false);
                let gxs = &mut gx.data_mut()[b * in_plane..(b + 1) * in_plane];
                col2im(col, cin, h, w, g, wo, r0..r1, gxs);
            }
            r0 = r1;
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Transposed convolution with square kernel and no padding.
/// `x: [n, cin, h, w]`, `weight: [cin, cout, k, k]`; output `(h-1)*stride + k`.
pub fn conv_transpose2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
) -> Result<Tensor<S>> {
    let (n, cin, h, w) = x.dims4()?;
    let (wcin, cout, k, kw) = weight.dims4()?;
    if wcin != cin || k != kw {
        return Err(TensorError::Shape(format!(
            "transposed conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let g = ConvGeom::new(k, stride, 0, 1);
    let (ho, wo) = ((h - 1) * stride + k, (w - 1) * stride + k);
    let ckk = cout * k * k;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let mut col = vec![S::zero(); ckk * h * w];
    for b in 0..n {
        let xs = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
        S::gemm(ckk, cin, h * w, weight.data(), true, xs, false, &mut col, h * w, false);
        let os = &mut out.data_mut()[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        col2im(&col, cout, ho, wo, &g, w, 0..h, os);
        if let Some(bias) = bias {
            for (co, plane) in os.chunks_mut(ho * wo).enumerate() {
                let bv = bias.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads<S>> {
    let (n, cin, h, w) = x.dims4()?;
    let (_, cout, k, _) = weight.dims4()?;
    let (_, _, ho, wo) = grad_out.dims4()?;
    let g = ConvGeom::new(k, stride, 0, 1);
    let ckk = cout * k * k;
    let mut gx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut gw = need.1.then(|| Tensor::zeros(weight.shape()));
    let mut gb = need.2.then(|| Tensor::zeros(&[cout]));
    let mut col = vec![S::zero(); ckk * h * w];
    for b in 0..n {
        let gos = &grad_out.data()[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        if let Some(gb) = gb.as_mut() {
            for (co, plane) in gos.chunks(ho * wo).enumerate() {
                gb.data_mut()[co] += plane.iter().copied().sum::<S>();
            }
        }
        im2col(gos, cout, ho, wo, &g, w, 0..h, &mut col);
        let xs = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
        if let Some(gw) = gw.as_mut() {
            S::gemm(cin, h * w, ckk, xs, false, &col, true, gw.data_mut(), ckk, true);
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx.data_mut()[b * cin * h * w..(b + 1) * cin * h * w];
            S::gemm(cin, ckk, h * w, weight.data(), false, &col, false, gxs, h * w, false);
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn adaptive_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = i * len / out;
            let end = ((i + 1) * len).div_ceil(out);
            (start, end.max(start + 1))
        })
        .collect()
}

/// Adaptive average pooling to `oh x ow`. A 2x2/stride-2 pool is the special
/// case `oh = h / 2` for even `h`.
pub fn adaptive_avg_pool<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(TensorError::Shape(format!(
            "cannot pool {h}x{w} down to {oh}x{ow}"
        )));
    }
    let by = adaptive_bins(h, oh);
    let bx = adaptive_bins(w, ow);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (plane, dst) in x
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(oh * ow))
    {
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let mut acc = S::zero();
                for y in y0..y1 {
                    acc += plane[y * w + x0..y * w + x1].iter().copied().sum::<S>();
                }
                dst[oy * ow + ox] = acc / S::from_usize((y1 - y0) * (x1 - x0)).unwrap();
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward<S: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (_, _, oh, ow) = grad_out.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let by = adaptive_bins(h, oh);
    let bx = adaptive_bins(w, ow);
    let mut gx = Tensor::zeros(input_shape);
    for (dst, go) in gx
        .data_mut()
        .chunks_mut(h * w)
        .zip(grad_out.data().chunks(oh * ow))
    {
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let share = go[oy * ow + ox] / S::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for y in y0..y1 {
                    dst[y * w + x0..y * w + x1]
                        .iter_mut()
                        .for_each(|v| *v += share);
                }
            }
        }
    }
    Ok(gx)
}

/// Interpolation taps `(i0, i1, w0, w1)` for half-pixel-centred bilinear resize.
fn bilinear_taps<S: Scalar>(len: usize, out: usize) -> Vec<(usize, usize, S, S)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l = src - i0 as f64;
            (i0, i1, S::lit(1.0 - l), S::lit(l))
        })
        .collect()
}

/// Bilinear resize (half-pixel centres, edge clamped) to `oh x ow`.
pub fn bilinear_resize<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::Shape("bilinear target size is zero".into()));
    }
    let ty = bilinear_taps::<S>(h, oh);
    let tx = bilinear_taps::<S>(w, ow);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (plane, dst) in x
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(oh * ow))
    {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward<S: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (_, _, oh, ow) = grad_out.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let ty = bilinear_taps::<S>(h, oh);
    let tx = bilinear_taps::<S>(w, ow);
    let mut gx = Tensor::zeros(input_shape);
    for (dst, go) in gx
        .data_mut()
        .chunks_mut(h * w)
        .zip(grad_out.data().chunks(oh * ow))
    {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    Ok(gx)
}

/// Per-channel statistics saved by a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub inv_std: Vec<S>,
    pub xhat: Tensor<S>,
}

/// Batch normalization over (n, h, w) for each channel.
///
/// With `stats = None` the batch statistics are used (training); otherwise
/// the provided `(mean, var)` are used (evaluation).
pub fn batch_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    stats: Option<(&[S], &[S])>,
    eps: S,
) -> Result<(Tensor<S>, BnSaved<S>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(TensorError::Shape(format!(
            "batch norm over {c} channels got {} scales",
            gamma.numel()
        )));
    }
    let hw = h * w;
    let count = S::from_usize(n * hw).unwrap();
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let mut acc = S::zero();
                for b in 0..n {
                    let o = (b * c + ch) * hw;
                    acc += x.data()[o..o + hw].iter().copied().sum::<S>();
                }
                let m = acc / count;
                let mut sq = S::zero();
                for b in 0..n {
                    let o = (b * c + ch) * hw;
                    sq += x.data()[o..o + hw]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<S>();
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            let (m, s, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in o..o + hw {
                let xh = (x.data()[i] - m) * s;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = ga * xh + be;
            }
        }
    }
    Ok((
        y,
        BnSaved {
            mean,
            var,
            inv_std,
            xhat,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<S: Scalar>(
    saved: &BnSaved<S>,
    gamma: &Tensor<S>,
    grad_out: &Tensor<S>,
    train: bool,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = S::from_usize(n * hw).unwrap();
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (S::zero(), S::zero());
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                let dy = grad_out.data()[i];
                sum_dy += dy;
                sum_dy_xh += dy * saved.xhat.data()[i];
            }
        }
        gg.data_mut()[ch] = sum_dy_xh;
        gb.data_mut()[ch] = sum_dy;
        let ga = gamma.data()[ch];
        let s = saved.inv_std[ch];
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                let dy = grad_out.data()[i];
                gx.data_mut()[i] = if train {
                    ga * s / m * (m * dy - sum_dy - saved.xhat.data()[i] * sum_dy_xh)
                } else {
                    ga * s * dy
                };
            }
        }
    }
    Ok((gx, gg, gb))
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mx = S::neg_infinity();
            for ch in 0..c {
                mx = mx.max(x.data()[base + ch * hw + p]);
            }
            let mut z = S::zero();
            for ch in 0..c {
                let e = (x.data()[base + ch * hw + p] - mx).exp();
                y.data_mut()[base + ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                y.data_mut()[base + ch * hw + p] /= z;
            }
        }
    }
    Ok(y)
}

pub fn softmax_channels_backward<S: Scalar>(y: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = y.dims4()?;
    let hw = h * w;
    let mut gx = Tensor::zeros(y.shape());
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = S::zero();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dot += y.data()[i] * grad_out.data()[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                gx.data_mut()[i] = y.data()[i] * (grad_out.data()[i] - dot);
            }
        }
    }
    Ok(gx)
}

/// Mean pixel-wise cross entropy of `logits: [n, k, h, w]` against `labels`
/// (`n*h*w` entries). Pixels whose label equals `ignore` are skipped.
/// Returns `(loss, softmax, counted_pixels)`.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
    ignore: Option<usize>,
) -> Result<(S, Tensor<S>, usize)> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(TensorError::Shape(format!(
            "{} labels for a {}x{}x{} batch",
            labels.len(),
            n,
            h,
            w
        )));
    }
    let probs = softmax_channels(logits)?;
    let mut total = S::zero();
    let mut count = 0usize;
    for b in 0..n {
        for p in 0..hw {
            let lab = labels[b * hw + p];
            if Some(lab) == ignore {
                continue;
            }
            if lab >= k {
                return Err(TensorError::Invalid(format!("label {lab} >= {k} classes")));
            }
            let base = b * k * hw + p;
            let mut mx = S::neg_infinity();
            for ch in 0..k {
                mx = mx.max(logits.data()[base + ch * hw]);
            }
            let mut z = S::zero();
            for ch in 0..k {
                z += (logits.data()[base + ch * hw] - mx).exp();
            }
            total += z.ln() + mx - logits.data()[base + lab * hw];
            count += 1;
        }
    }
    let loss = if count == 0 {
        S::nan()
    } else {
        total / S::from_usize(count).unwrap()
    };
    Ok((loss, probs, count))
}

pub fn cross_entropy_backward<S: Scalar>(
    probs: &Tensor<S>,
    labels: &[usize],
    ignore: Option<usize>,
    count: usize,
    grad: S,
) -> Result<Tensor<S>> {
    let (n, k, h, w) = probs.dims4()?;
    let hw = h * w;
    let mut gx = Tensor::zeros(probs.shape());
    if count == 0 {
        return Ok(gx);
    }
    let scale = grad / S::from_usize(count).unwrap();
    for b in 0..n {
        for p in 0..hw {
            let lab = labels[b * hw + p];
            if Some(lab) == ignore {
                continue;
            }
            let base = b * k * hw + p;
            for ch in 0..k {
                let mut v = probs.data()[base + ch * hw];
                if ch == lab {
                    v -= S::one();
                }
                gx.data_mut()[base + ch * hw] = v * scale;
            }
        }
    }
    Ok(gx)
}

/// Mean negative log of clamped probabilities `probs[b, targets[b], y, x]`
/// over all batch items and pixels.
pub fn prob_nll<S: Scalar>(probs: &Tensor<S>, targets: &[usize], eps: S) -> Result<S> {
    let (n, c, h, w) = probs.dims4()?;
    check_targets(n, c, targets)?;
    let hw = h * w;
    let lo = eps;
    let hi = S::one() - eps;
    let mut total = S::zero();
    for (b, &t) in targets.iter().enumerate() {
        let o = (b * c + t) * hw;
        for &p in &probs.data()[o..o + hw] {
            total -= p.max(lo).min(hi).ln();
        }
    }
    Ok(total / S::from_usize(n * hw).unwrap())
}

pub fn prob_nll_backward<S: Scalar>(
    probs: &Tensor<S>,
    targets: &[usize],
    eps: S,
    grad: S,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let m = S::from_usize(n * hw).unwrap();
    let lo = eps;
    let hi = S::one() - eps;
    let mut gx = Tensor::zeros(probs.shape());
    for (b, &t) in targets.iter().enumerate() {
        let o = (b * c + t) * hw;
        for i in o..o + hw {
            let p = probs.data()[i];
            if p > lo && p < hi {
                gx.data_mut()[i] = -grad / (p * m);
            }
        }
    }
    Ok(gx)
}

fn check_targets(n: usize, c: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != n {
        return Err(TensorError::Shape(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(TensorError::Invalid(format!("target {t} >= {c} channels")));
    }
    Ok(())
}

/// Concatenate along the channel axis.
pub fn concat_channels<S: Scalar>(xs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let (n, _, h, w) = xs
        .first()
        .ok_or_else(|| TensorError::Shape("concat of nothing".into()))?
        .dims4()?;
    let mut total_c = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(TensorError::Shape(format!(
                "cannot concat {:?} with {:?}",
                x.shape(),
                xs[0].shape()
            )));
        }
        total_c += xc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for x in xs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::from_vec(&[n, total_c, h, w], data)
}

/// Channels `start..start+len`.
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if start + len > c || len == 0 {
        return Err(TensorError::Shape(format!(
            "channel slice {start}..{} out of {c}",
            start + len
        )));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        let o = (b * c + start) * hw;
        data.extend_from_slice(&x.data()[o..o + len * hw]);
    }
    Tensor::from_vec(&[n, len, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape, f)
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Tensor<f64>, wt: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, k, _) = wt.dims4().unwrap();
        let ho = g.out_len(h).unwrap();
        let wo = g.out_len(w).unwrap();
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki * g.dilation) as isize
                                        - g.pad as isize;
                                    let ix = (ox * g.stride + kj * g.dilation) as isize
                                        - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_several_geometries() {
        let x = t(&[2, 3, 7, 6], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        for g in [
            ConvGeom::same(3, 1),
            ConvGeom::same(3, 2),
            ConvGeom::same(1, 1),
            ConvGeom::new(3, 2, 1, 1),
            ConvGeom::same(7, 1),
        ] {
            let wt = t(&[4, 3, g.kernel, g.kernel], |i| ((i * 31) % 17) as f64 / 8.0 - 1.0);
            let got = conv2d(&x, &wt, None, &g).unwrap();
            let want = conv_naive(&x, &wt, &g);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn transposed_conv_doubles_size() {
        let x = t(&[1, 2, 3, 3], |i| i as f64);
        let wt = t(&[2, 5, 2, 2], |i| (i % 3) as f64);
        let y = conv_transpose2d(&x, &wt, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 5, 6, 6]);
        // Output (co, 2i+a, 2j+b) = sum_ci x[ci,i,j] * w[ci,co,a,b].
        let v = y.data()[(6 + 3) * 6 + 4];
        let (i, j, a, b, co) = (1, 2, 1, 0, 1);
        let want: f64 = (0..2)
            .map(|ci| x.data()[(ci * 3 + i) * 3 + j] * wt.data()[((ci * 5 + co) * 2 + a) * 2 + b])
            .sum();
        assert_eq!(v, want);
    }

    #[test]
    fn pooling_by_half_is_two_by_two_mean() {
        let x = t(&[1, 1, 4, 4], |i| i as f64);
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn bilinear_half_scale_averages_pairs() {
        let x = t(&[1, 1, 2, 4], |i| i as f64);
        let y = bilinear_resize(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[(0.0 + 1.0 + 4.0 + 5.0) / 4.0, (2.0 + 3.0 + 6.0 + 7.0) / 4.0]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 5], 0.7);
        let y = bilinear_resize(&x, 12, 20).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3, 2, 2], |i| (i as f64 * 1.3).sin() * 5.0);
        let y = softmax_channels(&x).unwrap();
        for b in 0..2 {
            for p in 0..4 {
                let s: f64 = (0..3).map(|c| y.data()[b * 12 + c * 4 + p]).sum();
                assert!((s - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln_k() {
        let logits = Tensor::<f64>::zeros(&[1, 5, 2, 2]);
        let (loss, _, n) = cross_entropy(&logits, &[1, 2, 3, 4], None).unwrap();
        assert_eq!(n, 4);
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let a = t(&[2, 2, 2, 2], |i| i as f64);
        let b = t(&[2, 3, 2, 2], |i| 100.0 + i as f64);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(slice_channels(&c, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&c, 2, 3).unwrap(), b);
    }
}
