//! Forward and backward kernels.
//!
//! Every kernel partitions its output into disjoint planes and walks each
//! plane with a fixed loop nest, so results are bit-identical regardless of
//! how many worker threads rayon uses.

use rayon::prelude::*;

use super::{Parameter, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided, zero-padded correlation along one axis.
pub fn conv_output_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "non-integral output extent: ({size} + 2*{padding} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` whose tap `k` lands inside `[0, size)`.
#[inline]
fn valid_range(k: usize, padding: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if size - 1 + padding >= k {
        ((size - 1 + padding - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct ConvDims {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

fn conv_dims<T: Scalar>(
    input: Shape,
    weight: &Parameter<T>,
    bias: &Parameter<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let ws = weight.value.shape();
    if ws.c != input.c {
        return Err(Error::invalid(format!(
            "conv2d {}: weight {:?} expects {} input channels, got {:?}",
            weight.name, ws, ws.c, input
        )));
    }
    if bias.value.len() != ws.n {
        return Err(Error::invalid(format!(
            "conv2d {}: bias has {} entries for {} output channels",
            bias.name,
            bias.value.len(),
            ws.n
        )));
    }
    let ho = conv_output_extent(input.h, ws.h, stride, padding)?;
    let wo = conv_output_extent(input.w, ws.w, stride, padding)?;
    Ok(ConvDims {
        n: input.n,
        cin: input.c,
        cout: ws.n,
        h: input.h,
        w: input.w,
        kh: ws.h,
        kw: ws.w,
        ho,
        wo,
        stride,
        padding,
    })
}

/// 2-D cross-correlation with zero padding. `weight` is `(C_out, C_in, kH, kW)`,
/// `bias` holds `C_out` values.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Parameter<T>,
    bias: &Parameter<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), weight, bias, stride, padding)?;
    let mut out = Tensor::zeros(Shape::new(d.n, d.cout, d.ho, d.wo));
    let wdata = weight.value.data();
    let bdata = bias.value.data();
    let plane_out = d.ho * d.wo;
    if plane_out == 0 {
        return Ok(out);
    }

    out.data_mut()
        .par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, oplane)| {
            let (n, o) = (idx / d.cout, idx % d.cout);
            oplane.fill(bdata[o]);
            for ci in 0..d.cin {
                let iplane = input.plane(n, ci);
                for ky in 0..d.kh {
                    let (y_lo, y_hi) = valid_range(ky, d.padding, d.stride, d.h, d.ho);
                    for kx in 0..d.kw {
                        let wv = wdata[((o * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        let (x_lo, x_hi) = valid_range(kx, d.padding, d.stride, d.w, d.wo);
                        let len = x_hi - x_lo;
                        if len == 0 {
                            continue;
                        }
                        let ix0 = x_lo * d.stride + kx - d.padding;
                        for oy in y_lo..y_hi {
                            let iy = oy * d.stride + ky - d.padding;
                            let irow = &iplane[iy * d.w..(iy + 1) * d.w];
                            let orow = &mut oplane[oy * d.wo + x_lo..oy * d.wo + x_hi];
                            if d.stride == 1 {
                                for (o, &i) in orow.iter_mut().zip(&irow[ix0..ix0 + len]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * irow[ix0 + j * d.stride];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Backward pass of [`conv2d`]. Parameter gradients are accumulated (`+=`);
/// the gradient with respect to the input is returned.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    weight: &mut Parameter<T>,
    bias: &mut Parameter<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(saved_input.shape(), weight, bias, stride, padding)?;
    let expected = Shape::new(d.n, d.cout, d.ho, d.wo);
    if grad_out.shape() != expected {
        return Err(Error::invalid(format!(
            "conv2d_backward {}: grad_out {:?}, expected {:?}",
            weight.name,
            grad_out.shape(),
            expected
        )));
    }

    let mut grad_in = Tensor::zeros(saved_input.shape());
    let plane_in = d.h * d.w;
    if plane_in > 0 && d.ho * d.wo > 0 {
        let wdata = weight.value.data();
        grad_in
            .data_mut()
            .par_chunks_mut(plane_in)
            .enumerate()
            .for_each(|(idx, gplane)| {
                let (n, ci) = (idx / d.cin, idx % d.cin);
                for o in 0..d.cout {
                    let gout = grad_out.plane(n, o);
                    for ky in 0..d.kh {
                        let (y_lo, y_hi) = valid_range(ky, d.padding, d.stride, d.h, d.ho);
                        for kx in 0..d.kw {
                            let wv = wdata[((o * d.cin + ci) * d.kh + ky) * d.kw + kx];
                            let (x_lo, x_hi) = valid_range(kx, d.padding, d.stride, d.w, d.wo);
                            let len = x_hi - x_lo;
                            if len == 0 {
                                continue;
                            }
                            let ix0 = x_lo * d.stride + kx - d.padding;
                            for oy in y_lo..y_hi {
                                let iy = oy * d.stride + ky - d.padding;
                                let grow = &gout[oy * d.wo + x_lo..oy * d.wo + x_hi];
                                let irow = &mut gplane[iy * d.w..(iy + 1) * d.w];
                                if d.stride == 1 {
                                    for (i, &g) in irow[ix0..ix0 + len].iter_mut().zip(grow) {
                                        *i += wv * g;
                                    }
                                } else {
                                    for (j, &g) in grow.iter().enumerate() {
                                        irow[ix0 + j * d.stride] += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }

    let per_out = d.cin * d.kh * d.kw;
    if per_out > 0 {
        weight
            .grad
            .data_mut()
            .par_chunks_mut(per_out)
            .zip(bias.grad.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(o, (gw, gb))| {
                for n in 0..d.n {
                    let gout = grad_out.plane(n, o);
                    let mut bsum = T::zero();
                    for &g in gout {
                        bsum += g;
                    }
                    *gb += bsum;
                    for ci in 0..d.cin {
                        let iplane = saved_input.plane(n, ci);
                        for ky in 0..d.kh {
                            let (y_lo, y_hi) = valid_range(ky, d.padding, d.stride, d.h, d.ho);
                            for kx in 0..d.kw {
                                let (x_lo, x_hi) = valid_range(kx, d.padding, d.stride, d.w, d.wo);
                                let len = x_hi - x_lo;
                                if len == 0 {
                                    continue;
                                }
                                let ix0 = x_lo * d.stride + kx - d.padding;
                                let mut acc = T::zero();
                                for oy in y_lo..y_hi {
                                    let iy = oy * d.stride + ky - d.padding;
                                    let grow = &gout[oy * d.wo + x_lo..oy * d.wo + x_hi];
                                    let irow = &iplane[iy * d.w..(iy + 1) * d.w];
                                    if d.stride == 1 {
                                        for (&g, &i) in grow.iter().zip(&irow[ix0..ix0 + len]) {
                                            acc += g * i;
                                        }
                                    } else {
                                        for (j, &g) in grow.iter().enumerate() {
                                            acc += g * irow[ix0 + j * d.stride];
                                        }
                                    }
                                }
                                gw[(ci * d.kh + ky) * d.kw + kx] += acc;
                            }
                        }
                    }
                }
            });
    }
    Ok(grad_in)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks `grad_out` by `input > 0`. The relu output works as the mask too.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(input, |g, x| if x > T::zero() { g } else { T::zero() })
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Backward of [`sigmoid`] given its saved output `s`.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(output, |g, s| g * s * (T::one() - s))
}

/// Mean over the spatial extent, producing `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::invalid(format!(
            "global_avg_pool of empty spatial extent {s:?}"
        )));
    }
    let denom = T::from_usize(s.plane()).unwrap();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = T::zero();
            for &v in input.plane(n, c) {
                acc += v;
            }
            out.set(n, c, 0, 0, acc / denom);
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    if grad_out.shape() != Shape::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(Error::invalid(format!(
            "global_avg_pool_backward: grad {:?} for input {:?}",
            grad_out.shape(),
            input_shape
        )));
    }
    let denom = T::from_usize(input_shape.plane()).unwrap();
    let mut out = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = grad_out.at(n, c, 0, 0) / denom;
            out.plane_mut(n, c).fill(g);
        }
    }
    Ok(out)
}

/// Concatenate along the channel axis, preserving order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let s0 = first.shape();
    let mut c_total = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::invalid(format!("concat_channels: {s:?} vs {s0:?}")));
        }
        c_total += s.c;
    }
    let plane = s0.plane();
    let mut data = Vec::with_capacity(s0.n * c_total * plane);
    for n in 0..s0.n {
        for t in inputs {
            let per = t.shape().c * plane;
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(Shape::new(s0.n, c_total, s0.h, s0.w), data)
}

/// Inverse of [`concat_channels`]: split `grad` into consecutive channel ranges.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = grad.shape();
    if channels.iter().sum::<usize>() != s.c {
        return Err(Error::invalid(format!(
            "split_channels: {channels:?} does not sum to {}",
            s.c
        )));
    }
    let plane = s.plane();
    let mut outs: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(s.n * c * plane))
        .collect();
    for n in 0..s.n {
        let mut offset = (n * s.c) * plane;
        for (out, &c) in outs.iter_mut().zip(channels) {
            out.extend_from_slice(&grad.data()[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), d))
        .collect()
}

/// Sub-pixel rearrangement:
/// `out(n, c, h*s + dy, w*s + dx) = in(n, c*s*s + dy*s + dx, h, w)`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if scale == 0 || !s.c.is_multiple_of(scale * scale) {
        return Err(Error::invalid(format!(
            "pixel_shuffle: {} channels not divisible by {scale}^2",
            s.c
        )));
    }
    let co = s.c / (scale * scale);
    let (ho, wo) = (s.h * scale, s.w * scale);
    let mut out = Tensor::zeros(Shape::new(s.n, co, ho, wo));
    for n in 0..s.n {
        for c in 0..co {
            let dst = out.plane_mut(n, c);
            for dy in 0..scale {
                for dx in 0..scale {
                    let src = input.plane(n, c * scale * scale + dy * scale + dx);
                    for y in 0..s.h {
                        let row = (y * scale + dy) * wo;
                        for x in 0..s.w {
                            dst[row + x * scale + dx] = src[y * s.w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if scale == 0 || !s.h.is_multiple_of(scale) || !s.w.is_multiple_of(scale) {
        return Err(Error::invalid(format!(
            "pixel_unshuffle: {}x{} not divisible by {scale}",
            s.h, s.w
        )));
    }
    let (hi, wi) = (s.h / scale, s.w / scale);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c * scale * scale, hi, wi));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for dy in 0..scale {
                for dx in 0..scale {
                    let dst = out.plane_mut(n, c * scale * scale + dy * scale + dx);
                    for y in 0..hi {
                        let row = (y * scale + dy) * s.w;
                        for x in 0..wi {
                            dst[y * wi + x] = src[row + x * scale + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Multiply every plane `(n, c)` of `input` by `gate(n, c, 0, 0)`.
pub fn scale_channels<T: Scalar>(input: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if gate.shape() != Shape::new(s.n, s.c, 1, 1) {
        return Err(Error::invalid(format!(
            "scale_channels: gate {:?} for {s:?}",
            gate.shape()
        )));
    }
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = gate.at(n, c, 0, 0);
            out.plane_mut(n, c).iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gate)`.
pub fn scale_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gate: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    grad_out.expect_same_shape(input, "scale_channels_backward")?;
    let grad_in = scale_channels(grad_out, gate)?;
    let s = input.shape();
    let mut grad_gate = Tensor::zeros(gate.shape());
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = T::zero();
            for (&g, &x) in grad_out.plane(n, c).iter().zip(input.plane(n, c)) {
                acc += g * x;
            }
            grad_gate.set(n, c, 0, 0, acc);
        }
    }
    Ok((grad_in, grad_gate))
}
