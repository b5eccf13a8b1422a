use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn bicubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Per-output-sample taps `(clamped source index, weight)` along one axis.
///
/// Sample centers are aligned (`src = (dst + 0.5) / scale - 0.5`). When
/// shrinking, the kernel is stretched by `1/scale` to act as an antialiasing
/// filter. Weights are normalized to sum to one.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let kscale = scale.min(1.0);
    let support = 2.0 / kscale;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            let mut total = 0.0;
            for j in lo..=hi {
                let w = bicubic_kernel((center - j as f64) * kscale);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                taps.push((idx, w));
                total += w;
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Resize every plane to `out_h × out_w` with edge-clamped bicubic sampling.
pub fn bicubic_resize_to<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(format!(
            "bicubic resize {s:?} -> {out_h}x{out_w}"
        )));
    }
    let tx = axis_taps(s.w, out_w);
    let ty = axis_taps(s.h, out_h);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let mut tmp = vec![0.0f64; s.h * out_w];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for y in 0..s.h {
                let row = &src[y * s.w..(y + 1) * s.w];
                for (x, taps) in tx.iter().enumerate() {
                    tmp[y * out_w + x] = taps.iter().map(|&(j, w)| w * row[j].as_f64()).sum();
                }
            }
            let dst = out.plane_mut(n, c);
            for (y, taps) in ty.iter().enumerate() {
                for x in 0..out_w {
                    let v: f64 = taps.iter().map(|&(j, w)| w * tmp[j * out_w + x]).sum();
                    dst[y * out_w + x] = T::from_f64_lossy(v);
                }
            }
        }
    }
    Ok(out)
}

/// Resize by the rational factor `num / den`; both extents must scale to
/// whole numbers of pixels.
pub fn bicubic_resize<T: Scalar>(input: &Tensor<T>, num: usize, den: usize) -> Result<Tensor<T>> {
    if num == 0 || den == 0 {
        return Err(Error::invalid(format!(
            "resize scale {num}/{den} must be positive"
        )));
    }
    let s = input.shape();
    if !(s.h * num).is_multiple_of(den) || !(s.w * num).is_multiple_of(den) {
        return Err(Error::invalid(format!(
            "resize {}x{} by {num}/{den} gives a fractional size",
            s.h, s.w
        )));
    }
    bicubic_resize_to(input, s.h * num / den, s.w * num / den)
}
