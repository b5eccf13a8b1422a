//! Training losses and image quality metrics on `[0, 1]`-normalized images.
//!
//! All arithmetic is carried out in `f64` regardless of the tensor precision.
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`,
//! dynamic range 1 and valid-region filtering; values are computed per
//! channel and averaged.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{bicubic_resize_to, Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Per-scale exponents for five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const DEFAULT_ALPHA: f64 = 0.84;

/// Lower bound applied to each MS-SSIM factor before the fractional power.
const MS_SSIM_FLOOR: f64 = 1e-8;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    a.expect_same_shape(b, what)
}

/// Mean absolute error and its gradient `sign(pred - target) / count`.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    same_shape(pred, target, "l1_loss")?;
    let count = pred.len().max(1) as f64;
    let mut total = 0.0;
    let inv = T::from_f64_lossy(1.0 / count);
    let grad = pred.zip_map(target, |p, t| {
        let d = p - t;
        if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        }
    })?;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        total += (p.as_f64() - t.as_f64()).abs();
    }
    Ok((total / count, grad))
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// PSNR in dB for peak 1 given a mean squared error; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Zero-mean normalized cross-correlation over all pixels and channels.
///
/// If the spatial sizes differ, `a` is bicubically resized to `b`'s size.
pub fn ncc<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.c) != (sb.n, sb.c) {
        return Err(Error::invalid(format!("ncc: {sa:?} vs {sb:?}")));
    }
    let resized;
    let a = if (sa.h, sa.w) != (sb.h, sb.w) {
        resized = bicubic_resize_to(a, sb.h, sb.w)?;
        &resized
    } else {
        a
    };
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x.as_f64() - ma, y.as_f64() - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("ncc of a zero-variance image".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn zeros(h: usize, w: usize) -> Self {
        Plane {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize, c: usize) -> Self {
        let s = t.shape();
        Plane {
            h: s.h,
            w: s.w,
            data: t.plane(n, c).iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn mul(&self, other: &Plane) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// Separable Gaussian filtering, valid region only.
    fn filter_valid(&self, g: &[f64; SSIM_WINDOW]) -> Plane {
        let k = SSIM_WINDOW;
        let (ho, wo) = (self.h + 1 - k, self.w + 1 - k);
        let mut tmp = vec![0.0; self.h * wo];
        for y in 0..self.h {
            let row = &self.data[y * self.w..(y + 1) * self.w];
            for x in 0..wo {
                let mut acc = 0.0;
                for (i, gi) in g.iter().enumerate() {
                    acc += gi * row[x + i];
                }
                tmp[y * wo + x] = acc;
            }
        }
        let mut out = Plane::zeros(ho, wo);
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for (i, gi) in g.iter().enumerate() {
                    acc += gi * tmp[(y + i) * wo + x];
                }
                out.data[y * wo + x] = acc;
            }
        }
        out
    }

    /// Adjoint of [`Plane::filter_valid`].
    fn filter_valid_adjoint(&self, g: &[f64; SSIM_WINDOW]) -> Plane {
        let k = SSIM_WINDOW;
        let (h, w) = (self.h + k - 1, self.w + k - 1);
        let mut tmp = vec![0.0; h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let v = self.data[y * self.w + x];
                for (i, gi) in g.iter().enumerate() {
                    tmp[(y + i) * self.w + x] += gi * v;
                }
            }
        }
        let mut out = Plane::zeros(h, w);
        for y in 0..h {
            for x in 0..self.w {
                let v = tmp[y * self.w + x];
                for (i, gi) in g.iter().enumerate() {
                    out.data[y * w + x + i] += gi * v;
                }
            }
        }
        out
    }

    fn avg_pool2(&self) -> Plane {
        let (ho, wo) = (self.h / 2, self.w / 2);
        let mut out = Plane::zeros(ho, wo);
        for y in 0..ho {
            for x in 0..wo {
                let i = 2 * y * self.w + 2 * x;
                out.data[y * wo + x] = 0.25
                    * (self.data[i]
                        + self.data[i + 1]
                        + self.data[i + self.w]
                        + self.data[i + self.w + 1]);
            }
        }
        out
    }

    fn avg_pool2_adjoint(&self, h: usize, w: usize) -> Plane {
        let mut out = Plane::zeros(h, w);
        for y in 0..self.h {
            for x in 0..self.w {
                let v = 0.25 * self.data[y * self.w + x];
                let i = 2 * y * w + 2 * x;
                out.data[i] += v;
                out.data[i + 1] += v;
                out.data[i + w] += v;
                out.data[i + w + 1] += v;
            }
        }
        out
    }
}

/// Local statistics of one plane pair at one scale.
struct SsimStats {
    mu_x: Plane,
    mu_y: Plane,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

fn ssim_stats(x: &Plane, y: &Plane, g: &[f64; SSIM_WINDOW]) -> SsimStats {
    let mu_x = x.filter_valid(g);
    let mu_y = y.filter_valid(g);
    let sxx = x.mul(x).filter_valid(g);
    let syy = y.mul(y).filter_valid(g);
    let sxy = x.mul(y).filter_valid(g);
    let n = mu_x.data.len();
    let mut var_x = Vec::with_capacity(n);
    let mut var_y = Vec::with_capacity(n);
    let mut cov = Vec::with_capacity(n);
    for i in 0..n {
        let (mx, my) = (mu_x.data[i], mu_y.data[i]);
        var_x.push(sxx.data[i] - mx * mx);
        var_y.push(syy.data[i] - my * my);
        cov.push(sxy.data[i] - mx * my);
    }
    SsimStats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    }
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_plane(x: &Plane, y: &Plane, g: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let st = ssim_stats(x, y, g);
    let n = st.cov.len() as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..st.cov.len() {
        let (mx, my) = (st.mu_x.data[i], st.mu_y.data[i]);
        let cs = (2.0 * st.cov[i] + C2) / (st.var_x[i] + st.var_y[i] + C2);
        let l = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

/// Gradient with respect to `x` of `mean(cs map)` (`full == false`) or
/// `mean(l * cs map)` (`full == true`), scaled by `coef`.
fn ssim_plane_grad(x: &Plane, y: &Plane, g: &[f64; SSIM_WINDOW], full: bool, coef: f64) -> Plane {
    let st = ssim_stats(x, y, g);
    let m = st.cov.len();
    let scale = coef / m as f64;
    let (hm, wm) = (st.mu_x.h, st.mu_x.w);
    let mut d_mu = Plane::zeros(hm, wm);
    let mut d_sxx = Plane::zeros(hm, wm);
    let mut d_sxy = Plane::zeros(hm, wm);
    for i in 0..m {
        let (mx, my) = (st.mu_x.data[i], st.mu_y.data[i]);
        let a = 2.0 * st.cov[i] + C2;
        let b = st.var_x[i] + st.var_y[i] + C2;
        let cs = a / b;
        let dcs_dcov = 2.0 / b;
        let dcs_dvar = -a / (b * b);
        let (f_mu, f_var, f_cov) = if full {
            let p = 2.0 * mx * my + C1;
            let q = mx * mx + my * my + C1;
            let l = p / q;
            let dl_dmu = 2.0 * my / q - p * 2.0 * mx / (q * q);
            (dl_dmu * cs, l * dcs_dvar, l * dcs_dcov)
        } else {
            (0.0, dcs_dvar, dcs_dcov)
        };
        // chain through var = Sxx - mu_x^2 and cov = Sxy - mu_x mu_y
        d_mu.data[i] = scale * (f_mu - 2.0 * mx * f_var - my * f_cov);
        d_sxx.data[i] = scale * f_var;
        d_sxy.data[i] = scale * f_cov;
    }
    let g_mu = d_mu.filter_valid_adjoint(g);
    let g_sxx = d_sxx.filter_valid_adjoint(g);
    let g_sxy = d_sxy.filter_valid_adjoint(g);
    let mut out = Plane::zeros(x.h, x.w);
    for i in 0..out.data.len() {
        out.data[i] = g_mu.data[i] + 2.0 * x.data[i] * g_sxx.data[i] + y.data[i] * g_sxy.data[i];
    }
    out
}

fn check_window<T: Scalar>(a: &Tensor<T>) -> Result<()> {
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Single-scale SSIM averaged over all channels (and batch entries).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    check_window(a)?;
    let g = gaussian_window();
    let s = a.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            total += ssim_plane(
                &Plane::from_tensor(a, n, c),
                &Plane::from_tensor(b, n, c),
                &g,
            )
            .0;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// Number of MS-SSIM scales an `h × w` image supports (at most five).
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut m = 0;
    let (mut h, mut w) = (h, w);
    while m < MS_SSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        m += 1;
        h /= 2;
        w /= 2;
    }
    m
}

fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let used = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = used.iter().sum();
    used.iter().map(|w| w / total).collect()
}

fn ms_ssim_scale_count<T: Scalar>(a: &Tensor<T>) -> Result<usize> {
    let s = a.shape();
    let m = ms_ssim_scales(s.h, s.w);
    if m < 2 {
        return Err(Error::invalid(format!(
            "image {}x{} too small for two MS-SSIM scales (needs {})",
            s.h,
            s.w,
            2 * SSIM_WINDOW
        )));
    }
    Ok(m)
}

fn ms_ssim_planes(
    x: &Plane,
    y: &Plane,
    weights: &[f64],
    g: &[f64; SSIM_WINDOW],
) -> (f64, Vec<f64>, Vec<Plane>, Vec<Plane>) {
    let m = weights.len();
    let mut xs = vec![x.clone()];
    let mut ys = vec![y.clone()];
    for j in 1..m {
        xs.push(xs[j - 1].avg_pool2());
        ys.push(ys[j - 1].avg_pool2());
    }
    let factors: Vec<f64> = (0..m)
        .map(|j| {
            let (ssim, cs) = ssim_plane(&xs[j], &ys[j], g);
            if j + 1 == m {
                ssim
            } else {
                cs
            }
        })
        .collect();
    let value = factors
        .iter()
        .zip(weights)
        .map(|(&v, &w)| v.max(MS_SSIM_FLOOR).powf(w))
        .product();
    (value, factors, xs, ys)
}

/// Multi-scale SSIM with 2x average pooling between scales.
///
/// Uses up to five scales; smaller images use fewer scales with the leading
/// weights renormalized to sum to one.
pub fn ms_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "ms_ssim")?;
    let m = ms_ssim_scale_count(a)?;
    let weights = ms_ssim_weights(m);
    let g = gaussian_window();
    let s = a.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            total += ms_ssim_planes(
                &Plane::from_tensor(a, n, c),
                &Plane::from_tensor(b, n, c),
                &weights,
                &g,
            )
            .0;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// MS-SSIM value and its gradient with respect to `pred`.
pub fn ms_ssim_with_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    same_shape(pred, target, "ms_ssim")?;
    let m = ms_ssim_scale_count(pred)?;
    let weights = ms_ssim_weights(m);
    let g = gaussian_window();
    let s = pred.shape();
    let planes = (s.n * s.c) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let x = Plane::from_tensor(pred, n, c);
            let y = Plane::from_tensor(target, n, c);
            let (value, factors, xs, ys) = ms_ssim_planes(&x, &y, &weights, &g);
            total += value;
            let mut acc: Option<Plane> = None;
            for j in (0..m).rev() {
                let d_factor = if factors[j] > MS_SSIM_FLOOR {
                    value * weights[j] / factors[j]
                } else {
                    0.0
                };
                let local = ssim_plane_grad(&xs[j], &ys[j], &g, j + 1 == m, d_factor / planes);
                acc = Some(match acc {
                    None => local,
                    Some(coarse) => {
                        let mut up = coarse.avg_pool2_adjoint(xs[j].h, xs[j].w);
                        up.data
                            .iter_mut()
                            .zip(&local.data)
                            .for_each(|(u, l)| *u += l);
                        up
                    }
                });
            }
            let acc = acc.expect("at least two scales");
            for (dst, v) in grad.plane_mut(n, c).iter_mut().zip(&acc.data) {
                *dst = T::from_f64_lossy(*v);
            }
        }
    }
    Ok((total / planes, grad))
}

/// Breakdown of a mixed-loss evaluation.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l1: f64,
    pub ms_ssim: f64,
}

/// `alpha * (1 - MS-SSIM) + (1 - alpha) * L1` and its gradient.
///
/// A term whose weight is exactly zero is not evaluated (its part reads 0 for
/// L1 and 1 for MS-SSIM).
pub fn mixed_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    alpha: f64,
) -> Result<(LossParts, Tensor<T>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("loss alpha {alpha} outside [0, 1]")));
    }
    same_shape(pred, target, "mixed_loss")?;
    let (l1, g_l1) = if alpha < 1.0 {
        l1_loss(pred, target)?
    } else {
        (0.0, Tensor::zeros(pred.shape()))
    };
    let (ms, g_ms) = if alpha > 0.0 {
        ms_ssim_with_grad(pred, target)?
    } else {
        (1.0, Tensor::zeros(pred.shape()))
    };
    let total = alpha * (1.0 - ms) + (1.0 - alpha) * l1;
    let (wa, wl) = (T::from_f64_lossy(alpha), T::from_f64_lossy(1.0 - alpha));
    let grad = g_ms.zip_map(&g_l1, |gm, gl| wl * gl - wa * gm)?;
    Ok((
        LossParts {
            total,
            l1,
            ms_ssim: ms,
        },
        grad,
    ))
}

pub(crate) fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("nan")
    }
}

/// Per-image PSNR/SSIM plus aggregate means.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    #[serde(serialize_with = "serialize_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Entries that could not be evaluated, with reasons.
    pub failures: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>, failures: Vec<(String, String)>) -> Self {
        let k = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|m| m.psnr).sum::<f64>() / k;
        let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / k;
        MetricReport {
            images,
            mean_psnr,
            mean_ssim,
            failures,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn l1_basics() {
        let t = noise([1, 3, 4, 4], 1);
        assert_eq!(l1_loss(&t, &t).unwrap().0, 0.0);
        let shifted = t.map(|v| v + 0.5);
        assert!((l1_loss(&shifted, &t).unwrap().0 - 0.5).abs() < 1e-12);
        assert!(l1_loss(&t, &noise([1, 3, 4, 5], 1)).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr_from_mse(0.01), 20.0);
        let t = noise([1, 3, 8, 8], 2);
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);
        let u = noise([1, 3, 8, 8], 3);
        let half = t.add(&u.sub(&t).unwrap().scale(0.5)).unwrap();
        let gain = psnr(&half, &t).unwrap() - psnr(&u, &t).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identities() {
        let x = noise([1, 3, 26, 23], 4);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&noise([1, 1, 10, 30], 1), &noise([1, 1, 10, 30], 2)).is_err());
        assert!(ms_ssim(&noise([1, 1, 21, 40], 1), &noise([1, 1, 21, 40], 2)).is_err());
    }

    #[test]
    fn ssim_constant_pair_is_luminance_term() {
        let a = Tensor::<f64>::full([1, 1, 16, 16], 0.2);
        let b = Tensor::<f64>::full([1, 1, 16, 16], 0.8);
        let expected = (2.0 * 0.2 * 0.8 + C1) / (0.04 + 0.64 + C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_checkerboard_inverse_is_negative() {
        let x = Tensor::<f64>::from_fn([1, 1, 11, 11], |_, _, y, x| ((y + x) % 2) as f64);
        let inv = x.map(|v| 1.0 - v);
        // single window: means 61/121 vs 60/121, covariance = -variance
        let s = ssim(&x, &inv).unwrap();
        let g = gaussian_window();
        let (mut mx, mut sxx) = (0.0, 0.0);
        for y in 0..11 {
            for xx in 0..11 {
                let w = g[y] * g[xx];
                let v = ((y + xx) % 2) as f64;
                mx += w * v;
                sxx += w * v * v;
            }
        }
        let my = 1.0 - mx;
        let var = sxx - mx * mx;
        let oracle = ((2.0 * mx * my + C1) / (mx * mx + my * my + C1))
            * ((-2.0 * var + C2) / (2.0 * var + C2));
        assert!((s - oracle).abs() < 1e-12);
        assert!(s < 0.0);
    }

    #[test]
    fn scale_count() {
        assert_eq!(ms_ssim_scales(176, 176), 5);
        assert_eq!(ms_ssim_scales(48, 48), 3);
        assert_eq!(ms_ssim_scales(240, 240), 5);
        assert_eq!(ms_ssim_scales(21, 100), 1);
        let w = ms_ssim_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ncc_identities() {
        let x = noise([1, 3, 10, 10], 5);
        assert!((ncc(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!((ncc(&x, &x.map(|v| 0.7 - v)).unwrap() + 1.0).abs() < 1e-9);
        let flat = Tensor::<f64>::full([1, 3, 10, 10], 0.5);
        assert!(matches!(ncc(&x, &flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mixed_loss_reductions() {
        let p = noise([1, 3, 24, 24], 6);
        let t = noise([1, 3, 24, 24], 7);
        let (parts, _) = mixed_loss(&t, &t, 0.84).unwrap();
        assert!(parts.total.abs() < 1e-12);
        let (l1, gl1) = l1_loss(&p, &t).unwrap();
        let (m0, g0) = mixed_loss(&p, &t, 0.0).unwrap();
        assert_eq!(m0.total, l1);
        assert_eq!(g0, gl1);
        let (ms, _) = ms_ssim_with_grad(&p, &t).unwrap();
        let (m1, _) = mixed_loss(&p, &t, 1.0).unwrap();
        assert_eq!(m1.total, 1.0 - ms);
        assert!(mixed_loss(&p, &t, 1.5).is_err());
    }

    #[test]
    fn report_serializes_infinite_psnr() {
        let r = MetricReport::from_images(
            vec![ImageMetrics {
                id: "a".into(),
                psnr: f64::INFINITY,
                ssim: 1.0,
            }],
            vec![],
        );
        let j = serde_json::to_string(&r).unwrap();
        assert!(j.contains("\"inf\""));
    }
}
