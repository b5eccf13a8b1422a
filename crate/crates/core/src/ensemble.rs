//! Test-time ensembling at three levels: the eight dihedral transforms of a
//! patch (self), overlapping distance-weighted tiles (patch) and averaging
//! across independently trained models (model).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{bicubic_resize, Dihedral, Shape, Tensor};

pub const DEFAULT_PATCH: usize = 120;
pub const DEFAULT_STRIDE: usize = 60;
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Anything that maps a `(N, 3, h, w)` LR batch to `(N, 3, h*s, w*s)`.
pub trait Upscaler: Sync {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Upscaler for Model<f32> {
    fn scale(&self) -> usize {
        Model::scale(self)
    }

    /// Raw network output; clamping is left to the outermost ensemble level.
    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(lr)
    }
}

impl<U: Upscaler + ?Sized> Upscaler for &U {
    fn scale(&self) -> usize {
        (**self).scale()
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        (**self).upscale(lr)
    }
}

/// Bicubic interpolation, the no-model baseline.
#[derive(Copy, Clone, Debug)]
pub struct Bicubic(pub usize);

impl Upscaler for Bicubic {
    fn scale(&self) -> usize {
        self.0
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        bicubic_resize(lr, self.0, 1)
    }
}

/// Wraps a closure as an [`Upscaler`].
pub struct FnUpscaler<F> {
    pub scale: usize,
    pub f: F,
}

impl<F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync> Upscaler for FnUpscaler<F> {
    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        (self.f)(lr)
    }
}

/// The ×8 dihedral self-ensemble of an inner upscaler.
pub struct SelfEnsemble<U>(pub U);

impl<U: Upscaler> Upscaler for SelfEnsemble<U> {
    fn scale(&self) -> usize {
        self.0.scale()
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        self_ensemble_forward(&self.0, lr)
    }
}

/// Average of `T⁻¹(f(T(x)))` over the eight dihedral transforms `T`.
pub fn self_ensemble_forward<U: Upscaler + ?Sized>(
    model: &U,
    lr: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let branches: Vec<Tensor<f32>> = Dihedral::all()
        .into_par_iter()
        .map(|t| Ok(t.inverse().apply(&model.upscale(&t.apply(lr))?)))
        .collect::<Result<_>>()?;
    let shape = branches[0].shape();
    let mut acc = vec![0.0f64; shape.numel()];
    for b in &branches {
        if b.shape() != shape {
            return Err(Error::invalid("self-ensemble branches disagree in shape"));
        }
        acc.iter_mut()
            .zip(b.data())
            .for_each(|(a, &v)| *a += v as f64);
    }
    let inv = 1.0 / branches.len() as f64;
    Tensor::from_vec(shape, acc.into_iter().map(|v| (v * inv) as f32).collect())
}

/// Tile origins over an `h × w` LR image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub stride: usize,
    /// `(y, x)` origins in row-major order.
    pub origins: Vec<(usize, usize)>,
}

/// Origins `0, stride, 2·stride, …` plus a final origin clamped to
/// `extent - patch` when the regular grid leaves the tail uncovered.
pub fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + patch <= extent {
        out.push(o);
        o += stride;
    }
    let last = *out.last().expect("patch fits");
    if last + patch < extent {
        out.push(extent - patch);
    }
    out
}

pub fn plan_tiles(h: usize, w: usize, patch: usize, stride: usize) -> Result<TilePlan> {
    if patch == 0 || patch > h.min(w) {
        return Err(Error::invalid(format!(
            "patch {patch} does not fit a {h}x{w} image"
        )));
    }
    if stride == 0 || stride > patch {
        return Err(Error::invalid(format!(
            "stride {stride} must be in 1..={patch}"
        )));
    }
    let ys = axis_origins(h, patch, stride);
    let xs = axis_origins(w, patch, stride);
    let origins = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect();
    Ok(TilePlan {
        h,
        w,
        patch,
        stride,
        origins,
    })
}

/// Separable blending weights for one HR patch, `size × size` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub size: usize,
    pub data: Vec<f64>,
}

impl WeightMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.size + x]
    }
}

/// Triangular weights by distance from the patch center at HR resolution.
///
/// Along each axis of length `n = patch·scale`, with pixel centers at
/// `i + 0.5` and `half = n / 2`, `w(i) = (half + 1 - d_i) / (half + 1 - d_min)`
/// where `d_i = |i - (n - 1) / 2|`; the central pixel(s) get exactly 1 and
/// each axis factor is floored at [`WEIGHT_FLOOR`] before the product.
pub fn make_weight_map(patch: usize, scale: usize) -> WeightMap {
    let n = patch * scale;
    let half = n as f64 / 2.0;
    let center = (n as f64 - 1.0) / 2.0;
    let d_min = if n % 2 == 1 { 0.0 } else { 0.5 };
    let axis: Vec<f64> = (0..n)
        .map(|i| {
            ((half + 1.0 - (i as f64 - center).abs()) / (half + 1.0 - d_min)).max(WEIGHT_FLOOR)
        })
        .collect();
    let data = axis
        .iter()
        .flat_map(|a| axis.iter().map(move |b| a * b))
        .collect();
    WeightMap { size: n, data }
}

/// Blend overlapping tile outputs with 64-bit numerator/denominator canvases.
///
/// Returns the blended image in `f64`; `tiled_forward` casts it.
pub fn tiled_forward_f64<U: Upscaler + ?Sized>(
    model: &U,
    lr: &Tensor<f32>,
    plan: &TilePlan,
    weights: &WeightMap,
) -> Result<Tensor<f64>> {
    let s = lr.shape();
    let scale = model.scale();
    if (s.h, s.w) != (plan.h, plan.w) {
        return Err(Error::invalid(format!(
            "plan is for {}x{}, image is {}x{}",
            plan.h, plan.w, s.h, s.w
        )));
    }
    let hp = plan.patch * scale;
    if weights.size != hp {
        return Err(Error::invalid(format!(
            "weight map {} does not match HR patch {hp}",
            weights.size
        )));
    }
    let out_shape = Shape::new(s.n, s.c, s.h * scale, s.w * scale);
    let mut num = vec![0.0f64; out_shape.numel()];
    let mut den = vec![0.0f64; out_shape.plane()];
    let chunk = 2 * rayon::current_num_threads().max(1);
    for group in plan.origins.chunks(chunk) {
        let outs: Vec<Tensor<f32>> = group
            .par_iter()
            .map(|&(y, x)| model.upscale(&lr.crop(y, x, plan.patch, plan.patch)?))
            .collect::<Result<_>>()?;
        for (&(y, x), out) in group.iter().zip(&outs) {
            if out.shape() != Shape::new(s.n, s.c, hp, hp) {
                return Err(Error::invalid(format!(
                    "upscaler returned {:?} for a {} patch",
                    out.shape(),
                    plan.patch
                )));
            }
            let (oy, ox) = (y * scale, x * scale);
            for r in 0..hp {
                let drow = &mut den[(oy + r) * out_shape.w + ox..][..hp];
                drow.iter_mut()
                    .zip(&weights.data[r * hp..(r + 1) * hp])
                    .for_each(|(d, w)| *d += w);
            }
            for n in 0..s.n {
                for c in 0..s.c {
                    let src = out.plane(n, c);
                    let base = (n * s.c + c) * out_shape.plane();
                    for r in 0..hp {
                        let row = &mut num[base + (oy + r) * out_shape.w + ox..][..hp];
                        let wrow = &weights.data[r * hp..(r + 1) * hp];
                        for ((acc, &v), &w) in
                            row.iter_mut().zip(&src[r * hp..(r + 1) * hp]).zip(wrow)
                        {
                            *acc += w * v as f64;
                        }
                    }
                }
            }
        }
    }
    let plane = out_shape.plane();
    for (i, v) in num.iter_mut().enumerate() {
        let d = den[i % plane];
        assert!(d > 0.0, "tile plan leaves HR pixel {} uncovered", i % plane);
        *v /= d;
    }
    Tensor::from_vec(out_shape, num)
}

/// Patch-ensemble inference; `patch == 0` or a patch larger than the image
/// processes the whole image in one pass.
pub fn tiled_forward<U: Upscaler + ?Sized>(
    model: &U,
    lr: &Tensor<f32>,
    patch: usize,
    stride: usize,
) -> Result<Tensor<f32>> {
    let s = lr.shape();
    if patch == 0 || patch > s.h.min(s.w) {
        return model.upscale(lr);
    }
    let plan = plan_tiles(s.h, s.w, patch, stride)?;
    let weights = make_weight_map(patch, model.scale());
    Ok(tiled_forward_f64(model, lr, &plan, &weights)?.cast())
}

/// Inference settings shared by every member of a model ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    /// LR patch size; 0 disables tiling.
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_true")]
    pub self_ensemble: bool,
    /// Per-model weights; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

fn default_patch() -> usize {
    DEFAULT_PATCH
}

fn default_stride() -> usize {
    DEFAULT_STRIDE
}

fn default_true() -> bool {
    true
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            patch: DEFAULT_PATCH,
            stride: DEFAULT_STRIDE,
            self_ensemble: true,
            weights: None,
        }
    }
}

impl EnsembleSpec {
    /// Single-pass inference: no tiling, no self-ensemble.
    pub fn plain() -> Self {
        EnsembleSpec {
            patch: 0,
            stride: DEFAULT_STRIDE,
            self_ensemble: false,
            weights: None,
        }
    }
}

fn member_forward<U: Upscaler + ?Sized>(
    model: &U,
    spec: &EnsembleSpec,
    lr: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    if spec.self_ensemble {
        tiled_forward(&SelfEnsemble(model), lr, spec.patch, spec.stride)
    } else {
        tiled_forward(model, lr, spec.patch, spec.stride)
    }
}

/// Weighted mean of the members' tiled outputs, clamped to `[0, 1]` once.
pub fn model_ensemble<U: Upscaler>(
    models: &[U],
    spec: &EnsembleSpec,
    lr: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("model ensemble needs at least one model"))?;
    let scale = first.scale();
    if let Some(m) = models.iter().find(|m| m.scale() != scale) {
        return Err(Error::invalid(format!(
            "ensemble members disagree in scale: x{scale} vs x{}",
            m.scale()
        )));
    }
    let weights = match &spec.weights {
        Some(w) => {
            if w.len() != models.len()
                || w.iter().any(|&v| v.is_nan() || v < 0.0)
                || w.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::invalid(format!(
                    "need {} nonnegative model weights with positive sum",
                    models.len()
                )));
            }
            let total: f64 = w.iter().sum();
            w.iter().map(|v| v / total).collect()
        }
        None => vec![1.0 / models.len() as f64; models.len()],
    };
    if models.len() == 1 {
        return Ok(member_forward(first, spec, lr)?.clamp01());
    }
    let outs: Vec<Tensor<f32>> = models
        .par_iter()
        .map(|m| member_forward(m, spec, lr))
        .collect::<Result<_>>()?;
    let shape = outs[0].shape();
    let mut acc = vec![0.0f64; shape.numel()];
    for (out, w) in outs.iter().zip(&weights) {
        acc.iter_mut()
            .zip(out.data())
            .for_each(|(a, &v)| *a += w * v as f64);
    }
    Tensor::from_vec(
        shape,
        acc.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
}
