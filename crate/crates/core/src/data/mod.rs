//! LR/HR pair synthesis (blur, bicubic downsample, noise), the NCC alignment
//! gate, aligned random crops with dihedral augmentation, and image I/O.

mod dataset;
mod ppm;
pub mod synth;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::ncc;
use crate::tensor::{bicubic_resize, Dihedral, Scalar, Tensor};

pub use dataset::{
    make_synthetic_dataset, DatasetManifest, DatasetSpec, FilterAudit, ManifestRecord, Split,
    AUDIT_FILE, DEFAULT_VAL_FRACTION, MANIFEST_FILE,
};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};

pub const NCC_THRESHOLD: f64 = 0.99;

/// Square, odd-sized, normalized blur kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) || weights.len() != size * size {
            return Err(Error::invalid(format!(
                "blur kernel must be odd-sized square, got size {size} with {} weights",
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid(
                "blur kernel entries must be finite and nonnegative",
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("blur kernel sums to {sum}, not 1")));
        }
        Ok(BlurKernel { size, weights })
    }

    pub fn delta() -> Self {
        BlurKernel {
            size: 1,
            weights: vec![1.0],
        }
    }

    /// Isotropic Gaussian with radius `ceil(3 sigma)`; `sigma == 0` is the delta.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "blur sigma {sigma} must be finite and nonnegative"
            )));
        }
        if sigma == 0.0 {
            return Ok(Self::delta());
        }
        let r = (3.0 * sigma).ceil() as isize;
        let axis: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let mut weights: Vec<f64> = axis
            .iter()
            .flat_map(|a| axis.iter().map(move |b| a * b))
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        BlurKernel::new(2 * r as usize + 1, weights)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Parameters of the degradation `lr = downsample_s(hr * k) + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradeSpec {
    pub kernel: BlurKernel,
    pub scale: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::invalid(format!(
                "scale {} not in {{2, 3, 4}}",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::invalid(format!(
                "noise sigma {} outside [0, 1]",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Reflect an index into `0..n` (mirror without repeating the edge sample).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// 2-D convolution of every plane with `kernel` under reflect padding.
pub fn blur_reflect<T: Scalar>(image: &Tensor<T>, kernel: &BlurKernel) -> Tensor<T> {
    let s = image.shape();
    let k = kernel.size as isize;
    let r = k / 2;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = image.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h as isize {
                for x in 0..s.w as isize {
                    let mut acc = 0.0;
                    for i in 0..k {
                        let sy = reflect(y + r - i, s.h);
                        for j in 0..k {
                            let sx = reflect(x + r - j, s.w);
                            acc +=
                                kernel.weights[(i * k + j) as usize] * src[sy * s.w + sx].as_f64();
                        }
                    }
                    dst[y as usize * s.w + x as usize] = T::from_f64_lossy(acc);
                }
            }
        }
    }
    out
}

/// Blur, bicubic downsample by `1/s`, add seeded Gaussian noise, clamp.
pub fn degrade<T: Scalar>(hr: &Tensor<T>, spec: &DegradeSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = hr.shape();
    if !s.h.is_multiple_of(spec.scale) || !s.w.is_multiple_of(spec.scale) {
        return Err(Error::invalid(format!(
            "HR size {}x{} not divisible by scale {}",
            s.h, s.w, spec.scale
        )));
    }
    let blurred = blur_reflect(hr, &spec.kernel);
    let mut lr = bicubic_resize(&blurred, 1, spec.scale)?;
    if spec.noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in lr.data_mut() {
            *v = T::from_f64_lossy(v.as_f64() + normal.sample(&mut rng));
        }
    }
    Ok(lr.clamp01())
}

/// Aligned LR/HR images; `hr` is exactly `scale` times `lr` in each extent.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub ncc: f64,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, lr: Tensor<f32>, hr: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let (l, h) = (lr.shape(), hr.shape());
        let ok = l.n == 1
            && h.n == 1
            && l.c == 3
            && h.c == 3
            && l.h > 0
            && l.w > 0
            && h.h % l.h == 0
            && h.w % l.w == 0
            && h.h / l.h == h.w / l.w;
        if !ok {
            return Err(Error::invalid(format!(
                "pair {id}: HR {h:?} is not an integer multiple of LR {l:?}"
            )));
        }
        Ok(ImagePair {
            id,
            lr,
            hr,
            ncc: f64::NAN,
        })
    }

    pub fn scale(&self) -> usize {
        self.hr.shape().h / self.lr.shape().h
    }

    /// NCC between the bicubically upscaled LR image and the HR image.
    pub fn alignment(&self) -> Result<f64> {
        ncc(&self.lr, &self.hr)
    }
}

#[derive(Clone, Debug)]
pub struct Rejected {
    pub pair: ImagePair,
    pub reason: String,
}

/// Keep pairs whose alignment NCC is at least `threshold`; the NCC is stored
/// on every pair. Degenerate pairs are rejected with the reason recorded.
pub fn ncc_filter(pairs: Vec<ImagePair>, threshold: f64) -> (Vec<ImagePair>, Vec<Rejected>) {
    let scored: Vec<(ImagePair, Result<f64>)> = pairs
        .into_par_iter()
        .map(|p| {
            let score = p.alignment();
            (p, score)
        })
        .collect();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (mut pair, score) in scored {
        match score {
            Ok(v) => {
                pair.ncc = v;
                if v >= threshold {
                    kept.push(pair);
                } else {
                    rejected.push(Rejected {
                        pair,
                        reason: format!("ncc {v:.6} below {threshold}"),
                    });
                }
            }
            Err(e) => rejected.push(Rejected {
                pair,
                reason: e.to_string(),
            }),
        }
    }
    (kept, rejected)
}

/// Crop an aligned `patch × patch` LR window at `(y, x)` (and the matching
/// HR window) and apply `transform` to both.
pub fn crop_pair(
    pair: &ImagePair,
    y: usize,
    x: usize,
    patch: usize,
    transform: Dihedral,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = pair.scale();
    let lr = pair.lr.crop(y, x, patch, patch)?;
    let hr = pair.hr.crop(y * s, x * s, patch * s, patch * s)?;
    Ok((transform.apply(&lr), transform.apply(&hr)))
}

/// Uniformly random aligned crop and dihedral transform.
pub fn random_crop_aug(
    pair: &ImagePair,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let l = pair.lr.shape();
    if patch == 0 || patch > l.h || patch > l.w {
        return Err(Error::invalid(format!(
            "patch {patch} does not fit LR image {}x{}",
            l.h, l.w
        )));
    }
    let y = rng.random_range(0..=l.h - patch);
    let x = rng.random_range(0..=l.w - patch);
    let t = Dihedral::from_index(rng.random_range(0..8)).expect("index below 8");
    crop_pair(pair, y, x, patch, t)
}
