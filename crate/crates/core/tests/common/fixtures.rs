use std::f64::consts::PI;

use srforge::data::{degrade, ncc_filter, BlurKernel, DegradeSpec, ImagePair, NCC_THRESHOLD};
use srforge::tensor::bicubic_resize;
use srforge::Tensor;

/// Zero-mean normalized correlation computed directly from its definition.
pub fn ncc_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Smooth colour image built from low-frequency waves and a soft disc.
pub fn smooth_image(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let wave = 0.18 * (2.0 * PI * xf / 16.0 + c as f64).sin()
            + 0.12 * (2.0 * PI * (xf + 0.5 * yf) / 22.0).cos();
        let r = ((xf - w as f64 * 0.4).powi(2) + (yf - h as f64 * 0.55).powi(2)).sqrt();
        let disc = 0.15 / (1.0 + ((r - h as f64 * 0.25) / 2.0).exp());
        (0.45 + wave + disc) as f32
    })
}

pub struct GateOutcome {
    pub aligned_ncc: f64,
    pub shifted_ncc: f64,
    pub kept: Vec<String>,
    pub rejected: Vec<String>,
}

/// One exactly aligned ×2 pair and one whose HR is shifted 4 pixels
/// horizontally, both run through the 0.99 gate.
pub fn ncc_gate_case() -> GateOutcome {
    let (h, w, shift) = (96, 96, 4);
    let big = smooth_image(h, w + shift);
    let hr = big.crop(0, 0, h, w).unwrap();
    let hr_shifted = big.crop(0, shift, h, w).unwrap();
    let spec = DegradeSpec {
        kernel: BlurKernel::gaussian(0.8).unwrap(),
        scale: 2,
        noise_sigma: 0.0,
        seed: 1,
    };
    let lr = degrade(&hr, &spec).unwrap();
    let up: Tensor<f64> = bicubic_resize(&lr.cast::<f64>(), 2, 1).unwrap();
    let aligned_ncc = ncc_oracle(&up, &hr.cast());
    let shifted_ncc = ncc_oracle(&up, &hr_shifted.cast());
    let pairs = vec![
        ImagePair::new("aligned", lr.clone(), hr).unwrap(),
        ImagePair::new("shifted", lr, hr_shifted).unwrap(),
    ];
    let (kept, rejected) = ncc_filter(pairs, NCC_THRESHOLD);
    GateOutcome {
        aligned_ncc,
        shifted_ncc,
        kept: kept.into_iter().map(|p| p.id).collect(),
        rejected: rejected.into_iter().map(|r| r.pair.id).collect(),
    }
}

/// Synthetic ×2 dataset held in memory.
pub fn tiny_data(
    count: usize,
    val: usize,
    hr_size: usize,
    seed: u64,
) -> srforge::trainer::TrainData {
    let dir = tempfile::tempdir().unwrap();
    let spec = srforge::data::DatasetSpec {
        count,
        hr_size,
        scale: 2,
        blur_sigma: 0.8,
        noise_sigma: 0.005,
        val_count: Some(val),
        ncc_threshold: NCC_THRESHOLD,
        seed,
    };
    let manifest = srforge::data::make_synthetic_dataset(dir.path(), &spec).unwrap();
    srforge::trainer::TrainData::from_manifest(&manifest).unwrap()
}

/// The desk-scale dataset: 60 training and 12 validation ×2 pairs of 96×96
/// HR images, Gaussian blur 0.8, noise 0.005.
pub fn desk_data() -> srforge::trainer::TrainData {
    let dir = tempfile::tempdir().unwrap();
    let spec = srforge::data::DatasetSpec {
        count: 72,
        hr_size: 96,
        scale: 2,
        blur_sigma: 0.8,
        noise_sigma: 0.005,
        val_count: Some(12),
        ncc_threshold: NCC_THRESHOLD,
        seed: 1,
    };
    let manifest = srforge::data::make_synthetic_dataset(dir.path(), &spec).unwrap();
    srforge::trainer::TrainData::from_manifest(&manifest).unwrap()
}

/// Desk-scale training schedule for the tiny presets.
pub fn desk_train_config() -> srforge::trainer::TrainConfig {
    let mut cfg = srforge::trainer::TrainConfig::new(30);
    cfg.batch_size = 1;
    cfg.crop = 48;
    cfg.alpha = 0.0;
    cfg.adam.lr = 5e-3;
    cfg.adam.beta2 = 0.9;
    cfg.lr_decay = 0.3;
    cfg.lr_decay_every = 12;
    cfg.seed = 1;
    cfg
}
