use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srforge::metrics::*;
use srforge::{Dihedral, Tensor};

fn noise(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

fn smooth(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c): (f64, f64, f64) = (
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
        rng.random_range(0.0..6.0),
    );
    Tensor::from_fn(shape, |_, ch, y, x| {
        0.5 + 0.3 * ((a * x as f64 + c + ch as f64).sin() * (b * y as f64).cos())
            + 0.05 * rng.random_range(-1.0..1.0)
    })
}

/// Independent zero-mean correlation over all elements.
fn ncc_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn shifted_checkerboard_decorrelates() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let big = Tensor::<f64>::from_fn([1, 3, 52, 52], |_, _, y, x| {
        let check = if (y / 4 + x / 4) % 2 == 0 { 0.8 } else { 0.2 };
        check + 0.05 * rng.random_range(-1.0..1.0)
    });
    let a = big.crop(0, 0, 48, 48).unwrap();
    let b = big.crop(2, 2, 48, 48).unwrap();
    let got = ncc(&a, &b).unwrap();
    assert!((got - ncc_oracle(&a, &b)).abs() < 1e-12);
    assert!(got < 0.99, "ncc {got}");
}

#[test]
fn ncc_resizes_first_argument() {
    let hr = smooth([1, 3, 32, 32], 4);
    let lr = srforge::tensor::bicubic_resize(&hr, 1, 2).unwrap();
    let v = ncc(&lr, &hr).unwrap();
    let up = srforge::tensor::bicubic_resize(&lr, 2, 1).unwrap();
    assert!((v - ncc_oracle(&up, &hr)).abs() < 1e-12);
}

#[test]
fn ms_ssim_needs_two_scales() {
    let a = noise([1, 1, 21, 40], 1);
    assert!(ms_ssim(&a, &a).is_err());
    let b = noise([1, 1, 22, 40], 1);
    assert!((ms_ssim(&b, &b).unwrap() - 1.0).abs() < 1e-9);
    assert!(ssim(&noise([1, 1, 10, 40], 1), &noise([1, 1, 10, 40], 2)).is_err());
}

#[test]
fn report_mean_is_arithmetic_mean() {
    let images = vec![
        ImageMetrics {
            id: "a".into(),
            psnr: 30.0,
            ssim: 0.9,
        },
        ImageMetrics {
            id: "b".into(),
            psnr: 33.0,
            ssim: 0.7,
        },
    ];
    let r = MetricReport::from_images(images, vec![("c".into(), "missing".into())]);
    assert_eq!(r.mean_psnr, 31.5);
    assert!((r.mean_ssim - 0.8).abs() < 1e-15);
    assert_eq!(r.failures.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_and_ncc_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = noise([1, 2, 16, 18], s1);
        let b = smooth([1, 2, 16, 18], s2);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((ncc(&a, &b).unwrap() - ncc(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ssim_family_is_dihedral_invariant(s1 in 0u64..1000, s2 in 0u64..1000, t in 0usize..8) {
        let a = smooth([1, 3, 24, 24], s1);
        let b = smooth([1, 3, 24, 24], s2);
        let d = Dihedral::from_index(t).unwrap();
        let (ta, tb) = (d.apply(&a), d.apply(&b));
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&ta, &tb).unwrap()).abs() < 1e-9);
        prop_assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&ta, &tb).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_mse(seed in 0u64..1000, k1 in 0.01f64..1.0, k2 in 0.01f64..1.0) {
        prop_assume!((k1 - k2).abs() > 1e-6);
        let a = noise([1, 3, 8, 8], seed);
        let d = noise([1, 3, 8, 8], seed + 1).map(|v| v - 0.5);
        let b1 = a.zip_map(&d, |x, e| x + k1 * e).unwrap();
        let b2 = a.zip_map(&d, |x, e| x + k2 * e).unwrap();
        let (m1, m2) = (mse(&a, &b1).unwrap(), mse(&a, &b2).unwrap());
        let (p1, p2) = (psnr(&a, &b1).unwrap(), psnr(&a, &b2).unwrap());
        prop_assert_eq!(m1 < m2, p1 > p2);
    }

    #[test]
    fn halving_errors_adds_six_db(seed in 0u64..1000) {
        let a = noise([1, 3, 8, 8], seed);
        let d = noise([1, 3, 8, 8], seed + 7).map(|v| v - 0.5);
        let full = a.zip_map(&d, |x, e| x + 0.2 * e).unwrap();
        let half = a.zip_map(&d, |x, e| x + 0.1 * e).unwrap();
        let gain = psnr(&a, &half).unwrap() - psnr(&a, &full).unwrap();
        prop_assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn mixed_gradient_is_linear_in_parts(seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let p = smooth([1, 2, 24, 24], seed);
        let t = smooth([1, 2, 24, 24], seed + 1);
        let (parts, g) = mixed_loss(&p, &t, alpha).unwrap();
        let (l1, gl) = l1_loss(&p, &t).unwrap();
        let (ms, gm) = ms_ssim_with_grad(&p, &t).unwrap();
        prop_assert!((parts.total - (alpha * (1.0 - ms) + (1.0 - alpha) * l1)).abs() < 1e-12);
        for ((a, b), c) in g.data().iter().zip(gl.data()).zip(gm.data()) {
            prop_assert!((a - ((1.0 - alpha) * b - alpha * c)).abs() < 1e-12);
        }
    }

    #[test]
    fn ms_ssim_in_unit_interval(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = noise([1, 3, 24, 24], s1);
        let b = noise([1, 3, 24, 24], s2);
        let v = ms_ssim(&a, &b).unwrap();
        prop_assert!(v > 0.0 && v <= 1.0, "ms-ssim {}", v);
    }

    #[test]
    fn ncc_matches_oracle_and_sign_flip(seed in 0u64..1000, c in -2.0f64..2.0) {
        let a = noise([1, 3, 9, 7], seed);
        let b = smooth([1, 3, 9, 7], seed + 3);
        prop_assert!((ncc(&a, &b).unwrap() - ncc_oracle(&a, &b)).abs() < 1e-12);
        prop_assert!((ncc(&a, &a.map(|v| c - v)).unwrap() + 1.0).abs() < 1e-9);
    }
}
