#![allow(dead_code)]

pub mod fixtures;
pub mod grad;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use srforge::{Shape, Tensor};

pub const FD_EPS: f64 = 1e-4;

/// Denominator floor so that gradients that are zero up to round-off do not
/// blow up the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rand_tensor(shape: impl Into<Shape>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Uniform values with magnitude in `[margin, 1]` and random sign.
pub fn rand_away_from_zero(
    shape: impl Into<Shape>,
    rng: &mut ChaCha8Rng,
    margin: f64,
) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * r)`, the scalar loss whose gradient with respect to `y` is `r`.
pub fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Central finite differences of `f` with respect to every entry of every
/// input (or the listed `entries` of each, when given), compared against the
/// analytic gradients. Returns the largest relative error.
///
/// A ReLU kink inside the `±FD_EPS` bracket makes the central difference
/// meaningless. It is detected without consulting the analytic value: on a
/// smooth function the central differences at `FD_EPS` and `FD_EPS / 2`
/// agree to `O(eps^2)`, across a kink they do not. Such entries are
/// re-measured with a step 10x smaller.
pub fn fd_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> f64,
    analytic: &[Tensor<f64>],
    entries: Option<&[Vec<usize>]>,
) -> f64 {
    fd_check_counted(inputs, f, analytic, entries).0
}

/// [`fd_check`] that also reports how many entries needed the smaller step.
pub fn fd_check_counted(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> f64,
    analytic: &[Tensor<f64>],
    entries: Option<&[Vec<usize>]>,
) -> (f64, usize) {
    assert_eq!(inputs.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut refined = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..inputs.len() {
        assert_eq!(inputs[k].shape(), analytic[k].shape());
        let all: Vec<usize>;
        let idx: &[usize] = match entries {
            Some(e) => &e[k],
            None => {
                all = (0..inputs[k].len()).collect();
                &all
            }
        };
        for &i in idx {
            let orig = work[k].data()[i];
            let mut probe = |eps: f64| {
                work[k].data_mut()[i] = orig + eps;
                let up = f(&work);
                work[k].data_mut()[i] = orig - eps;
                let down = f(&work);
                work[k].data_mut()[i] = orig;
                (up, down)
            };
            let central = |(up, down): (f64, f64), eps: f64| (up - down) / (2.0 * eps);
            let mut numeric = central(probe(FD_EPS), FD_EPS);
            let half = central(probe(FD_EPS / 2.0), FD_EPS / 2.0);
            if (numeric - half).abs() > 1e-4 * numeric.abs().max(half.abs()).max(REL_FLOOR) {
                let eps = FD_EPS * 1e-1;
                numeric = central(probe(eps), eps);
                refined += 1;
            }
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    (worst, refined)
}
