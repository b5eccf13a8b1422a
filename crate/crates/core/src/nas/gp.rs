//! Gaussian-process regression with an ARD squared-exponential kernel and
//! type-II maximum likelihood hyperparameters over a fixed grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest noise variance considered, in standardized score units.
pub const NOISE_FLOOR: f64 = 1e-6;
/// Largest diagonal jitter tried before a factorization is declared singular.
pub const MAX_JITTER: f64 = 1e-6;

const LENGTH_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
const SIGNAL_GRID: [f64; 3] = [0.25, 1.0, 4.0];
const NOISE_GRID: [f64; 4] = [1e-6, 1e-4, 1e-2, 1e-1];
const REFINE: [f64; 3] = [0.75, 1.0, 4.0 / 3.0];
const LENGTH_BOUNDS: (f64, f64) = (1.0 / 8.0, 8.0);
const SIGNAL_BOUNDS: (f64, f64) = (1.0 / 16.0, 16.0);
const NOISE_MAX: f64 = 1.0;
const LML_TIE: f64 = 1e-9;
const MAX_REFINE_ROUNDS: usize = 25;

/// Kernel hyperparameters, in standardized score units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GpHyper {
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        self.signal_var * (-0.5 * d2).exp()
    }
}

/// Lower Cholesky factor of a dense SPD matrix (row-major `n × n`).
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn forward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * x[k]).sum();
        x[i] = (x[i] - s) / l[i * n + i];
    }
    x
}

fn backward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (x[i] - s) / l[i * n + i];
    }
    x
}

/// Factorized kernel system for one set of hyperparameters.
struct Factor {
    l: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
    log_ml: f64,
}

fn factorize(x: &[Vec<f64>], y: &[f64], hyper: &GpHyper) -> Result<Factor> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = hyper.kernel(&x[i], &x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += hyper.noise_var;
    }
    let mut jitter = 0.0;
    loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&kj, n) {
            let alpha = backward_solve(&l, n, &forward_solve(&l, n, y));
            let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
            let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum();
            let log_ml = -0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Ok(Factor {
                l,
                alpha,
                jitter,
                log_ml,
            });
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "kernel matrix singular even with jitter {MAX_JITTER:e}"
            )));
        }
    }
}

/// Log marginal likelihood of standardized targets `y` under `hyper`.
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], hyper: &GpHyper) -> Result<f64> {
    Ok(factorize(x, y, hyper)?.log_ml)
}

/// The coarse hyperparameter grid for `dims` input dimensions.
pub fn coarse_grid(dims: usize) -> Vec<GpHyper> {
    let mut scales: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..dims {
        scales = scales
            .into_iter()
            .flat_map(|s| {
                LENGTH_GRID
                    .iter()
                    .map(move |&l| [s.clone(), vec![l]].concat())
            })
            .collect();
    }
    let mut out = Vec::new();
    for ls in &scales {
        for &signal_var in &SIGNAL_GRID {
            for &noise_var in &NOISE_GRID {
                out.push(GpHyper {
                    length_scales: ls.clone(),
                    signal_var,
                    noise_var,
                });
            }
        }
    }
    out
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12)
}

/// Multiplicative neighbourhood of `h` used for the fine pass, restricted to
/// a fixed box so flat likelihood ridges cannot drift without bound.
pub fn refine_grid(h: &GpHyper) -> Vec<GpHyper> {
    let mut scales: Vec<Vec<f64>> = vec![vec![]];
    for &l in &h.length_scales {
        scales = scales
            .into_iter()
            .flat_map(|s| {
                REFINE
                    .iter()
                    .map(move |&r| [s.clone(), vec![l * r]].concat())
            })
            .collect();
    }
    let mut out = Vec::new();
    for ls in &scales {
        for &rs in &REFINE {
            for &rn in &[0.5, 1.0, 2.0] {
                let c = GpHyper {
                    length_scales: ls.clone(),
                    signal_var: h.signal_var * rs,
                    noise_var: (h.noise_var * rn).clamp(NOISE_FLOOR, NOISE_MAX),
                };
                if c.length_scales.iter().all(|&l| within(l, LENGTH_BOUNDS))
                    && within(c.signal_var, SIGNAL_BOUNDS)
                {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Whether candidate `(lml, h)` beats the incumbent: higher likelihood, then
/// smaller noise, then larger length-scales (lexicographic).
fn better(lml: f64, h: &GpHyper, best_lml: f64, best: &GpHyper) -> bool {
    if lml > best_lml + LML_TIE * (1.0 + best_lml.abs()) {
        return true;
    }
    if lml < best_lml - LML_TIE * (1.0 + best_lml.abs()) {
        return false;
    }
    if h.noise_var != best.noise_var {
        return h.noise_var < best.noise_var;
    }
    h.length_scales.partial_cmp(&best.length_scales) == Some(std::cmp::Ordering::Greater)
}

fn select(
    x: &[Vec<f64>],
    y: &[f64],
    grid: Vec<GpHyper>,
    incumbent: Option<(f64, GpHyper)>,
) -> Option<(f64, GpHyper)> {
    let mut best = incumbent;
    for h in grid {
        let Ok(lml) = log_marginal_likelihood(x, y, &h) else {
            continue;
        };
        if !lml.is_finite() {
            continue;
        }
        best = match best {
            Some((bl, bh)) if !better(lml, &h, bl, &bh) => Some((bl, bh)),
            _ => Some((lml, h)),
        };
    }
    best
}

/// A fitted GP over encoded points; scores are standardized internally.
#[derive(Clone, Debug)]
pub struct GpSurrogate {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub hyper: GpHyper,
    pub y_mean: f64,
    pub y_std: f64,
    pub log_ml: f64,
    pub jitter: f64,
    l: Vec<f64>,
    alpha: Vec<f64>,
}

fn check_observations(x: &[Vec<f64>], y: &[f64], min: usize) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "{} points but {} scores",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min {
        return Err(Error::invalid(format!(
            "GP fit needs at least {min} observations, got {}",
            x.len()
        )));
    }
    let d = x[0].len();
    if x.iter().any(|p| p.len() != d) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "observations must share dimension and have finite scores",
        ));
    }
    Ok(d)
}

fn standardize(y: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 * (1.0 + mean.abs()) {
        var.sqrt()
    } else {
        1.0
    };
    (mean, std, y.iter().map(|v| (v - mean) / std).collect())
}

impl GpSurrogate {
    /// Condition on the observations under fixed hyperparameters.
    pub fn with_hyper(x: &[Vec<f64>], y: &[f64], hyper: GpHyper) -> Result<Self> {
        let d = check_observations(x, y, 1)?;
        if hyper.length_scales.len() != d
            || hyper.length_scales.iter().any(|&l| l.is_nan() || l <= 0.0)
            || hyper.signal_var.is_nan()
            || hyper.signal_var <= 0.0
        {
            return Err(Error::invalid(format!(
                "bad hyperparameters {hyper:?} for dimension {d}"
            )));
        }
        let (y_mean, y_std, ys) = standardize(y);
        let f = factorize(x, &ys, &hyper)?;
        Ok(GpSurrogate {
            x: x.to_vec(),
            y: y.to_vec(),
            hyper,
            y_mean,
            y_std,
            log_ml: f.log_ml,
            jitter: f.jitter,
            l: f.l,
            alpha: f.alpha,
        })
    }

    /// Posterior mean and latent variance at `q`, in score units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let ks: Vec<f64> = self.x.iter().map(|p| self.hyper.kernel(p, q)).collect();
        let mean = ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        let v = forward_solve(&self.l, n, &ks);
        let var = self.hyper.signal_var - v.iter().map(|a| a * a).sum::<f64>();
        debug_assert!(
            var >= -1e-12 - 1e-9 * self.hyper.signal_var,
            "posterior variance {var}"
        );
        (
            self.y_mean + self.y_std * mean,
            var.max(0.0) * self.y_std * self.y_std,
        )
    }

    /// Signal variance in score units.
    pub fn signal_var(&self) -> f64 {
        self.hyper.signal_var * self.y_std * self.y_std
    }

    /// Noise variance in score units.
    pub fn noise_var(&self) -> f64 {
        self.hyper.noise_var * self.y_std * self.y_std
    }

    /// Standardized targets the factorization was built on.
    pub fn standardized_scores(&self) -> Vec<f64> {
        self.y
            .iter()
            .map(|v| (v - self.y_mean) / self.y_std)
            .collect()
    }
}

/// Fit by maximizing the log marginal likelihood over a coarse grid, then
/// repeatedly over the multiplicative neighbourhood of the incumbent until it
/// stops moving.
pub fn gp_fit(x: &[Vec<f64>], y: &[f64]) -> Result<GpSurrogate> {
    let d = check_observations(x, y, 2)?;
    let (_, _, ys) = standardize(y);
    let coarse = select(x, &ys, coarse_grid(d), None).ok_or_else(|| {
        Error::Numerical("no hyperparameter candidate gave a factorizable kernel".into())
    })?;
    let mut best = coarse;
    for _ in 0..MAX_REFINE_ROUNDS {
        let next =
            select(x, &ys, refine_grid(&best.1), Some(best.clone())).expect("incumbent kept");
        if next.1 == best.1 {
            break;
        }
        best = next;
    }
    GpSurrogate::with_hyper(x, y, best.1)
}

/// Posterior `(mean, variance)` at each query point.
pub fn gp_posterior(surrogate: &GpSurrogate, queries: &[Vec<f64>]) -> Vec<(f64, f64)> {
    queries.iter().map(|q| surrogate.predict(q)).collect()
}
