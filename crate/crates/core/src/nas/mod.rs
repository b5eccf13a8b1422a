//! Gaussian-process architecture search over discrete (F, D, L)-style grids.

mod gp;
mod mini_train;

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DrnConfig, ModelConfig, RcanConfig};
use crate::seed;

pub use gp::{
    cholesky, coarse_grid, gp_fit, gp_posterior, log_marginal_likelihood, refine_grid, GpHyper,
    GpSurrogate, MAX_JITTER, NOISE_FLOOR,
};

pub use mini_train::MiniTrainEvaluator;

pub const DEFAULT_BETA: f64 = 2.0;
/// Exploration weight used for the synthetic benchmark runs.
pub const BENCHMARK_BETA: f64 = 0.5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Drn,
    Rcan,
}

/// One named axis of the search grid, values strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub values: Vec<usize>,
}

/// A point is one value index per dimension.
pub type Point = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub kind: ArchKind,
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(kind: ArchKind, dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("search space needs at least one dimension"));
        }
        for d in &dims {
            if d.values.is_empty() || d.values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "dimension {} needs strictly increasing values",
                    d.name
                )));
            }
        }
        let space = SearchSpace { kind, dims };
        if space.kind == ArchKind::Drn || space.kind == ArchKind::Rcan {
            if space.dims.len() != 3 {
                return Err(Error::invalid(
                    "architecture spaces have exactly three dimensions",
                ));
            }
            for p in space.points() {
                space.to_config(&p, 2)?.validate()?;
            }
        }
        Ok(space)
    }

    /// F ∈ {16, 32, 64, 128}, D ∈ {2, 4, …, 20}, L ∈ {2, 3, 4}.
    pub fn drn_default() -> Self {
        SearchSpace::new(
            ArchKind::Drn,
            vec![
                Dimension {
                    name: "features".into(),
                    values: vec![16, 32, 64, 128],
                },
                Dimension {
                    name: "depth".into(),
                    values: (1..=10).map(|i| 2 * i).collect(),
                },
                Dimension {
                    name: "block_size".into(),
                    values: vec![2, 3, 4],
                },
            ],
        )
        .expect("default space is valid")
    }

    /// Features, residual groups and blocks per group for the RCAN family.
    pub fn rcan_default() -> Self {
        SearchSpace::new(
            ArchKind::Rcan,
            vec![
                Dimension {
                    name: "features".into(),
                    values: vec![16, 32, 64],
                },
                Dimension {
                    name: "groups".into(),
                    values: vec![1, 2, 3, 4],
                },
                Dimension {
                    name: "blocks_per_group".into(),
                    values: vec![1, 2, 4, 8],
                },
            ],
        )
        .expect("default space is valid")
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn size(&self) -> usize {
        self.dims.iter().map(|d| d.values.len()).product()
    }

    /// Every point in lexicographic index order.
    pub fn points(&self) -> Vec<Point> {
        let mut out: Vec<Point> = vec![vec![]];
        for d in &self.dims {
            out = out
                .into_iter()
                .flat_map(|p| (0..d.values.len()).map(move |i| [p.clone(), vec![i]].concat()))
                .collect();
        }
        out
    }

    pub fn values(&self, p: &[usize]) -> Vec<usize> {
        p.iter()
            .zip(&self.dims)
            .map(|(&i, d)| d.values[i])
            .collect()
    }

    /// Per-dimension min-max normalization of the raw values to `[0, 1]`.
    pub fn encode(&self, p: &[usize]) -> Vec<f64> {
        p.iter()
            .zip(&self.dims)
            .map(|(&i, d)| {
                let (lo, hi) = (d.values[0] as f64, *d.values.last().unwrap() as f64);
                if hi > lo {
                    (d.values[i] as f64 - lo) / (hi - lo)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn to_config(&self, p: &[usize], scale: usize) -> Result<ModelConfig> {
        let v = self.values(p);
        let reduction = if v[0] >= 64 { 16 } else { 4 };
        Ok(match self.kind {
            ArchKind::Drn => ModelConfig::Drn(DrnConfig {
                features: v[0],
                depth: v[1],
                block_size: v[2],
                scale,
                attention_reduction: reduction,
            }),
            ArchKind::Rcan => ModelConfig::Rcan(RcanConfig {
                features: v[0],
                groups: v[1],
                blocks_per_group: v[2],
                attention_reduction: reduction,
                scale,
            }),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Acquisition {
    /// Argmax posterior variance; for a Gaussian this maximizes the
    /// information gain `½·log(1 + σ²/noise)`.
    MaxVariance,
    Ucb {
        beta: f64,
    },
}

impl Default for Acquisition {
    fn default() -> Self {
        Acquisition::Ucb { beta: DEFAULT_BETA }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Pick the pool entry maximizing the acquisition; returns `(index, value)`.
///
/// Without a surrogate every point has the same prior, so the
/// lexicographically smallest encoding wins. Near-ties (relative 1e-12) are
/// also resolved lexicographically.
pub fn acquire(
    surrogate: Option<&GpSurrogate>,
    pool: &[Vec<f64>],
    acquisition: Acquisition,
) -> Result<(usize, f64)> {
    if pool.is_empty() {
        return Err(Error::invalid("acquisition over an empty pool"));
    }
    let scores: Vec<f64> = match surrogate {
        None => vec![0.0; pool.len()],
        Some(s) => pool
            .iter()
            .map(|q| {
                let (m, v) = s.predict(q);
                match acquisition {
                    Acquisition::MaxVariance => v,
                    Acquisition::Ucb { beta } => m + beta * v.sqrt(),
                }
            })
            .collect(),
    };
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * (1.0 + top.abs());
    let best = (0..pool.len())
        .filter(|&i| scores[i] >= top - tol)
        .min_by(|&a, &b| lex_cmp(&pool[a], &pool[b]))
        .expect("nonempty pool");
    Ok((best, scores[best]))
}

/// Maps an architecture point to a score (higher is better).
pub trait Evaluator {
    fn id(&self) -> String;
    fn evaluate(&mut self, space: &SearchSpace, point: &[usize]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub budget: usize,
    pub init_samples: usize,
    #[serde(default)]
    pub acquisition: Acquisition,
    pub seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::invalid("search budget must be positive"));
        }
        if self.init_samples > self.budget {
            return Err(Error::invalid(format!(
                "init_samples {} exceeds budget {}",
                self.init_samples, self.budget
            )));
        }
        if let Acquisition::Ucb { beta } = self.acquisition {
            if beta.is_nan() || beta < 0.0 {
                return Err(Error::invalid(format!(
                    "UCB beta must be nonnegative, got {beta}"
                )));
            }
        }
        Ok(())
    }
}

/// Radical inverse of `i` in `base`.
fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Halton sequence with a seeded Cranley-Patterson rotation, snapped to the
/// grid; points already taken are skipped.
pub fn halton_points(space: &SearchSpace, count: usize, seed_value: u64) -> Vec<Point> {
    let shift: Vec<f64> = (0..space.ndim())
        .map(|d| {
            (seed::derive_index(seed::derive(seed_value, "halton"), d as u64) >> 11) as f64
                / (1u64 << 53) as f64
        })
        .collect();
    let count = count.min(space.size());
    let mut out: Vec<Point> = Vec::with_capacity(count);
    let mut i = 1u64;
    while out.len() < count {
        let p: Point = space
            .dims
            .iter()
            .enumerate()
            .map(|(d, dim)| {
                let u = (radical_inverse(i, PRIMES[d % PRIMES.len()]) + shift[d]).fract();
                ((u * dim.values.len() as f64) as usize).min(dim.values.len() - 1)
            })
            .collect();
        if !out.contains(&p) {
            out.push(p);
        }
        i += 1;
        if i > 1_000_000 {
            break;
        }
    }
    // The low-discrepancy walk covers small grids quickly; fill any remainder
    // deterministically.
    for p in space.points() {
        if out.len() >= count {
            break;
        }
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub point: Vec<usize>,
    /// Observed score, or the imputed score for a failed evaluation.
    pub score: f64,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub hyper: Option<GpHyper>,
    pub acquisition_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPoint {
    pub point: Vec<usize>,
    pub score: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorArgmax {
    pub point: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub evaluator: String,
    pub space: SearchSpace,
    pub config: SearchConfig,
    pub iterations: Vec<IterationRecord>,
    /// Evaluated points sorted by score, best first; failures last.
    pub ranking: Vec<RankedPoint>,
    pub best_observed: RankedPoint,
    pub posterior_argmax: Option<PosteriorArgmax>,
}

impl SearchReport {
    /// Best observed (non-failed) score after each evaluation.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.iterations
            .iter()
            .map(|r| {
                if !r.failed {
                    best = best.max(r.score);
                }
                best
            })
            .collect()
    }
}

/// Scores used for fitting: failed points are imputed at the mean of the
/// successful scores minus three standard deviations.
fn fit_scores(records: &[IterationRecord]) -> Vec<f64> {
    let ok: Vec<f64> = records
        .iter()
        .filter(|r| !r.failed)
        .map(|r| r.score)
        .collect();
    let (mean, std) = if ok.is_empty() {
        (0.0, 1.0)
    } else {
        let m = ok.iter().sum::<f64>() / ok.len() as f64;
        let v = ok.iter().map(|s| (s - m).powi(2)).sum::<f64>() / ok.len() as f64;
        (m, if v > 0.0 { v.sqrt() } else { 1.0 })
    };
    records
        .iter()
        .map(|r| if r.failed { mean - 3.0 * std } else { r.score })
        .collect()
}

fn fit(space: &SearchSpace, records: &[IterationRecord]) -> Result<Option<GpSurrogate>> {
    if records.len() < 2 {
        return Ok(None);
    }
    let x: Vec<Vec<f64>> = records.iter().map(|r| space.encode(&r.point)).collect();
    gp_fit(&x, &fit_scores(records)).map(Some)
}

/// GP-guided search: quasi-random initialization, then fit/acquire/evaluate
/// until the budget (capped at the space size) is spent.
pub fn search(
    space: &SearchSpace,
    evaluator: &mut dyn Evaluator,
    config: &SearchConfig,
) -> Result<SearchReport> {
    config.validate()?;
    let budget = config.budget.min(space.size());
    let init = config.init_samples.min(budget);
    let all = space.points();
    let mut records: Vec<IterationRecord> = Vec::with_capacity(budget);
    let mut evaluate =
        |records: &mut Vec<IterationRecord>, p: Point, hyper: Option<GpHyper>, acq: Option<f64>| {
            let iteration = records.len();
            let (score, failed, error) = match evaluator.evaluate(space, &p) {
                Ok(s) if s.is_finite() => (s, false, None),
                Ok(s) => (f64::NAN, true, Some(format!("non-finite score {s}"))),
                Err(e) => (f64::NAN, true, Some(e.to_string())),
            };
            records.push(IterationRecord {
                iteration,
                point: p,
                score,
                failed,
                error,
                hyper,
                acquisition_value: acq,
            });
            let imputed = fit_scores(records);
            for (r, s) in records.iter_mut().zip(imputed) {
                r.score = s;
            }
        };
    for p in halton_points(space, init, config.seed) {
        evaluate(&mut records, p, None, None);
    }
    while records.len() < budget {
        let surrogate = fit(space, &records)?;
        let pool: Vec<&Point> = all
            .iter()
            .filter(|p| !records.iter().any(|r| &r.point == *p))
            .collect();
        let enc: Vec<Vec<f64>> = pool.iter().map(|p| space.encode(p)).collect();
        let (i, value) = acquire(surrogate.as_ref(), &enc, config.acquisition)?;
        evaluate(
            &mut records,
            pool[i].clone(),
            surrogate.map(|s| s.hyper),
            Some(value),
        );
    }

    let mut ranking: Vec<RankedPoint> = records
        .iter()
        .map(|r| RankedPoint {
            point: r.point.clone(),
            score: r.score,
            failed: r.failed,
        })
        .collect();
    ranking.sort_by(|a, b| {
        a.failed
            .cmp(&b.failed)
            .then(b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal))
            .then(a.point.cmp(&b.point))
    });
    let posterior_argmax = fit(space, &records)?.map(|s| {
        let (mut best, mut bm, mut bv) = (all[0].clone(), f64::NEG_INFINITY, 0.0);
        for p in &all {
            let (m, v) = s.predict(&space.encode(p));
            if m > bm {
                (best, bm, bv) = (p.clone(), m, v);
            }
        }
        PosteriorArgmax {
            point: best,
            mean: bm,
            variance: bv,
        }
    });
    Ok(SearchReport {
        evaluator: evaluator.id(),
        space: space.clone(),
        config: config.clone(),
        best_observed: ranking[0].clone(),
        ranking,
        iterations: records,
        posterior_argmax,
    })
}

/// Uniform random search without replacement: best score after each
/// evaluation.
pub fn random_search_curve(
    space: &SearchSpace,
    evaluator: &mut dyn Evaluator,
    budget: usize,
    seed_value: u64,
) -> Result<Vec<f64>> {
    let mut pts = space.points();
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
        seed_value,
        "random-search",
    )));
    let mut best = f64::NEG_INFINITY;
    let mut curve = Vec::with_capacity(budget);
    for p in pts.into_iter().take(budget) {
        if let Ok(s) = evaluator.evaluate(space, &p) {
            if s.is_finite() {
                best = best.max(s);
            }
        }
        curve.push(best);
    }
    Ok(curve)
}

/// Closed-form concave quadratic in the encoded coordinates with a unique
/// maximum of 0 at the grid point `optimum`.
#[derive(Clone, Debug)]
pub struct QuadraticBenchmark {
    pub optimum: Point,
    pub weights: Vec<f64>,
    target: Vec<f64>,
}

impl QuadraticBenchmark {
    pub fn new(space: &SearchSpace, optimum: Point, weights: Vec<f64>) -> Result<Self> {
        if optimum.len() != space.ndim()
            || weights.len() != space.ndim()
            || weights.iter().any(|&w| w.is_nan() || w <= 0.0)
        {
            return Err(Error::invalid(
                "benchmark optimum/weights must match the space with positive weights",
            ));
        }
        let target = space.encode(&optimum);
        Ok(QuadraticBenchmark {
            optimum,
            weights,
            target,
        })
    }

    /// The default benchmark on the DRN space: optimum at F=64, D=12, L=3.
    pub fn drn_default(space: &SearchSpace) -> Self {
        QuadraticBenchmark::new(space, vec![2, 5, 1], vec![1.0, 2.0, 1.5]).expect("valid benchmark")
    }

    pub fn score(&self, space: &SearchSpace, point: &[usize]) -> f64 {
        let e = space.encode(point);
        -e.iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((a, b), w)| w * (a - b).powi(2))
            .sum::<f64>()
    }
}

impl Evaluator for QuadraticBenchmark {
    fn id(&self) -> String {
        "quadratic".into()
    }

    fn evaluate(&mut self, space: &SearchSpace, point: &[usize]) -> Result<f64> {
        Ok(self.score(space, point))
    }
}
