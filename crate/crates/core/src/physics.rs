//! Learned sensor "physics": per-timestep mean and variance functions of a
//! sensor's sample paths.
//!
//! Every trajectory of a sensor is one sample path. Paths are zero-extended
//! to the longest life `T_max` and evaluated on the unit cycle grid
//! `1..=T_max`. At each grid point the collected values form a scalar random
//! variable whose density is summarised by 1-D K-means with one or two
//! clusters: the centroids are the mean functions and the within-cluster
//! variances the variance functions.
//!
//! Alongside the per-mode grids the estimator keeps the pooled moments
//! (mean, variance, second moment `R`) and the drift estimate `ā = dμ/dt`
//! so that the moment identity `dρ/dt = dR/dt − 2μā` can be checked on the
//! stored grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmapss::TrajectorySet;

pub const PHYSICS_SCHEMA: &str = "sensor-physics/v1";

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error("need at least 2 sample paths, found {0}")]
    TooFewPaths(usize),
    #[error("sensor {0} is not among the retained sensors")]
    UnknownSensor(usize),
    #[error("k-means needs at least {k} samples, got {n}")]
    TooFewSamples { k: usize, n: usize },
    #[error("k-means supports K = 1 or 2, got {0}")]
    UnsupportedK(usize),
    #[error("k-means tolerance must be positive")]
    NonPositiveTolerance,
    #[error("t = {t} is outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("physics document: {0}")]
    Document(String),
}

/// Zero-extended sample paths of one sensor on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub sensor_id: usize,
    /// `n_paths` rows of length `T_max`.
    pub paths: Vec<Vec<f64>>,
    pub original_lengths: Vec<usize>,
    /// Cycle indices `1..=T_max`.
    pub grid: Vec<usize>,
}

impl PathEnsemble {
    pub fn from_paths(sensor_id: usize, paths: Vec<Vec<f64>>) -> Result<Self, PhysicsError> {
        if paths.len() < 2 {
            return Err(PhysicsError::TooFewPaths(paths.len()));
        }
        let original_lengths: Vec<usize> = paths.iter().map(Vec::len).collect();
        let t_max = original_lengths.iter().copied().max().unwrap_or(0);
        let paths = paths
            .into_iter()
            .map(|mut p| {
                p.resize(t_max, 0.0);
                p
            })
            .collect();
        Ok(Self {
            sensor_id,
            paths,
            original_lengths,
            grid: (1..=t_max).collect(),
        })
    }

    pub fn t_max(&self) -> usize {
        self.grid.last().copied().unwrap_or(0)
    }

    /// Number of paths whose original length reaches cycle `k`.
    pub fn alive_at(&self, k: usize) -> usize {
        self.original_lengths.iter().filter(|&&l| l >= k).count()
    }

    /// Values at cycle `k`, sorted ascending. Without `include_extended` only
    /// paths still alive at `k` contribute.
    pub fn samples_at(&self, k: usize, include_extended: bool) -> Vec<f64> {
        let mut xs: Vec<f64> = self
            .paths
            .iter()
            .zip(&self.original_lengths)
            .filter(|(_, &len)| include_extended || len >= k)
            .map(|(p, _)| p[k - 1])
            .collect();
        xs.sort_by(f64::total_cmp);
        xs
    }
}

/// Collects one sensor's paths from a trajectory set.
pub fn build_ensemble(set: &TrajectorySet, sensor_id: usize) -> Result<PathEnsemble, PhysicsError> {
    let column = set
        .column_of(sensor_id)
        .ok_or(PhysicsError::UnknownSensor(sensor_id))?;
    let paths = set
        .trajectories
        .iter()
        .map(|t| t.sensor_path(column))
        .collect();
    PathEnsemble::from_paths(sensor_id, paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Ascending.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub within_sse: f64,
    pub weights: Vec<f64>,
    /// Population variance of each cluster.
    pub variances: Vec<f64>,
    pub iterations: usize,
    /// Set when K = 2 was requested on identical samples; the result then
    /// carries a single cluster.
    pub degenerate: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sse_about(xs: &[f64], c: f64) -> f64 {
    xs.iter().map(|x| (x - c) * (x - c)).sum()
}

fn single_cluster(samples: &[f64], degenerate: bool) -> ClusterResult {
    let c = mean(samples);
    let sse = sse_about(samples, c);
    ClusterResult {
        centroids: vec![c],
        assignments: vec![0; samples.len()],
        within_sse: sse,
        weights: vec![1.0],
        variances: vec![sse / samples.len() as f64],
        iterations: 0,
        degenerate,
    }
}

/// Within-cluster SSE of a two-cluster assignment.
fn assignment_sse(samples: &[f64], assignments: &[usize], centroids: &[f64; 2]) -> f64 {
    samples
        .iter()
        .zip(assignments)
        .map(|(x, &a)| (x - centroids[a]) * (x - centroids[a]))
        .sum()
}

fn nearest(x: f64, centroids: &[f64; 2]) -> usize {
    // ties go to the lower centroid
    if (x - centroids[1]).abs() < (x - centroids[0]).abs() {
        1
    } else {
        0
    }
}

/// Lloyd iterations for K = 2 from the given centroids. Returns the final
/// centroids, assignments, iteration count and the SSE after every
/// assignment step.
pub(crate) fn lloyd_two(
    samples: &[f64],
    init: [f64; 2],
    opts: &KMeansOptions,
) -> ([f64; 2], Vec<usize>, usize, Vec<f64>) {
    let mut centroids = init;
    let mut assignments = vec![0usize; samples.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        for (a, &x) in assignments.iter_mut().zip(samples) {
            *a = nearest(x, &centroids);
        }
        for m in 0..2 {
            if assignments.iter().all(|&a| a != m) {
                // reseed the empty cluster at the worst-fitting sample
                let (far, _) = samples
                    .iter()
                    .zip(&assignments)
                    .enumerate()
                    .map(|(i, (x, &a))| (i, (x - centroids[a]).abs()))
                    .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                assignments[far] = m;
                centroids[m] = samples[far];
            }
        }
        trace.push(assignment_sse(samples, &assignments, &centroids));
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for (&x, &a) in samples.iter().zip(&assignments) {
            sums[a] += x;
            counts[a] += 1;
        }
        let updated = [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64];
        let moved = (updated[0] - centroids[0])
            .abs()
            .max((updated[1] - centroids[1]).abs());
        centroids = updated;
        if moved < opts.tol {
            break;
        }
    }
    let last: Vec<usize> = samples.iter().map(|&x| nearest(x, &centroids)).collect();
    if last.contains(&0) && last.contains(&1) {
        assignments = last;
    }
    (centroids, assignments, iterations, trace)
}

/// Best contiguous split of the sorted samples, as `(left_count, sse)`.
/// 1-D two-means optima are contiguous in sorted order, so this is the
/// global optimum.
fn best_sorted_split(sorted: &[f64]) -> (usize, f64) {
    let n = sorted.len();
    let shift = mean(sorted);
    let mut prefix = Vec::with_capacity(n + 1);
    let mut prefix_sq = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    prefix_sq.push(0.0);
    for &x in sorted {
        let y = x - shift;
        prefix.push(prefix.last().unwrap() + y);
        prefix_sq.push(prefix_sq.last().unwrap() + y * y);
    }
    let part = |lo: usize, hi: usize| {
        let s = prefix[hi] - prefix[lo];
        let q = prefix_sq[hi] - prefix_sq[lo];
        (q - s * s / (hi - lo) as f64).max(0.0)
    };
    (1..n)
        .map(|s| (s, part(0, s) + part(s, n)))
        .fold((1, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// 1-D K-means with K ∈ {1, 2}.
///
/// K = 1 returns the arithmetic mean. K = 2 runs Lloyd's algorithm from the
/// (min, max) seeds until the centroids move less than `tol`; the converged
/// partition is then compared against the optimal sorted split and Lloyd is
/// restarted from that split's means when it is strictly better, so the
/// result is always the global optimum. Identical samples with K = 2 yield a
/// single-cluster result flagged `degenerate`.
pub fn kmeans_1d(samples: &[f64], k: usize, opts: &KMeansOptions) -> Result<ClusterResult, PhysicsError> {
    if !(1..=2).contains(&k) {
        return Err(PhysicsError::UnsupportedK(k));
    }
    if opts.tol <= 0.0 {
        return Err(PhysicsError::NonPositiveTolerance);
    }
    if samples.len() < k || samples.is_empty() {
        return Err(PhysicsError::TooFewSamples { k, n: samples.len() });
    }
    if k == 1 {
        return Ok(single_cluster(samples, false));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(single_cluster(samples, true));
    }

    let (mut centroids, mut assignments, mut iterations, _) = lloyd_two(samples, [lo, hi], opts);
    let mut sse = assignment_sse(samples, &assignments, &centroids);

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (split, _) = best_sorted_split(&sorted);
    let split_means = [mean(&sorted[..split]), mean(&sorted[split..])];
    let split_sse = sse_about(&sorted[..split], split_means[0]) + sse_about(&sorted[split..], split_means[1]);
    if split_sse < sse - 1e-12 * (1.0 + sse) {
        let (c, a, it, _) = lloyd_two(samples, split_means, opts);
        centroids = c;
        assignments = a;
        iterations += it;
        sse = assignment_sse(samples, &assignments, &centroids);
    }

    if centroids[0] > centroids[1] {
        centroids.swap(0, 1);
        for a in &mut assignments {
            *a = 1 - *a;
        }
    }
    let n = samples.len() as f64;
    let mut counts = [0usize; 2];
    let mut sq = [0.0; 2];
    for (&x, &a) in samples.iter().zip(&assignments) {
        counts[a] += 1;
        sq[a] += (x - centroids[a]) * (x - centroids[a]);
    }
    Ok(ClusterResult {
        centroids: centroids.to_vec(),
        assignments,
        within_sse: sse,
        weights: vec![counts[0] as f64 / n, counts[1] as f64 / n],
        variances: vec![sq[0] / counts[0] as f64, sq[1] / counts[1] as f64],
        iterations,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityOptions {
    /// Maximum SSE(K=2)/SSE(K=1) for a bimodal call.
    pub sse_ratio: f64,
    /// Minimum centroid gap in units of the pooled within-cluster standard
    /// deviation.
    pub separation: f64,
    /// Smaller samples are always unimodal.
    pub min_samples: usize,
}

impl Default for ModalityOptions {
    fn default() -> Self {
        Self {
            sse_ratio: 0.5,
            separation: 3.5,
            min_samples: 8,
        }
    }
}

/// 1 or 2. Bimodal iff two-means cuts the SSE below `sse_ratio` of the
/// one-cluster SSE and the centroids sit more than `separation` pooled
/// within-cluster standard deviations apart.
pub fn detect_modality(samples: &[f64], opts: &ModalityOptions, kmeans: &KMeansOptions) -> usize {
    if samples.len() < opts.min_samples.max(2) {
        return 1;
    }
    let (Ok(one), Ok(two)) = (kmeans_1d(samples, 1, kmeans), kmeans_1d(samples, 2, kmeans)) else {
        return 1;
    };
    if two.degenerate || one.within_sse <= 0.0 {
        return 1;
    }
    let ratio = two.within_sse / one.within_sse;
    let pooled_std = (two.within_sse / samples.len() as f64).sqrt();
    let gap = two.centroids[1] - two.centroids[0];
    if ratio < opts.sse_ratio && gap > opts.separation * pooled_std {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsOptions {
    /// Use zero-extended values of finished paths in the per-timestep
    /// statistics.
    pub include_extended_zeros: bool,
    /// Timesteps with fewer alive paths reuse the previous estimate.
    pub min_alive: usize,
    pub modality: ModalityOptions,
    pub kmeans: KMeansOptions,
}

impl Default for PhysicsOptions {
    fn default() -> Self {
        Self {
            include_extended_zeros: false,
            min_alive: 8,
            modality: ModalityOptions::default(),
            kmeans: KMeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepPhysics {
    /// 1-based cycle.
    pub k: usize,
    pub modality: usize,
    /// Ascending when bimodal.
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub weights: Vec<f64>,
    /// Pooled second moment E[S²].
    pub r2: f64,
    /// Drift estimate, the finite difference of the pooled mean.
    pub a_bar: f64,
    /// Paths not yet zero-extended at this cycle.
    pub alive: usize,
    pub pooled_mean: f64,
    pub pooled_var: f64,
    /// True when too few paths were alive and the previous estimate was
    /// reused.
    #[serde(default)]
    pub carried: bool,
}

impl TimestepPhysics {
    /// Index of the mode whose mean is closest to `x`.
    pub fn nearest_mode(&self, x: f64) -> usize {
        let mut best = 0;
        for m in 1..self.mu.len() {
            if (x - self.mu[m]).abs() < (x - self.mu[best]).abs() {
                best = m;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorPhysics {
    pub sensor_id: usize,
    pub grid: Vec<usize>,
    pub steps: Vec<TimestepPhysics>,
}

fn estimate_step(
    k: usize,
    samples: &[f64],
    alive: usize,
    opts: &PhysicsOptions,
) -> Result<TimestepPhysics, PhysicsError> {
    let n = samples.len() as f64;
    let pooled_mean = mean(samples);
    let r2 = samples.iter().map(|x| x * x).sum::<f64>() / n;
    let pooled_var = sse_about(samples, pooled_mean) / n;
    let modality = detect_modality(samples, &opts.modality, &opts.kmeans);
    let clusters = kmeans_1d(samples, modality, &opts.kmeans)?;
    let modality = clusters.centroids.len();
    Ok(TimestepPhysics {
        k,
        modality,
        mu: clusters.centroids,
        rho: clusters.variances,
        weights: clusters.weights,
        r2,
        a_bar: 0.0,
        alive,
        pooled_mean,
        pooled_var,
        carried: false,
    })
}

/// Estimates the mean/variance grids of one sensor.
pub fn estimate_physics(ensemble: &PathEnsemble, opts: &PhysicsOptions) -> Result<SensorPhysics, PhysicsError> {
    if ensemble.paths.len() < 2 {
        return Err(PhysicsError::TooFewPaths(ensemble.paths.len()));
    }
    let mut steps: Vec<TimestepPhysics> = Vec::with_capacity(ensemble.t_max());
    for &k in &ensemble.grid {
        let alive = ensemble.alive_at(k);
        let counted = if opts.include_extended_zeros {
            ensemble.paths.len()
        } else {
            alive
        };
        let step = match steps.last() {
            Some(prev) if counted < opts.min_alive => TimestepPhysics {
                k,
                alive,
                carried: true,
                ..prev.clone()
            },
            _ => {
                let samples = ensemble.samples_at(k, opts.include_extended_zeros);
                estimate_step(k, &samples, alive, opts)?
            }
        };
        steps.push(step);
    }
    let means: Vec<f64> = steps.iter().map(|s| s.pooled_mean).collect();
    for (step, d) in steps.iter_mut().zip(central_difference(&means)) {
        step.a_bar = d;
    }
    Ok(SensorPhysics {
        sensor_id: ensemble.sensor_id,
        grid: ensemble.grid.clone(),
        steps,
    })
}

/// Physics of every retained sensor, in column order.
pub fn estimate_all(set: &TrajectorySet, opts: &PhysicsOptions) -> Result<Vec<SensorPhysics>, PhysicsError> {
    set.retained_sensor_ids
        .par_iter()
        .map(|&sensor| estimate_physics(&build_ensemble(set, sensor)?, opts))
        .collect()
}

/// Unit-spacing finite differences: central in the interior, one-sided at
/// the ends.
pub fn central_difference(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    values[1] - values[0]
                } else if i == n - 1 {
                    values[n - 1] - values[n - 2]
                } else {
                    (values[i + 1] - values[i - 1]) / 2.0
                }
            })
            .collect(),
    }
}

/// Average of `values` over the endpoints of the stencil used at each point
/// by [`central_difference`].
fn stencil_midpoint(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    match n {
        0 => Vec::new(),
        1 => values.to_vec(),
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    (values[0] + values[1]) / 2.0
                } else if i == n - 1 {
                    (values[n - 2] + values[n - 1]) / 2.0
                } else {
                    (values[i - 1] + values[i + 1]) / 2.0
                }
            })
            .collect(),
    }
}

impl SensorPhysics {
    pub fn t_max(&self) -> usize {
        self.grid.last().copied().unwrap_or(0)
    }

    /// Grid entry for a 1-based cycle, clamped to the grid.
    pub fn at_cycle(&self, cycle: usize) -> &TimestepPhysics {
        let idx = cycle.clamp(1, self.steps.len()) - 1;
        &self.steps[idx]
    }

    pub fn pooled_means(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.pooled_mean).collect()
    }

    pub fn pooled_vars(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.pooled_var).collect()
    }

    pub fn second_moments(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.r2).collect()
    }

    pub fn drifts(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.a_bar).collect()
    }

    pub fn to_json(&self) -> Result<String, PhysicsError> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'a str,
            #[serde(flatten)]
            physics: &'a SensorPhysics,
        }
        serde_json::to_string_pretty(&Doc {
            schema: PHYSICS_SCHEMA,
            physics: self,
        })
        .map_err(|e| PhysicsError::Document(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, PhysicsError> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            #[serde(flatten)]
            physics: SensorPhysics,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| PhysicsError::Document(e.to_string()))?;
        if doc.schema != PHYSICS_SCHEMA {
            return Err(PhysicsError::Document(format!("unsupported schema {:?}", doc.schema)));
        }
        Ok(doc.physics)
    }
}

/// Per-mode mean and variance at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeValues {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Piecewise-linear interpolation of the grids at real time `t`. Between
/// grid points of different modality the nearest grid point is returned
/// unblended (the lower one on a tie).
pub fn interpolate(physics: &SensorPhysics, t: f64) -> Result<ModeValues, PhysicsError> {
    let lo = physics.grid.first().copied().unwrap_or(0) as f64;
    let hi = physics.t_max() as f64;
    if !(lo..=hi).contains(&t) || physics.steps.is_empty() {
        return Err(PhysicsError::OutOfRange { t, lo, hi });
    }
    let k0 = t.floor() as usize;
    let frac = t - k0 as f64;
    let left = physics.at_cycle(k0);
    if frac == 0.0 {
        return Ok(ModeValues {
            mu: left.mu.clone(),
            rho: left.rho.clone(),
        });
    }
    let right = physics.at_cycle(k0 + 1);
    if left.modality != right.modality {
        let nearest = if frac <= 0.5 { left } else { right };
        return Ok(ModeValues {
            mu: nearest.mu.clone(),
            rho: nearest.rho.clone(),
        });
    }
    let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + frac * (y - x)).collect()
    };
    Ok(ModeValues {
        mu: lerp(&left.mu, &right.mu),
        rho: lerp(&left.rho, &right.rho),
    })
}

/// Largest interior violation of `dρ/dt = dR/dt − 2μā` on the pooled grids,
/// with every derivative taken by [`central_difference`].
///
/// The product term uses μ averaged over the same stencil points as the
/// differences. That is the exact discrete product rule
/// (`D(μ²) = 2·avg(μ)·Dμ`), so for grids satisfying `ρ = R − μ²` the
/// residual is pure rounding error. Evaluating μ at the centre point instead
/// leaves an `ā·Δ²μ/2` discretisation term, see [`pointwise_moment_residual`].
pub fn moment_identity_residual(physics: &SensorPhysics) -> f64 {
    let means = physics.pooled_means();
    identity_residual(physics, &stencil_midpoint(&means))
}

/// Same as [`moment_identity_residual`] but with μ taken at the centre grid
/// point. Nonzero wherever the mean function curves.
pub fn pointwise_moment_residual(physics: &SensorPhysics) -> f64 {
    identity_residual(physics, &physics.pooled_means())
}

fn identity_residual(physics: &SensorPhysics, mu_term: &[f64]) -> f64 {
    let n = physics.steps.len();
    if n < 3 {
        return 0.0;
    }
    let d_rho = central_difference(&physics.pooled_vars());
    let d_r2 = central_difference(&physics.second_moments());
    let a_bar = physics.drifts();
    (1..n - 1)
        .map(|k| (d_rho[k] - (d_r2[k] - 2.0 * mu_term[k] * a_bar[k])).abs())
        .fold(0.0, f64::max)
}
