//! Lloyd's k-means with k-means++ seeding, used to warm-start the coarse
//! codebook and every PQ sub-codebook.

use std::cell::Cell;

use rand::Rng as _;

use crate::error::{check_dim, param_err, Result};
use crate::numeric::{nearest_row, sq_dist, Matrix, Rng};

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of clustering runs (fit or refine) started on the calling thread.
pub fn invocation_count() -> u64 {
    INVOCATIONS.with(Cell::get)
}

fn count_invocation() {
    INVOCATIONS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    /// Maximum Lloyd iterations.
    pub iters: usize,
    /// Stop once the relative distortion improvement falls below this.
    pub tolerance: f64,
    /// Independent seedings per fit; the lowest final distortion wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            iters: 20,
            tolerance: 1e-4,
            restarts: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Mean squared distance of points to their assigned centroid.
    pub distortion: f64,
    /// Distortion after each assignment step, first entry from the seeds.
    pub history: Vec<f64>,
}

/// Index and squared distance of the closest centroid. Ties go to the
/// lowest index.
pub fn nearest_centroid(x: &[f32], centroids: &Matrix) -> Result<(usize, f64)> {
    if centroids.rows() == 0 {
        return param_err("no centroids");
    }
    check_dim(centroids.cols(), x.len())?;
    Ok(nearest_unchecked(x, centroids))
}

#[inline]
pub(crate) fn nearest_unchecked(x: &[f32], centroids: &Matrix) -> (usize, f64) {
    nearest_row(x, centroids)
}

/// Runs k-means++ seeding followed by Lloyd iterations, `restarts` times,
/// and keeps the run with the lowest distortion (earliest on ties).
pub fn kmeans_fit(points: &Matrix, k: usize, cfg: &KMeansConfig, rng: &mut Rng) -> Result<KMeansResult> {
    validate(points, k, cfg)?;
    if cfg.restarts == 0 {
        return param_err("k-means needs at least one restart");
    }
    count_invocation();
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts {
        let run = lloyd(points, plus_plus_seeds(points, k, rng), cfg);
        if best.as_ref().is_none_or(|b| run.distortion < b.distortion) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts is positive"))
}

/// Lloyd iterations from caller-supplied centroids.
pub fn kmeans_refine(points: &Matrix, initial: Matrix, cfg: &KMeansConfig) -> Result<KMeansResult> {
    validate(points, initial.rows(), cfg)?;
    check_dim(points.cols(), initial.cols())?;
    count_invocation();
    Ok(lloyd(points, initial, cfg))
}

fn validate(points: &Matrix, k: usize, cfg: &KMeansConfig) -> Result<()> {
    if points.rows() == 0 {
        return param_err("k-means needs at least one point");
    }
    if k == 0 {
        return param_err("k must be positive");
    }
    if k > points.rows() {
        return param_err(format!("k = {k} exceeds the number of points ({})", points.rows()));
    }
    if cfg.iters == 0 {
        return param_err("k-means needs at least one iteration");
    }
    Ok(())
}

/// Greedy k-means++: each new seed is the best of `2 + ln k` candidates
/// drawn with probability proportional to squared distance, judged by the
/// total squared distance it leaves.
fn plus_plus_seeds(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let trials = 2 + (k as f64).ln() as usize;
    let mut seeds = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    seeds.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, seeds.row(0))).collect();
    let mut candidate_d2 = vec![0.0f64; n];
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                sample_weighted(&d2, rng.random::<f64>() * total)
            } else {
                rng.random_range(0..n)
            };
            let mut potential = 0.0;
            for (i, p) in points.iter_rows().enumerate() {
                candidate_d2[i] = d2[i].min(sq_dist(p, points.row(pick)));
                potential += candidate_d2[i];
            }
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, candidate_d2.clone()));
            }
        }
        let (_, pick, next_d2) = best.expect("at least two trials");
        seeds.row_mut(c).copy_from_slice(points.row(pick));
        d2 = next_d2;
    }
    seeds
}

/// Index selected by walking cumulative `weights` up to `target`.
fn sample_weighted(weights: &[f64], mut target: f64) -> usize {
    let mut chosen = weights.len() - 1;
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            chosen = i;
            break;
        }
        target -= w;
    }
    // Floating slack can land the walk on a zero-weight tail.
    while weights[chosen] == 0.0 && chosen > 0 {
        chosen -= 1;
    }
    chosen
}

fn lloyd(points: &Matrix, mut centroids: Matrix, cfg: &KMeansConfig) -> KMeansResult {
    let n = points.rows();
    let k = centroids.rows();
    let dim = points.cols();
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::with_capacity(cfg.iters + 1);

    let assign = |centroids: &Matrix, assignments: &mut [usize], dists: &mut [f64]| -> (f64, bool) {
        let mut changed = false;
        let mut total = 0.0;
        for (i, p) in points.iter_rows().enumerate() {
            let (c, d) = nearest_unchecked(p, centroids);
            changed |= assignments[i] != c;
            assignments[i] = c;
            dists[i] = d;
            total += d;
        }
        (total / n as f64, changed)
    };

    let (mut distortion, _) = assign(&centroids, &mut assignments, &mut dists);
    history.push(distortion);

    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..cfg.iters {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (p, &c) in points.iter_rows().zip(&assignments) {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = (s * inv) as f32;
                }
            }
        }
        reseed_empty(points, &mut centroids, &counts, &mut assignments, &mut dists);

        let (next, changed) = assign(&centroids, &mut assignments, &mut dists);
        history.push(next);
        let improvement = distortion - next;
        distortion = next;
        if !changed || distortion == 0.0 || improvement <= cfg.tolerance * distortion.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    KMeansResult {
        centroids,
        assignments,
        distortion,
        history,
    }
}

/// Moves each empty centroid onto the point farthest from its current
/// centroid. Ties go to the lowest point index.
fn reseed_empty(
    points: &Matrix,
    centroids: &mut Matrix,
    counts: &[usize],
    assignments: &mut [usize],
    dists: &mut [f64],
) {
    if counts.iter().all(|&c| c > 0) {
        return;
    }
    for (i, p) in points.iter_rows().enumerate() {
        dists[i] = sq_dist(p, centroids.row(assignments[i]));
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            continue;
        }
        let mut far = 0;
        for i in 1..dists.len() {
            if dists[i] > dists[far] {
                far = i;
            }
        }
        centroids.row_mut(c).copy_from_slice(points.row(far));
        assignments[far] = c;
        dists[far] = 0.0;
    }
}
