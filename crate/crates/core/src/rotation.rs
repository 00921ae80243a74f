//! Learned orthonormal rotation stored as a product of Givens factors.
//!
//! The rotation is learned by steepest block coordinate descent: each update
//! samples candidate axis pairs, picks the pair whose Givens angle has the
//! largest distortion gradient at zero, line-searches the angle with code
//! assignments frozen, and appends the winning factor on the left
//! (`R ← G·R`).

use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::{check_dim, param_err, Result};
use crate::numeric::{dot_f64, Rng};

/// Rotation by `theta` in the plane of axes `(axis_i, axis_j)`:
/// `x'_i = cos θ·x_i − sin θ·x_j`, `x'_j = sin θ·x_i + cos θ·x_j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GivensFactor {
    pub axis_i: usize,
    pub axis_j: usize,
    pub theta: f64,
}

impl GivensFactor {
    pub fn new(axis_i: usize, axis_j: usize, theta: f64, dim: usize) -> Result<Self> {
        if !(axis_i < axis_j && axis_j < dim) {
            return param_err(format!("invalid Givens axes ({axis_i}, {axis_j}) for dimension {dim}"));
        }
        if !(theta > -PI && theta <= PI) {
            return param_err(format!("Givens angle {theta} outside (-pi, pi]"));
        }
        Ok(Self { axis_i, axis_j, theta })
    }

    /// Rotates the `(axis_i, axis_j)` coordinates of `v` in place.
    pub fn apply(&self, v: &mut [f32]) {
        let (a, b) = self.rotate_pair(v[self.axis_i] as f64, v[self.axis_j] as f64);
        v[self.axis_i] = a as f32;
        v[self.axis_j] = b as f32;
    }

    #[inline]
    fn rotate_pair(&self, a: f64, b: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c * a - s * b, s * a + c * b)
    }
}

/// Re-derive the dense cache from the factor list after this many appends.
const REFRESH_INTERVAL: usize = 1000;

/// Orthonormal `d x d` matrix. The dense cache is kept in `f64`; it is
/// rounded to `f32` only when written into an index.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationMatrix {
    dim: usize,
    factors: Vec<GivensFactor>,
    dense: Vec<f64>,
}

impl RotationMatrix {
    pub fn identity(dim: usize) -> Self {
        let mut dense = vec![0.0; dim * dim];
        for i in 0..dim {
            dense[i * dim + i] = 1.0;
        }
        Self {
            dim,
            factors: Vec::new(),
            dense,
        }
    }

    pub fn from_factors(dim: usize, factors: &[GivensFactor]) -> Result<Self> {
        let mut r = Self::identity(dim);
        for f in factors {
            r.push_factor(GivensFactor::new(f.axis_i, f.axis_j, f.theta, dim)?);
        }
        Ok(r)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn factors(&self) -> &[GivensFactor] {
        &self.factors
    }

    pub fn is_identity(&self) -> bool {
        self.factors.iter().all(|f| f.theta == 0.0)
    }

    /// Row-major dense matrix.
    pub fn dense(&self) -> &[f64] {
        &self.dense
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.dense.iter().map(|&v| v as f32).collect()
    }

    /// Appends `factor` so that the matrix becomes `G·R`.
    pub fn push_factor(&mut self, factor: GivensFactor) {
        debug_assert!(factor.axis_j < self.dim);
        apply_to_rows(&mut self.dense, self.dim, &factor);
        self.factors.push(factor);
        if self.factors.len().is_multiple_of(REFRESH_INTERVAL) {
            self.rebuild();
        }
    }

    /// Recomputes the dense cache from identity and the factor list.
    pub fn rebuild(&mut self) {
        let fresh = Self::identity(self.dim);
        self.dense = fresh.dense;
        for f in &self.factors {
            apply_to_rows(&mut self.dense, self.dim, f);
        }
    }

    /// `R·x`.
    pub fn rotate(&self, x: &[f32]) -> Result<Vec<f32>> {
        check_dim(self.dim, x.len())?;
        let mut out = vec![0.0; self.dim];
        self.rotate_into(x, &mut out);
        Ok(out)
    }

    /// `Rᵀ·a`.
    pub fn rotate_back(&self, a: &[f32]) -> Result<Vec<f32>> {
        check_dim(self.dim, a.len())?;
        let mut out = vec![0.0; self.dim];
        self.rotate_back_into(a, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn rotate_into(&self, x: &[f32], out: &mut [f32]) {
        let d = self.dim;
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot_f64(&self.dense[i * d..(i + 1) * d], &x) as f32;
        }
    }

    #[inline]
    pub(crate) fn rotate_back_into(&self, a: &[f32], out: &mut [f32]) {
        let d = self.dim;
        let mut acc = vec![0.0f64; d];
        for (i, &ai) in a.iter().enumerate() {
            let ai = ai as f64;
            if ai == 0.0 {
                continue;
            }
            for (s, &r) in acc.iter_mut().zip(&self.dense[i * d..(i + 1) * d]) {
                *s += r * ai;
            }
        }
        for (o, s) in out.iter_mut().zip(acc) {
            *o = s as f32;
        }
    }

    /// `max |R·Rᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let ri = &self.dense[i * d..(i + 1) * d];
                let rj = &self.dense[j * d..(j + 1) * d];
                let v: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

fn apply_to_rows(dense: &mut [f64], dim: usize, f: &GivensFactor) {
    let (i, j) = (f.axis_i, f.axis_j);
    for k in 0..dim {
        let (a, b) = f.rotate_pair(dense[i * dim + k], dense[j * dim + k]);
        dense[i * dim + k] = a;
        dense[j * dim + k] = b;
    }
}

/// Derivative at `θ = 0` of `‖err − (G(θ)·xr − xr)‖²`, i.e. of the squared
/// quantization error when a Givens factor on `(i, j)` is appended and the
/// reconstruction `xr + err` is held fixed: `2·(err_i·xr_j − err_j·xr_i)`.
pub fn givens_grad_at_zero(err: &[f32], xr: &[f32], i: usize, j: usize) -> Result<f64> {
    check_dim(xr.len(), err.len())?;
    if i == j {
        return param_err("Givens axes must differ");
    }
    if i >= xr.len() || j >= xr.len() {
        return param_err(format!("axis out of range for dimension {}", xr.len()));
    }
    Ok(grad_unchecked(err, xr, i, j))
}

#[inline]
fn grad_unchecked(err: &[f32], xr: &[f32], i: usize, j: usize) -> f64 {
    2.0 * (err[i] as f64 * xr[j] as f64 - err[j] as f64 * xr[i] as f64)
}

/// A rotated input and its quantization error in rotated space
/// (`err = reconstruction − xr`).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPair {
    pub xr: Vec<f32>,
    pub err: Vec<f32>,
}

impl ResidualPair {
    pub fn new(xr: Vec<f32>, err: Vec<f32>) -> Result<Self> {
        check_dim(xr.len(), err.len())?;
        Ok(Self { xr, err })
    }

    pub fn from_reconstruction(xr: &[f32], reconstruction: &[f32]) -> Self {
        let err = reconstruction.iter().zip(xr).map(|(&r, &x)| r - x).collect();
        Self {
            xr: xr.to_vec(),
            err,
        }
    }

    /// Rotates `xr` by `factor`, keeping the reconstruction fixed.
    pub fn apply_factor(&mut self, factor: &GivensFactor) {
        let (i, j) = (factor.axis_i, factor.axis_j);
        let (xi, xj) = (self.xr[i] as f64, self.xr[j] as f64);
        let (ri, rj) = (xi + self.err[i] as f64, xj + self.err[j] as f64);
        let (ni, nj) = factor.rotate_pair(xi, xj);
        self.xr[i] = ni as f32;
        self.xr[j] = nj as f32;
        self.err[i] = (ri - self.xr[i] as f64) as f32;
        self.err[j] = (rj - self.xr[j] as f64) as f32;
    }

    pub fn sq_error(&self) -> f64 {
        self.err.iter().map(|&e| (e as f64).powi(2)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationConfig {
    /// Axis pairs sampled per update (capped at `d(d−1)/2`).
    pub candidate_pairs: usize,
    /// Line search window is `[−half_width, half_width]`.
    pub search_half_width: f64,
    /// Golden-section iterations.
    pub search_iters: usize,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            candidate_pairs: 64,
            search_half_width: PI / 8.0,
            search_iters: 20,
        }
    }
}

/// Outcome of one [`steepest_update`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationStep {
    /// The appended factor, or `None` when `θ = 0` won.
    pub factor: Option<GivensFactor>,
    /// Batch squared error before the update (frozen assignments).
    pub distortion_before: f64,
    pub distortion_after: f64,
}

/// One steepest block coordinate descent step on the batch.
///
/// Only the selected pair's coordinates change, so the batch error as a
/// function of the angle reduces to
/// `f(θ) − f(0) = −2·[(cos θ − 1)·P + sin θ·Q]` with
/// `P = Σ r_i x_i + r_j x_j` and `Q = Σ r_j x_i − r_i x_j` (`r` the fixed
/// reconstruction). A non-zero angle is accepted only if it improves the
/// error by more than `f32` rounding of the rotated inputs could undo.
pub fn steepest_update(
    rotation: &mut RotationMatrix,
    batch: &[ResidualPair],
    cfg: &RotationConfig,
    rng: &mut Rng,
) -> Result<RotationStep> {
    if batch.is_empty() {
        return param_err("rotation update needs a nonempty batch");
    }
    let d = rotation.dim();
    for p in batch {
        check_dim(d, p.xr.len())?;
        check_dim(d, p.err.len())?;
    }
    let before: f64 = batch.iter().map(ResidualPair::sq_error).sum();
    let unchanged = RotationStep {
        factor: None,
        distortion_before: before,
        distortion_after: before,
    };
    if d < 2 || before == 0.0 {
        return Ok(unchanged);
    }

    let pairs = candidate_pairs(d, cfg.candidate_pairs, rng);
    let mut best = (pairs[0], 0.0f64);
    for &(i, j) in &pairs {
        let g: f64 = batch.iter().map(|p| grad_unchecked(&p.err, &p.xr, i, j)).sum();
        if g.abs() > best.1.abs() {
            best = ((i, j), g);
        }
    }
    let ((i, j), grad) = best;
    if grad == 0.0 {
        return Ok(unchanged);
    }

    let (mut p_sum, mut q_sum, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for p in batch {
        let (xi, xj) = (p.xr[i] as f64, p.xr[j] as f64);
        let (ri, rj) = (xi + p.err[i] as f64, xj + p.err[j] as f64);
        p_sum += ri * xi + rj * xj;
        q_sum += rj * xi - ri * xj;
        let xr_norm: f64 = p.xr.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        scale += xr_norm * p.sq_error().sqrt();
    }
    let delta = |theta: f64| -2.0 * ((theta.cos() - 1.0) * p_sum + theta.sin() * q_sum);

    let theta = golden_section(delta, -cfg.search_half_width, cfg.search_half_width, cfg.search_iters);
    let gain = -delta(theta);
    if !(gain > 1e-6 * scale) {
        return Ok(unchanged);
    }
    let factor = GivensFactor::new(i, j, theta, d)?;
    rotation.push_factor(factor);
    Ok(RotationStep {
        factor: Some(factor),
        distortion_before: before,
        distortion_after: before - gain,
    })
}

fn candidate_pairs(d: usize, wanted: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let total = d * (d - 1) / 2;
    let wanted = wanted.clamp(1, total);
    if wanted == total {
        return (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    }
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(wanted);
    while out.len() < wanted {
        let a = rng.random_range(0..d);
        let b = rng.random_range(0..d - 1);
        let b = if b >= a { b + 1 } else { b };
        let pair = (a.min(b), a.max(b));
        if !out.contains(&pair) {
            out.push(pair);
        }
    }
    out
}

/// Minimizes a unimodal `f` on `[lo, hi]`; returns the best probed point.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    let mut best = if fa <= fb { (a, fa) } else { (b, fb) };
    for _ in 0..iters {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
        for (x, fx) in [(a, fa), (b, fb)] {
            if fx < best.1 {
                best = (x, fx);
            }
        }
    }
    for x in [lo, hi] {
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best.0
}
