//! Dense kernels, the row-major [`Matrix`] used for every table and
//! codebook, the Adagrad update, and seeded random streams.
//!
//! Storage is `f32`; every reduction (dot products, distances, sums)
//! accumulates in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

/// Deterministic random stream used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Row-major `rows x cols` matrix of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally sized rows. An empty slice yields a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact(0) panics, and a 0-column matrix still has rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies the column range `[start, start + len)` of every row.
    pub fn column_block(&self, start: usize, len: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..start + len]);
        }
        Matrix {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Inner product with `f64` accumulation. Lengths must match.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { dot_avx2(a, b) };
    }
    dot_lanes(a, b)
}

/// Squared L2 distance with `f64` accumulation. Lengths must match.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { sq_dist_avx2(a, b) };
    }
    sq_dist_lanes(a, b)
}

/// `f64` inner product with the same summation order as [`dot`].
#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { dot_f64_avx2(a, b) };
    }
    dot_f64_lanes(a, b)
}

/// Index and squared distance of the row of `m` closest to `x`; ties go to
/// the lowest index. `m` must have at least one row.
#[inline]
pub(crate) fn nearest_row(x: &[f32], m: &Matrix) -> (usize, f64) {
    debug_assert_eq!(x.len(), m.cols());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { nearest_row_avx2(x, m) };
    }
    nearest_row_lanes(x, m)
}

#[inline(always)]
fn nearest_row_lanes(x: &[f32], m: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in m.as_slice().chunks_exact(m.cols().max(1)).enumerate() {
        let d = sq_dist_lanes(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nearest_row_avx2(x: &[f32], m: &Matrix) -> (usize, f64) {
    nearest_row_lanes(x, m)
}

// The AVX2 paths compile the same loops with wider registers, so results
// are bitwise identical with or without AVX2.

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f64 {
    dot_lanes(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sq_dist_avx2(a: &[f32], b: &[f32]) -> f64 {
    sq_dist_lanes(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_f64_avx2(a: &[f64], b: &[f64]) -> f64 {
    dot_f64_lanes(a, b)
}

/// `f64` partial sums in sixteen lanes over blocks of 16, then four lanes
/// over blocks of 4, then a sequential tail; lanes are reduced pairwise.
#[inline(always)]
fn lanes<T: Copy>(a: &[T], b: &[T], term: impl Fn(T, T) -> f64) -> f64 {
    let mut wide = [0.0f64; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..16 {
            wide[l] += term(x[l], y[l]);
        }
    }
    let mut narrow = [0.0f64; 4];
    let ca = ra.chunks_exact(4);
    let cb = rb.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| term(x, y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            narrow[l] += term(x[l], y[l]);
        }
    }
    let mut width = 16;
    while width > 4 {
        width /= 2;
        for l in 0..width {
            wide[l] += wide[l + width];
        }
    }
    for l in 0..4 {
        narrow[l] += wide[l];
    }
    (narrow[0] + narrow[2]) + (narrow[1] + narrow[3]) + tail
}

#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f64 {
    lanes(a, b, |x, y| x as f64 * y as f64)
}

#[inline(always)]
fn sq_dist_lanes(a: &[f32], b: &[f32]) -> f64 {
    lanes(a, b, |x, y| {
        let t = x as f64 - y as f64;
        t * t
    })
}

#[inline(always)]
fn dot_f64_lanes(a: &[f64], b: &[f64]) -> f64 {
    lanes(a, b, |x, y| x * y)
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// `Σ (a_i − b_i)²`.
pub fn l2_sq(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(sq_dist(a, b))
}

/// `aᵀb / (‖a‖‖b‖)`, clamped into `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Returns `a / ‖a‖`.
pub fn normalized(a: &[f32]) -> Result<Vec<f32>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateInput("cannot normalize a zero vector".into()));
    }
    Ok(a.iter().map(|&v| (v as f64 / n) as f32).collect())
}

/// Adagrad with the accumulator starting from whatever the caller stores
/// (zero for fresh parameters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Adagrad {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    /// `acc += g²; w -= lr·g/√(acc + ε)`.
    #[inline]
    pub fn step(&self, param: &mut f32, accumulator: &mut f64, grad: f64) {
        if grad == 0.0 {
            return;
        }
        *accumulator += grad * grad;
        let update = self.learning_rate * grad / (*accumulator + self.epsilon).sqrt();
        *param = (*param as f64 - update) as f32;
    }

    pub fn apply(&self, params: &mut [f32], accumulators: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(accumulators.len(), grads.len());
        for ((p, a), &g) in params.iter_mut().zip(accumulators.iter_mut()).zip(grads) {
            self.step(p, a, g);
        }
    }
}

/// Stream for a root seed.
pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from a root seed and a fixed label, so
/// consumers of one label never perturb another's stream.
pub fn sub_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer over (root ^ hash).
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn labeled_rng(root: u64, label: &str) -> Rng {
    seeded_rng(sub_seed(root, label))
}
