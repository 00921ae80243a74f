//! The embedding indexing layer.
//!
//! An input `x` is rotated (`x' = R·x`), assigned to its nearest coarse
//! centroid `v_r`, and the residual `x' − v_r` is product-quantized
//! subspace by subspace. Decoding sums the coarse centroid and the
//! concatenated PQ centroids; the full quantization rotates that back
//! with `Rᵀ`.
//!
//! All argmins break ties toward the lowest index.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, param_err, Error, Result};
use crate::kmeans::{kmeans_fit, nearest_unchecked, KMeansConfig};
use crate::numeric::{sq_dist, Matrix, Rng};
use crate::rotation::{ResidualPair, RotationMatrix};

/// PQ sub-codes are stored as single bytes.
pub const MAX_PQ_CENTROIDS: usize = 256;

/// `J x d` coarse centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseCodebook {
    pub centroids: Matrix,
}

impl CoarseCodebook {
    pub fn new(centroids: Matrix) -> Result<Self> {
        if centroids.rows() == 0 {
            return param_err("coarse codebook needs at least one centroid");
        }
        if !centroids.is_finite() {
            return param_err("coarse centroids must be finite");
        }
        Ok(Self { centroids })
    }

    pub fn num_cells(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

/// `D` sub-codebooks of `K` centroids, each `d / D` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct PQCodebook {
    sub_codebooks: Vec<Matrix>,
}

impl PQCodebook {
    pub fn new(sub_codebooks: Vec<Matrix>) -> Result<Self> {
        let Some(first) = sub_codebooks.first() else {
            return param_err("PQ codebook needs at least one subspace");
        };
        let (k, w) = (first.rows(), first.cols());
        if k == 0 || k > MAX_PQ_CENTROIDS {
            return param_err(format!("PQ centroids per subspace must be in 1..=256, got {k}"));
        }
        if w == 0 {
            return param_err("PQ subspaces must be at least one dimension wide");
        }
        for m in &sub_codebooks {
            if m.rows() != k || m.cols() != w {
                return param_err("all PQ sub-codebooks must share K and width");
            }
            if !m.is_finite() {
                return param_err("PQ centroids must be finite");
            }
        }
        Ok(Self { sub_codebooks })
    }

    /// `D x K x (d/D)` values laid out subspace-major.
    pub fn from_flat(subspaces: usize, centroids: usize, sub_dim: usize, data: &[f32]) -> Result<Self> {
        check_dim(subspaces * centroids * sub_dim, data.len())?;
        let per = centroids * sub_dim;
        let subs = (0..subspaces)
            .map(|j| Matrix::from_vec(centroids, sub_dim, data[j * per..(j + 1) * per].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(subs)
    }

    pub fn num_subspaces(&self) -> usize {
        self.sub_codebooks.len()
    }

    pub fn num_centroids(&self) -> usize {
        self.sub_codebooks[0].rows()
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_codebooks[0].cols()
    }

    pub fn dim(&self) -> usize {
        self.num_subspaces() * self.sub_dim()
    }

    pub fn sub_codebook(&self, j: usize) -> &Matrix {
        &self.sub_codebooks[j]
    }

    pub(crate) fn sub_codebook_mut(&mut self, j: usize) -> &mut Matrix {
        &mut self.sub_codebooks[j]
    }

    pub fn centroid(&self, j: usize, c: usize) -> &[f32] {
        self.sub_codebooks[j].row(c)
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.sub_codebooks.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}

/// Coarse code plus one PQ sub-code per subspace.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ItemCode {
    pub coarse: u32,
    pub pq: Vec<u8>,
}

/// Layer shape: `J` coarse cells, `K` centroids per subspace, `D` subspaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub coarse_cells: usize,
    pub pq_centroids: usize,
    pub subspaces: usize,
}

impl LayerShape {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.coarse_cells == 0 {
            return param_err("J must be positive");
        }
        if self.pq_centroids == 0 || self.pq_centroids > MAX_PQ_CENTROIDS {
            return param_err(format!("K must be in 1..=256, got {}", self.pq_centroids));
        }
        if self.subspaces == 0 || dim == 0 || !dim.is_multiple_of(self.subspaces) {
            return param_err(format!("d = {dim} is not divisible by D = {}", self.subspaces));
        }
        Ok(())
    }
}

/// Result of a full quantization pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// `T(x) = Rᵀ·ρ(code)`, in the input space.
    pub quantized: Vec<f32>,
    pub code: ItemCode,
    /// `R·x`.
    pub rotated: Vec<f32>,
    /// `ρ(code)`, in rotated space.
    pub reconstruction: Vec<f32>,
}

impl Quantized {
    /// `‖ρ(code) − R·x‖²`, which equals `‖T(x) − x‖²`.
    pub fn sq_error(&self) -> f64 {
        sq_dist(&self.reconstruction, &self.rotated)
    }

    pub fn residual_pair(&self) -> ResidualPair {
        ResidualPair::from_reconstruction(&self.rotated, &self.reconstruction)
    }
}

/// Forward value of the straight-through estimator; backward is identity.
#[derive(Clone, Debug, PartialEq)]
pub struct StraightThrough {
    pub forward: Vec<f32>,
    pub code: ItemCode,
}

impl StraightThrough {
    /// Gradient w.r.t. the layer input given the gradient w.r.t. the
    /// emitted embedding: the quantizer is bypassed, so they are identical.
    pub fn backward(&self, upstream: &[f32]) -> Vec<f32> {
        upstream.to_vec()
    }
}

/// Distortion regularizer term for one input, with its gradient routed to
/// the selected centroids. Gradients are unweighted (`λ` is applied by the
/// caller) and live in rotated space.
#[derive(Clone, Debug, PartialEq)]
pub struct RegTerm {
    pub loss: f64,
    pub code: ItemCode,
    /// `2·(ρ(code) − R·x)`; the whole vector goes to coarse centroid
    /// `code.coarse`, slice `j` to PQ centroid `(j, code.pq[j])`.
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerLayer {
    pub rotation: RotationMatrix,
    pub coarse: CoarseCodebook,
    pub pq: PQCodebook,
    /// Weight `λ` of the regularizer against the retrieval loss.
    pub reg_weight: f64,
    /// When false the layer behaves as if `R = I`.
    pub rotation_enabled: bool,
}

impl QuantizerLayer {
    pub fn new(
        rotation: RotationMatrix,
        coarse: CoarseCodebook,
        pq: PQCodebook,
        reg_weight: f64,
        rotation_enabled: bool,
    ) -> Result<Self> {
        let d = rotation.dim();
        check_dim(d, coarse.dim())?;
        check_dim(d, pq.dim())?;
        if !(reg_weight >= 0.0) {
            return param_err("regularizer weight must be nonnegative");
        }
        Ok(Self {
            rotation,
            coarse,
            pq,
            reg_weight,
            rotation_enabled,
        })
    }

    pub fn dim(&self) -> usize {
        self.rotation.dim()
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            coarse_cells: self.coarse.num_cells(),
            pq_centroids: self.pq.num_centroids(),
            subspaces: self.pq.num_subspaces(),
        }
    }

    fn rotates(&self) -> bool {
        self.rotation_enabled && !self.rotation.factors().is_empty()
    }

    /// Rotation actually applied by the layer.
    pub fn effective_rotation(&self) -> RotationMatrix {
        if self.rotation_enabled {
            self.rotation.clone()
        } else {
            RotationMatrix::identity(self.dim())
        }
    }

    pub fn rotate(&self, x: &[f32]) -> Result<Vec<f32>> {
        check_dim(self.dim(), x.len())?;
        Ok(self.rotate_unchecked(x))
    }

    pub(crate) fn rotate_unchecked(&self, x: &[f32]) -> Vec<f32> {
        if self.rotates() {
            let mut out = vec![0.0; x.len()];
            self.rotation.rotate_into(x, &mut out);
            out
        } else {
            x.to_vec()
        }
    }

    pub(crate) fn rotate_back_unchecked(&self, a: &[f32]) -> Vec<f32> {
        if self.rotates() {
            let mut out = vec![0.0; a.len()];
            self.rotation.rotate_back_into(a, &mut out);
            out
        } else {
            a.to_vec()
        }
    }

    /// Coarse code of an already rotated input and its residual `xr − v_r`.
    pub fn coarse_assign(&self, xr: &[f32]) -> Result<(u32, Vec<f32>)> {
        check_dim(self.dim(), xr.len())?;
        let (r, _) = nearest_unchecked(xr, &self.coarse.centroids);
        let residual = xr.iter().zip(self.coarse.centroids.row(r)).map(|(a, b)| a - b).collect();
        Ok((r as u32, residual))
    }

    /// Independent per-subspace argmin over a residual.
    pub fn pq_encode(&self, y: &[f32]) -> Result<Vec<u8>> {
        check_dim(self.dim(), y.len())?;
        Ok(self.pq_encode_unchecked(y))
    }

    fn pq_encode_unchecked(&self, y: &[f32]) -> Vec<u8> {
        let w = self.pq.sub_dim();
        y.chunks_exact(w)
            .enumerate()
            .map(|(j, sub)| nearest_unchecked(sub, self.pq.sub_codebook(j)).0 as u8)
            .collect()
    }

    pub fn validate_code(&self, code: &ItemCode) -> Result<()> {
        if code.coarse as usize >= self.coarse.num_cells() {
            return Err(Error::CorruptCode(format!(
                "coarse code {} out of range (J = {})",
                code.coarse,
                self.coarse.num_cells()
            )));
        }
        if code.pq.len() != self.pq.num_subspaces() {
            return Err(Error::CorruptCode(format!(
                "PQ code has {} entries, expected {}",
                code.pq.len(),
                self.pq.num_subspaces()
            )));
        }
        let k = self.pq.num_centroids();
        if let Some(c) = code.pq.iter().find(|&&c| c as usize >= k) {
            return Err(Error::CorruptCode(format!("PQ code {c} out of range (K = {k})")));
        }
        Ok(())
    }

    /// `ρ(r, c) = v_r + [v¹_{c¹}, …, v^D_{c^D}]`, in rotated space.
    pub fn decode(&self, code: &ItemCode) -> Result<Vec<f32>> {
        self.validate_code(code)?;
        Ok(self.decode_unchecked(code))
    }

    pub(crate) fn decode_unchecked(&self, code: &ItemCode) -> Vec<f32> {
        let w = self.pq.sub_dim();
        let mut out = self.coarse.centroids.row(code.coarse as usize).to_vec();
        for (j, (chunk, &c)) in out.chunks_exact_mut(w).zip(&code.pq).enumerate() {
            for (o, &v) in chunk.iter_mut().zip(self.pq.centroid(j, c as usize)) {
                *o += v;
            }
        }
        out
    }

    /// Code and rotated-space reconstruction for a rotated input.
    pub(crate) fn encode_rotated(&self, xr: &[f32]) -> (ItemCode, Vec<f32>) {
        let (r, _) = nearest_unchecked(xr, &self.coarse.centroids);
        let centroid = self.coarse.centroids.row(r);
        let residual: Vec<f32> = xr.iter().zip(centroid).map(|(a, b)| a - b).collect();
        let code = ItemCode {
            coarse: r as u32,
            pq: self.pq_encode_unchecked(&residual),
        };
        let reconstruction = self.decode_unchecked(&code);
        (code, reconstruction)
    }

    /// Item code only; this is all an index build needs.
    pub fn encode(&self, x: &[f32]) -> Result<ItemCode> {
        check_dim(self.dim(), x.len())?;
        Ok(self.encode_rotated(&self.rotate_unchecked(x)).0)
    }

    /// `T(x) = Rᵀ·ρ(ψ(R·x), φ(R·x − v_ψ))`.
    pub fn full_quantize(&self, x: &[f32]) -> Result<Quantized> {
        check_dim(self.dim(), x.len())?;
        let rotated = self.rotate_unchecked(x);
        let (code, reconstruction) = self.encode_rotated(&rotated);
        let quantized = self.rotate_back_unchecked(&reconstruction);
        Ok(Quantized {
            quantized,
            code,
            rotated,
            reconstruction,
        })
    }

    /// Emits `T(x)` forward; see [`StraightThrough::backward`].
    pub fn straight_through(&self, x: &[f32]) -> Result<StraightThrough> {
        let q = self.full_quantize(x)?;
        Ok(StraightThrough {
            forward: q.quantized,
            code: q.code,
        })
    }

    /// `‖ρ(code) − R·x‖²` and its gradient w.r.t. the selected centroids.
    /// Nothing flows to `x` or to `R`.
    pub fn reg_loss_and_grads(&self, x: &[f32]) -> Result<RegTerm> {
        let q = self.full_quantize(x)?;
        Ok(reg_term(&q))
    }

    /// Adds `scale · grad` into centroid gradient buffers shaped like the
    /// codebooks (`coarse`: `J x d`, `pq`: flat `D x K x d/D`).
    pub(crate) fn route_reg_grad(
        &self,
        code: &ItemCode,
        grad: &[f64],
        scale: f64,
        coarse_buf: &mut [f64],
        pq_buf: &mut [f64],
    ) {
        let d = self.dim();
        let r = code.coarse as usize;
        for (b, g) in coarse_buf[r * d..(r + 1) * d].iter_mut().zip(grad) {
            *b += scale * g;
        }
        let (k, w) = (self.pq.num_centroids(), self.pq.sub_dim());
        for (j, &c) in code.pq.iter().enumerate() {
            let off = (j * k + c as usize) * w;
            for (b, g) in pq_buf[off..off + w].iter_mut().zip(&grad[j * w..(j + 1) * w]) {
                *b += scale * g;
            }
        }
    }
}

pub(crate) fn reg_term(q: &Quantized) -> RegTerm {
    let grad: Vec<f64> = q
        .reconstruction
        .iter()
        .zip(&q.rotated)
        .map(|(&r, &x)| 2.0 * (r as f64 - x as f64))
        .collect();
    RegTerm {
        loss: q.sq_error(),
        code: q.code.clone(),
        grad,
    }
}

/// Initializes the layer by k-means: coarse centroids on the embeddings
/// (identity rotation), then one k-means per subspace on the residuals.
pub fn warm_start_init(
    items: &Matrix,
    shape: LayerShape,
    kmeans: &KMeansConfig,
    reg_weight: f64,
    rotation_enabled: bool,
    rng: &mut Rng,
) -> Result<QuantizerLayer> {
    let d = items.cols();
    shape.validate(d)?;
    let n = items.rows();
    if n < shape.coarse_cells || n < shape.pq_centroids {
        return param_err(format!(
            "{n} items cannot seed J = {} coarse and K = {} PQ centroids",
            shape.coarse_cells, shape.pq_centroids
        ));
    }
    let coarse = kmeans_fit(items, shape.coarse_cells, kmeans, rng)?;
    let mut residuals = items.clone();
    for (i, &a) in coarse.assignments.iter().enumerate() {
        let c = coarse.centroids.row(a);
        for (v, &cv) in residuals.row_mut(i).iter_mut().zip(c) {
            *v -= cv;
        }
    }
    let w = d / shape.subspaces;
    let mut subs = Vec::with_capacity(shape.subspaces);
    for j in 0..shape.subspaces {
        let block = residuals.column_block(j * w, w);
        subs.push(kmeans_fit(&block, shape.pq_centroids, kmeans, rng)?.centroids);
    }
    QuantizerLayer::new(
        RotationMatrix::identity(d),
        CoarseCodebook::new(coarse.centroids)?,
        PQCodebook::new(subs)?,
        reg_weight,
        rotation_enabled,
    )
}

/// Random-normal centroids with standard deviation `std` (the cold start).
pub fn cold_start_init(
    dim: usize,
    shape: LayerShape,
    std: f64,
    reg_weight: f64,
    rotation_enabled: bool,
    rng: &mut Rng,
) -> Result<QuantizerLayer> {
    shape.validate(dim)?;
    let mut normal = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| (std * Distribution::<f64>::sample(&StandardNormal, &mut *rng)) as f32)
            .collect::<Vec<f32>>()
    };
    let coarse = Matrix::from_vec(shape.coarse_cells, dim, normal(shape.coarse_cells * dim))?;
    let w = dim / shape.subspaces;
    let subs = (0..shape.subspaces)
        .map(|_| Matrix::from_vec(shape.pq_centroids, w, normal(shape.pq_centroids * w)))
        .collect::<Result<Vec<_>>>()?;
    QuantizerLayer::new(
        RotationMatrix::identity(dim),
        CoarseCodebook::new(coarse)?,
        PQCodebook::new(subs)?,
        reg_weight,
        rotation_enabled,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::seeded_rng;
    use crate::rotation::GivensFactor;
    use rand::Rng as _;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_layer(rng: &mut Rng, d: usize, j: usize, k: usize, subspaces: usize) -> QuantizerLayer {
        let factors: Vec<GivensFactor> = (0..20)
            .map(|_| {
                let a = rng.random_range(0..d - 1);
                let b = rng.random_range(a + 1..d);
                GivensFactor::new(a, b, rng.random_range(-1.0..1.0), d).unwrap()
            })
            .collect();
        let subs = (0..subspaces).map(|_| random_matrix(rng, k, d / subspaces)).collect();
        QuantizerLayer::new(
            RotationMatrix::from_factors(d, &factors).unwrap(),
            CoarseCodebook::new(random_matrix(rng, j, d)).unwrap(),
            PQCodebook::new(subs).unwrap(),
            0.1,
            true,
        )
        .unwrap()
    }

    /// Layer with identity rotation whose PQ sub-codebooks all contain zero
    /// at index 0.
    fn layer_with_zero_pq(rng: &mut Rng, d: usize, j: usize, k: usize, subspaces: usize) -> QuantizerLayer {
        let subs = (0..subspaces)
            .map(|_| {
                let mut m = random_matrix(rng, k, d / subspaces);
                m.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
                m
            })
            .collect();
        QuantizerLayer::new(
            RotationMatrix::identity(d),
            CoarseCodebook::new(random_matrix(rng, j, d)).unwrap(),
            PQCodebook::new(subs).unwrap(),
            0.0,
            false,
        )
        .unwrap()
    }

    #[test]
    fn coarse_assign_exact_centroid_and_ties() {
        let mut rng = seeded_rng(1);
        let layer = layer_with_zero_pq(&mut rng, 4, 6, 2, 2);
        let v3 = layer.coarse.centroids.row(3).to_vec();
        let (r, res) = layer.coarse_assign(&v3).unwrap();
        assert_eq!(r, 3);
        assert!(res.iter().all(|&v| v == 0.0));

        let cents = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let tie = QuantizerLayer::new(
            RotationMatrix::identity(2),
            CoarseCodebook::new(cents).unwrap(),
            PQCodebook::new(vec![Matrix::zeros(1, 2)]).unwrap(),
            0.0,
            false,
        )
        .unwrap();
        assert_eq!(tie.coarse_assign(&[0.0, 5.0]).unwrap().0, 0);
        assert!(tie.coarse_assign(&[0.0]).is_err());
    }

    #[test]
    fn coarse_assign_matches_linear_scan() {
        let mut rng = seeded_rng(2);
        let layer = layer_with_zero_pq(&mut rng, 8, 32, 2, 2);
        for _ in 0..1000 {
            let x: Vec<f32> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut best = (0usize, f64::INFINITY);
            for k in 0..32 {
                let c = layer.coarse.centroids.row(k);
                let d: f64 = x.iter().zip(c).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            assert_eq!(layer.coarse_assign(&x).unwrap().0 as usize, best.0);
        }
    }

    #[test]
    fn zero_residual_encodes_to_zero_centroids() {
        let mut rng = seeded_rng(3);
        let layer = layer_with_zero_pq(&mut rng, 6, 3, 4, 3);
        let codes = layer.pq_encode(&[0.0; 6]).unwrap();
        assert_eq!(codes, vec![0, 0, 0]);
        let v1 = layer.coarse.centroids.row(1).to_vec();
        let q = layer.full_quantize(&v1).unwrap();
        assert_eq!(q.code.coarse, 1);
        assert_eq!(q.quantized, v1);
        assert_eq!(q.sq_error(), 0.0);
    }

    #[test]
    fn pq_encode_is_globally_optimal_for_small_codebooks() {
        let mut rng = seeded_rng(4);
        for &(k, subspaces) in &[(2usize, 2usize), (3, 3), (4, 2), (4, 3)] {
            let d = subspaces * 2;
            let layer = layer_with_zero_pq(&mut rng, d, 1, k, subspaces);
            for _ in 0..50 {
                let y: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let codes = layer.pq_encode(&y).unwrap();
                // Brute force over all K^D combined codes.
                let mut best = (Vec::new(), f64::INFINITY);
                for combo in 0..k.pow(subspaces as u32) {
                    let mut c = Vec::with_capacity(subspaces);
                    let mut rest = combo;
                    for _ in 0..subspaces {
                        c.push((rest % k) as u8);
                        rest /= k;
                    }
                    let rec: Vec<f32> =
                        c.iter().enumerate().flat_map(|(j, &cj)| layer.pq.centroid(j, cj as usize).to_vec()).collect();
                    let dist: f64 = rec.iter().zip(&y).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                    if dist < best.1 {
                        best = (c, dist);
                    }
                }
                assert_eq!(codes, best.0);
            }
        }
    }

    #[test]
    fn permuting_sub_codebooks_relabels_codes() {
        let mut rng = seeded_rng(5);
        let layer = layer_with_zero_pq(&mut rng, 4, 2, 3, 2);
        let perm = [2usize, 0, 1];
        let mut permuted = layer.clone();
        for j in 0..2 {
            let m = layer.pq.sub_codebook(j);
            let rows: Vec<Vec<f32>> = perm.iter().map(|&p| m.row(p).to_vec()).collect();
            *permuted.pq.sub_codebook_mut(j) = Matrix::from_rows(&rows).unwrap();
        }
        for _ in 0..50 {
            let x: Vec<f32> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a = layer.full_quantize(&x).unwrap();
            let b = permuted.full_quantize(&x).unwrap();
            for (ca, cb) in a.code.pq.iter().zip(&b.code.pq) {
                assert_eq!(perm[*cb as usize], *ca as usize);
            }
            assert_eq!(a.quantized, b.quantized);
        }
    }

    #[test]
    fn decode_rejects_out_of_range_codes() {
        let mut rng = seeded_rng(6);
        let layer = layer_with_zero_pq(&mut rng, 4, 2, 3, 2);
        assert!(matches!(layer.decode(&ItemCode { coarse: 2, pq: vec![0, 0] }), Err(Error::CorruptCode(_))));
        assert!(matches!(layer.decode(&ItemCode { coarse: 0, pq: vec![3, 0] }), Err(Error::CorruptCode(_))));
        assert!(matches!(layer.decode(&ItemCode { coarse: 0, pq: vec![0] }), Err(Error::CorruptCode(_))));
    }

    #[test]
    fn decode_zero_codebooks_is_zero() {
        let layer = QuantizerLayer::new(
            RotationMatrix::identity(4),
            CoarseCodebook::new(Matrix::zeros(1, 4)).unwrap(),
            PQCodebook::new(vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2)]).unwrap(),
            0.0,
            true,
        )
        .unwrap();
        assert_eq!(layer.decode(&ItemCode { coarse: 0, pq: vec![1, 0] }).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn decode_is_the_closest_reconstruction_in_its_cell() {
        let mut rng = seeded_rng(7);
        let layer = random_layer(&mut rng, 6, 4, 3, 3);
        for _ in 0..50 {
            let x: Vec<f32> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let q = layer.full_quantize(&x).unwrap();
            let mut best = f64::INFINITY;
            for combo in 0..27 {
                let pq = vec![(combo % 3) as u8, ((combo / 3) % 3) as u8, (combo / 9) as u8];
                let rec = layer.decode(&ItemCode { coarse: q.code.coarse, pq }).unwrap();
                best = best.min(sq_dist(&rec, &q.rotated));
            }
            assert!((q.sq_error() - best).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_rotation_single_zero_cell_is_plain_pq() {
        let mut rng = seeded_rng(8);
        let subs: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, 4, 3)).collect();
        let layer = QuantizerLayer::new(
            RotationMatrix::identity(6),
            CoarseCodebook::new(Matrix::zeros(1, 6)).unwrap(),
            PQCodebook::new(subs).unwrap(),
            0.0,
            true,
        )
        .unwrap();
        let x: Vec<f32> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q = layer.full_quantize(&x).unwrap();
        assert_eq!(q.code.pq, layer.pq_encode(&x).unwrap());
        assert_eq!(q.quantized, layer.decode(&q.code).unwrap());
    }

    #[test]
    fn rotated_space_error_equals_input_space_error() {
        let mut rng = seeded_rng(9);
        let layer = random_layer(&mut rng, 8, 5, 4, 4);
        for _ in 0..100 {
            let x: Vec<f32> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let q = layer.full_quantize(&x).unwrap();
            let direct = sq_dist(&q.quantized, &x);
            assert!((direct - q.sq_error()).abs() < 1e-5 * direct.max(1.0));
            let reg = layer.reg_loss_and_grads(&x).unwrap();
            assert_eq!(reg.loss, q.sq_error());
        }
    }

    #[test]
    fn rotation_disabled_means_identity() {
        let mut rng = seeded_rng(10);
        let mut layer = random_layer(&mut rng, 4, 3, 2, 2);
        layer.rotation_enabled = false;
        let x = [0.5, -1.0, 2.0, 0.1];
        let q = layer.full_quantize(&x).unwrap();
        assert_eq!(q.rotated, x.to_vec());
        assert!(layer.effective_rotation().factors().is_empty());
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let mut rng = seeded_rng(11);
        let layer = random_layer(&mut rng, 6, 3, 4, 3);
        let x: Vec<f32> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let st = layer.straight_through(&x).unwrap();
        assert_eq!(st.forward, layer.full_quantize(&x).unwrap().quantized);
        // Downstream L(e) = Σ e_k³: dL/de evaluated at e = T(x).
        let upstream: Vec<f32> = st.forward.iter().map(|e| 3.0 * e * e).collect();
        let g = st.backward(&upstream);
        assert!(g.iter().zip(&upstream).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn reg_gradients_match_finite_differences() {
        let mut rng = seeded_rng(12);
        let mut layer = random_layer(&mut rng, 6, 3, 4, 3);
        let x: Vec<f32> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let reg = layer.reg_loss_and_grads(&x).unwrap();
        let code = reg.code.clone();
        let rotated = layer.rotate(&x).unwrap();
        // Loss with assignments frozen at `code`.
        let frozen = |l: &QuantizerLayer| sq_dist(&l.decode(&code).unwrap(), &rotated);
        let h = 1e-3f32;
        let d = 6;
        let r = code.coarse as usize;
        for k in 0..d {
            let orig = layer.coarse.centroids.row(r)[k];
            layer.coarse.centroids.row_mut(r)[k] = orig + h;
            let up = frozen(&layer);
            layer.coarse.centroids.row_mut(r)[k] = orig - h;
            let down = frozen(&layer);
            layer.coarse.centroids.row_mut(r)[k] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            assert!((fd - reg.grad[k]).abs() <= 1e-2 * reg.grad[k].abs().max(1e-2), "{fd} vs {}", reg.grad[k]);
        }
        let w = 2;
        for (j, &c) in code.pq.iter().enumerate() {
            for t in 0..w {
                let orig = layer.pq.sub_codebook(j).row(c as usize)[t];
                layer.pq.sub_codebook_mut(j).row_mut(c as usize)[t] = orig + h;
                let up = frozen(&layer);
                layer.pq.sub_codebook_mut(j).row_mut(c as usize)[t] = orig - h;
                let down = frozen(&layer);
                layer.pq.sub_codebook_mut(j).row_mut(c as usize)[t] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                let g = reg.grad[j * w + t];
                assert!((fd - g).abs() <= 1e-2 * g.abs().max(1e-2), "{fd} vs {g}");
            }
        }
    }

    #[test]
    fn reg_gradient_descent_converges_to_member_mean() {
        // J = 1 with a zero coarse centroid frozen, K = 1: every point shares
        // PQ centroid u per subspace, and descent on Σ‖u − x‖² lands on the
        // batch mean.
        let points = [[1.0f32, 2.0], [3.0, -2.0], [-1.0, 0.5], [5.0, 1.5]];
        let mut layer = QuantizerLayer::new(
            RotationMatrix::identity(2),
            CoarseCodebook::new(Matrix::zeros(1, 2)).unwrap(),
            PQCodebook::new(vec![Matrix::zeros(1, 1), Matrix::zeros(1, 1)]).unwrap(),
            1.0,
            false,
        )
        .unwrap();
        for _ in 0..500 {
            let mut coarse_buf = vec![0.0; 2];
            let mut pq_buf = vec![0.0; 2];
            for p in &points {
                let reg = layer.reg_loss_and_grads(p).unwrap();
                layer.route_reg_grad(&reg.code, &reg.grad, 0.25, &mut coarse_buf, &mut pq_buf);
            }
            for (j, g) in pq_buf.iter().enumerate() {
                layer.pq.sub_codebook_mut(j).row_mut(0)[0] -= 0.1 * *g as f32;
            }
        }
        assert!((layer.pq.centroid(0, 0)[0] - 2.0).abs() < 1e-5);
        assert!((layer.pq.centroid(1, 0)[0] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn warm_start_single_item() {
        let items = Matrix::from_rows(&[vec![0.3, -0.7, 1.1, 0.2]]).unwrap();
        let shape = LayerShape { coarse_cells: 1, pq_centroids: 1, subspaces: 2 };
        let layer = warm_start_init(&items, shape, &KMeansConfig::default(), 0.1, true, &mut seeded_rng(0)).unwrap();
        assert_eq!(layer.coarse.centroids.row(0), items.row(0));
        assert!(layer.pq.to_flat().iter().all(|&v| v == 0.0));
        assert!(layer.rotation.factors().is_empty());
    }

    #[test]
    fn warm_start_parameter_errors() {
        let items = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let cfg = KMeansConfig::default();
        let mut rng = seeded_rng(0);
        let bad_j = LayerShape { coarse_cells: 3, pq_centroids: 1, subspaces: 1 };
        assert!(warm_start_init(&items, bad_j, &cfg, 0.1, true, &mut rng).is_err());
        let bad_d = LayerShape { coarse_cells: 1, pq_centroids: 1, subspaces: 3 };
        assert!(warm_start_init(&items, bad_d, &cfg, 0.1, true, &mut rng).is_err());
        let bad_k = LayerShape { coarse_cells: 1, pq_centroids: 300, subspaces: 1 };
        assert!(warm_start_init(&items, bad_k, &cfg, 0.1, true, &mut rng).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = seeded_rng(13);
        let layer = random_layer(&mut rng, 8, 6, 5, 2);
        let x: Vec<f32> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(layer.encode(&x).unwrap(), layer.clone().encode(&x).unwrap());
    }
}
