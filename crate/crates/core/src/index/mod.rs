//! Serving index: item codes bucketed into inverted lists by coarse cell,
//! searched with inner-product asymmetric distance computation.

mod format;

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use rand::seq::index::sample;

use crate::error::{check_dim, param_err, Error, Result};
use crate::kmeans::{kmeans_refine, KMeansConfig};
use crate::numeric::{normalized, Matrix, Rng};
use crate::quantizer::{warm_start_init, CoarseCodebook, ItemCode, LayerShape, PQCodebook, QuantizerLayer};
use crate::rotation::{steepest_update, ResidualPair, RotationConfig};
use crate::trainer::TwoTowerModel;

pub use format::FORMAT_VERSION;

/// Longest external item id accepted, in bytes.
pub const MAX_ID_BYTES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchParams {
    pub k: usize,
    /// Coarse cells probed, `1 ≤ nprobe ≤ J`.
    pub nprobe: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchHit {
    pub ordinal: usize,
    /// `q̂ᵀ·T(s)`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    /// Dense `d x d` row-major.
    rotation: Vec<f32>,
    coarse: CoarseCodebook,
    pq: PQCodebook,
    coarse_codes: Vec<u32>,
    /// `n_items x D`, ordinal order.
    pq_codes: Vec<u8>,
    lists: Vec<Vec<u32>>,
    ids: Vec<String>,
}

impl EmbeddingIndex {
    fn assemble(
        rotation: Vec<f32>,
        coarse: CoarseCodebook,
        pq: PQCodebook,
        coarse_codes: Vec<u32>,
        pq_codes: Vec<u8>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let d = coarse.dim();
        check_dim(d * d, rotation.len())?;
        check_dim(d, pq.dim())?;
        check_dim(coarse_codes.len(), ids.len())?;
        check_dim(coarse_codes.len() * pq.num_subspaces(), pq_codes.len())?;
        validate_ids(&ids)?;
        let mut lists = vec![Vec::new(); coarse.num_cells()];
        for (ord, &c) in coarse_codes.iter().enumerate() {
            let list = lists
                .get_mut(c as usize)
                .ok_or_else(|| Error::CorruptCode(format!("item {ord} has coarse code {c}")))?;
            list.push(ord as u32);
        }
        let k = pq.num_centroids();
        if let Some(pos) = pq_codes.iter().position(|&c| c as usize >= k) {
            return Err(Error::CorruptCode(format!(
                "item {} has PQ code {} with K = {k}",
                pos / pq.num_subspaces(),
                pq_codes[pos]
            )));
        }
        Ok(Self {
            dim: d,
            rotation,
            coarse,
            pq,
            coarse_codes,
            pq_codes,
            lists,
            ids,
        })
    }

    /// Encodes every item with the trained layer. No clustering happens.
    pub fn build(items: &Matrix, layer: &QuantizerLayer, ids: Vec<String>) -> Result<Self> {
        if items.rows() == 0 {
            return param_err("cannot build an index with no items");
        }
        check_dim(layer.dim(), items.cols())?;
        check_dim(items.rows(), ids.len())?;
        let d_sub = layer.pq.num_subspaces();
        let mut coarse_codes = Vec::with_capacity(items.rows());
        let mut pq_codes = Vec::with_capacity(items.rows() * d_sub);
        for x in items.iter_rows() {
            let ItemCode { coarse, pq } = layer.encode(x)?;
            coarse_codes.push(coarse);
            pq_codes.extend_from_slice(&pq);
        }
        Self::assemble(
            layer.effective_rotation().to_f32(),
            layer.coarse.clone(),
            layer.pq.clone(),
            coarse_codes,
            pq_codes,
            ids,
        )
    }

    /// Index over the model's item tower.
    pub fn from_model(model: &TwoTowerModel, layer: &QuantizerLayer, ids: Vec<String>) -> Result<Self> {
        Self::build(&model.item_table, layer, ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            coarse_cells: self.coarse.num_cells(),
            pq_centroids: self.pq.num_centroids(),
            subspaces: self.pq.num_subspaces(),
        }
    }

    pub fn rotation(&self) -> &[f32] {
        &self.rotation
    }

    pub fn coarse(&self) -> &CoarseCodebook {
        &self.coarse
    }

    pub fn pq(&self) -> &PQCodebook {
        &self.pq
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, ordinal: usize) -> &str {
        &self.ids[ordinal]
    }

    pub fn ordinal_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    pub fn code(&self, ordinal: usize) -> ItemCode {
        let dd = self.pq.num_subspaces();
        ItemCode {
            coarse: self.coarse_codes[ordinal],
            pq: self.pq_codes[ordinal * dd..(ordinal + 1) * dd].to_vec(),
        }
    }

    /// Item ordinals per coarse cell, ascending.
    pub fn inverted_lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    /// `T(s) = Rᵀ·(v_r + concat_j v^j_{c_j})` for one stored item.
    pub fn reconstruct(&self, ordinal: usize) -> Vec<f32> {
        let d = self.dim;
        let code = self.code(ordinal);
        let mut rec: Vec<f64> = self.coarse.centroids.row(code.coarse as usize).iter().map(|&v| v as f64).collect();
        let w = self.pq.sub_dim();
        for (j, &c) in code.pq.iter().enumerate() {
            for (r, &v) in rec[j * w..(j + 1) * w].iter_mut().zip(self.pq.centroid(j, c as usize)) {
                *r += v as f64;
            }
        }
        let rec: Vec<f32> = rec.into_iter().map(|v| v as f32).collect();
        let mut out = vec![0.0f64; d];
        for (i, &a) in rec.iter().enumerate() {
            for (o, &r) in out.iter_mut().zip(&self.rotation[i * d..(i + 1) * d]) {
                *o += r as f64 * a as f64;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Top-k items by `q̂ᵀ·T(s)` over the `nprobe` cells whose centroids
    /// score highest against the rotated query. Ties go to the lower
    /// ordinal. Fewer than `k` hits come back when the probed cells hold
    /// fewer items.
    pub fn search(&self, query: &[f32], params: SearchParams) -> Result<Vec<SearchHit>> {
        check_dim(self.dim, query.len())?;
        if params.k == 0 {
            return param_err("k must be at least 1");
        }
        let j_cells = self.coarse.num_cells();
        if params.nprobe == 0 || params.nprobe > j_cells {
            return param_err(format!("nprobe = {} must lie in [1, {j_cells}]", params.nprobe));
        }
        let q = normalized(query)?;
        let d = self.dim;
        let qr: Vec<f64> = (0..d)
            .map(|i| dot64(&self.rotation[i * d..(i + 1) * d], &q))
            .collect();

        let mut cells: Vec<(f64, usize)> = self
            .coarse
            .centroids
            .iter_rows()
            .enumerate()
            .map(|(r, v)| (dot_mixed(&qr, v), r))
            .collect();
        cells.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cells.truncate(params.nprobe);

        let (dd, kk, w) = (self.pq.num_subspaces(), self.pq.num_centroids(), self.pq.sub_dim());
        let mut lut = vec![0.0f64; dd * kk];
        for j in 0..dd {
            let qj = &qr[j * w..(j + 1) * w];
            for c in 0..kk {
                lut[j * kk + c] = dot_mixed(qj, self.pq.centroid(j, c));
            }
        }

        let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(params.k + 1);
        for &(base, r) in &cells {
            for &ord in &self.lists[r] {
                let o = ord as usize;
                let codes = &self.pq_codes[o * dd..(o + 1) * dd];
                let mut score = base;
                for (j, &c) in codes.iter().enumerate() {
                    score += lut[j * kk + c as usize];
                }
                let cand = Ranked { score, ordinal: ord };
                if heap.len() < params.k {
                    heap.push(Reverse(cand));
                } else if cand > heap.peek().expect("nonempty").0 {
                    heap.pop();
                    heap.push(Reverse(cand));
                }
            }
        }
        let mut hits: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
        hits.sort_by(|a, b| b.cmp(a));
        Ok(hits
            .into_iter()
            .map(|h| SearchHit {
                ordinal: h.ordinal as usize,
                score: h.score,
            })
            .collect())
    }
}

/// Higher score is better; among equal scores the lower ordinal is better.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Ranked {
    score: f64,
    ordinal: u32,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.ordinal.cmp(&self.ordinal))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum()
}

pub(crate) fn validate_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for (ord, id) in ids.iter().enumerate() {
        if id.is_empty() || id.len() > MAX_ID_BYTES {
            return param_err(format!("item {ord}: id must be 1..={MAX_ID_BYTES} bytes, got {}", id.len()));
        }
        if id.chars().any(char::is_control) {
            return param_err(format!("item {ord}: id {id:?} contains control characters"));
        }
        if !seen.insert(id.as_str()) {
            return param_err(format!("duplicate item id {id:?}"));
        }
    }
    Ok(())
}

/// Offline baseline: cluster frozen embeddings, optionally alternating
/// rotation sweeps with re-clustering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OfflineConfig {
    pub shape: LayerShape,
    pub kmeans: KMeansConfig,
    pub use_rotation: bool,
    /// Alternations of rotation sweep and re-clustering.
    pub rounds: usize,
    /// Rotation updates per sweep.
    pub sweep_updates: usize,
    /// Items sampled for each sweep.
    pub sweep_batch: usize,
    pub rotation: RotationConfig,
}

impl OfflineConfig {
    pub fn new(shape: LayerShape, use_rotation: bool) -> Self {
        Self {
            shape,
            kmeans: KMeansConfig::default(),
            use_rotation,
            rounds: 4,
            sweep_updates: 32,
            sweep_batch: 2048,
            rotation: RotationConfig::default(),
        }
    }
}

/// Learns a layer from frozen item embeddings.
pub fn offline_layer(items: &Matrix, cfg: &OfflineConfig, rng: &mut Rng) -> Result<QuantizerLayer> {
    let mut layer = warm_start_init(items, cfg.shape, &cfg.kmeans, 0.0, cfg.use_rotation, rng)?;
    if !cfg.use_rotation {
        return Ok(layer);
    }
    let n = items.rows();
    let d = items.cols();
    for _ in 0..cfg.rounds {
        let picked = sample(rng, n, cfg.sweep_batch.min(n));
        let mut pairs: Vec<ResidualPair> = picked
            .iter()
            .map(|i| layer.full_quantize(items.row(i)).map(|q| q.residual_pair()))
            .collect::<Result<_>>()?;
        for _ in 0..cfg.sweep_updates {
            let step = steepest_update(&mut layer.rotation, &pairs, &cfg.rotation, rng)?;
            if let Some(f) = step.factor {
                for p in &mut pairs {
                    p.apply_factor(&f);
                }
            }
        }

        let mut rotated = Matrix::zeros(n, d);
        for (i, x) in items.iter_rows().enumerate() {
            rotated.row_mut(i).copy_from_slice(&layer.rotate_unchecked(x));
        }
        let coarse = kmeans_refine(&rotated, layer.coarse.centroids.clone(), &cfg.kmeans)?;
        for (i, &a) in coarse.assignments.iter().enumerate() {
            for (v, &c) in rotated.row_mut(i).iter_mut().zip(coarse.centroids.row(a)) {
                *v -= c;
            }
        }
        let w = layer.pq.sub_dim();
        let mut subs = Vec::with_capacity(layer.pq.num_subspaces());
        for j in 0..layer.pq.num_subspaces() {
            let block = rotated.column_block(j * w, w);
            subs.push(kmeans_refine(&block, layer.pq.sub_codebook(j).clone(), &cfg.kmeans)?.centroids);
        }
        layer.coarse = CoarseCodebook::new(coarse.centroids)?;
        layer.pq = PQCodebook::new(subs)?;
    }
    Ok(layer)
}

/// Offline baseline index in the same format as a jointly trained one.
pub fn offline_build(items: &Matrix, ids: Vec<String>, cfg: &OfflineConfig, rng: &mut Rng) -> Result<EmbeddingIndex> {
    let layer = offline_layer(items, cfg, rng)?;
    EmbeddingIndex::build(items, &layer, ids)
}
