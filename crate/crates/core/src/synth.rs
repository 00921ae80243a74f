//! Synthetic blob data: latent Gaussian blobs, queries and items sampled
//! per blob, and relevance given by latent proximity within a blob.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::data::pairs_to_tsv;
use crate::error::{param_err, Result};
use crate::eval::QueryTruth;
use crate::numeric::{labeled_rng, sq_dist, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub blobs: usize,
    pub items: usize,
    pub queries: usize,
    pub latent_dim: usize,
    /// Within-blob standard deviation; blob centers have unit variance.
    pub spread: f64,
    /// Nearest same-blob items that count as relevant to each query.
    pub relevant_per_query: usize,
    /// How many of those are withheld from training for evaluation.
    pub heldout_per_query: usize,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            blobs: 100,
            items: 20_000,
            queries: 4_000,
            latent_dim: 16,
            spread: 0.3,
            relevant_per_query: 20,
            heldout_per_query: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlobDataset {
    pub item_ids: Vec<String>,
    pub query_ids: Vec<String>,
    pub train_pairs: Vec<(u32, u32)>,
    pub heldout: Vec<QueryTruth>,
    pub item_blob: Vec<usize>,
    pub query_blob: Vec<usize>,
    pub item_latent: Matrix,
    pub query_latent: Matrix,
}

impl BlobDataset {
    pub fn train_tsv(&self) -> String {
        pairs_to_tsv(
            self.train_pairs
                .iter()
                .map(|&(q, s)| (self.query_ids[q as usize].as_str(), self.item_ids[s as usize].as_str())),
        )
    }

    pub fn heldout_tsv(&self) -> String {
        pairs_to_tsv(self.heldout.iter().flat_map(|t| {
            let mut rel: Vec<usize> = t.relevant.iter().copied().collect();
            rel.sort_unstable();
            rel.into_iter()
                .map(move |s| (self.query_ids[t.query].as_str(), self.item_ids[s].as_str()))
        }))
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| (std * Distribution::<f64>::sample(&StandardNormal, rng)) as f32)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Points around `blobs` unit-variance centers; point `i` belongs to blob
/// `i % blobs`.
pub fn gaussian_blobs(n: usize, blobs: usize, dim: usize, spread: f64, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let centers = normal_matrix(blobs, dim, 1.0, rng);
    let mut points = normal_matrix(n, dim, spread, rng);
    let labels: Vec<usize> = (0..n).map(|i| i % blobs).collect();
    for (i, &b) in labels.iter().enumerate() {
        for (p, &c) in points.row_mut(i).iter_mut().zip(centers.row(b)) {
            *p += c;
        }
    }
    (points, labels)
}

/// Generates a pair dataset in which every item has at least one training
/// pair and every query keeps `relevant − heldout` training pairs.
pub fn blob_dataset(spec: &BlobSpec) -> Result<BlobDataset> {
    if spec.blobs == 0 || spec.latent_dim == 0 {
        return param_err("need at least one blob and one latent dimension");
    }
    if spec.queries < spec.blobs || spec.items < spec.blobs * spec.relevant_per_query {
        return param_err("every blob needs a query and enough items for each relevant set");
    }
    if spec.heldout_per_query >= spec.relevant_per_query {
        return param_err("held-out pairs must leave at least one training pair per query");
    }
    let mut rng = labeled_rng(spec.seed, "blob-data");
    let centers = normal_matrix(spec.blobs, spec.latent_dim, 1.0, &mut rng);
    let place = |n: usize, rng: &mut Rng| {
        let mut m = normal_matrix(n, spec.latent_dim, spec.spread, rng);
        for i in 0..n {
            for (p, &c) in m.row_mut(i).iter_mut().zip(centers.row(i % spec.blobs)) {
                *p += c;
            }
        }
        m
    };
    let item_latent = place(spec.items, &mut rng);
    let query_latent = place(spec.queries, &mut rng);
    let item_blob: Vec<usize> = (0..spec.items).map(|i| i % spec.blobs).collect();
    let query_blob: Vec<usize> = (0..spec.queries).map(|q| q % spec.blobs).collect();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.blobs];
    for (i, &b) in item_blob.iter().enumerate() {
        members[b].push(i);
    }

    let mut train_pairs = Vec::new();
    let mut heldout = Vec::with_capacity(spec.queries);
    let mut covered = vec![false; spec.items];
    for q in 0..spec.queries {
        let ql = query_latent.row(q);
        let mut near: Vec<(f64, usize)> = members[query_blob[q]]
            .iter()
            .map(|&i| (sq_dist(ql, item_latent.row(i)), i))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut relevant: Vec<usize> = near[..spec.relevant_per_query].iter().map(|p| p.1).collect();
        relevant.shuffle(&mut rng);
        let (held, kept) = relevant.split_at(spec.heldout_per_query);
        for &s in kept {
            train_pairs.push((q as u32, s as u32));
            covered[s] = true;
        }
        heldout.push(QueryTruth {
            query: q,
            relevant: held.iter().copied().collect::<HashSet<_>>(),
        });
    }

    let mut blob_queries: Vec<Vec<usize>> = vec![Vec::new(); spec.blobs];
    for (q, &b) in query_blob.iter().enumerate() {
        blob_queries[b].push(q);
    }
    for s in (0..spec.items).filter(|&s| !covered[s]) {
        let sl = item_latent.row(s);
        let nearest = |allowed: &dyn Fn(usize) -> bool| {
            blob_queries[item_blob[s]].iter().copied().filter(|&q| allowed(q)).min_by(|&a, &b| {
                sq_dist(sl, query_latent.row(a))
                    .total_cmp(&sq_dist(sl, query_latent.row(b)))
                    .then(a.cmp(&b))
            })
        };
        let q = match nearest(&|q| !heldout[q].relevant.contains(&s)) {
            Some(q) => q,
            None => {
                // Every query in the blob withholds this item; train on it
                // with the nearest one instead.
                let q = nearest(&|_| true).expect("every blob has a query");
                heldout[q].relevant.remove(&s);
                q
            }
        };
        train_pairs.push((q as u32, s as u32));
    }

    Ok(BlobDataset {
        item_ids: (0..spec.items).map(|i| format!("i{i}")).collect(),
        query_ids: (0..spec.queries).map(|q| format!("q{q}")).collect(),
        train_pairs,
        heldout,
        item_blob,
        query_blob,
        item_latent,
        query_latent,
    })
}
