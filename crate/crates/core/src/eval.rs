//! Retrieval and quantization quality metrics.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{check_dim, param_err, Result};
use crate::index::{EmbeddingIndex, SearchParams};
use crate::numeric::{dot, Matrix};
use crate::quantizer::QuantizerLayer;

/// One query's ground truth and ranked retrieval (item ordinals).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalRecord {
    pub query: usize,
    pub relevant: HashSet<usize>,
    pub retrieved: Vec<usize>,
}

impl EvalRecord {
    fn hits_at(&self, k: usize) -> usize {
        self.retrieved.iter().take(k).filter(|i| self.relevant.contains(i)).count()
    }
}

/// Mean of `|top_k ∩ relevant| / k`; empty relevant sets contribute 0.
pub fn precision_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    if k == 0 {
        return param_err("k must be at least 1");
    }
    if records.is_empty() {
        return param_err("no evaluation records");
    }
    let total: f64 = records.iter().map(|r| r.hits_at(k) as f64 / k as f64).sum();
    Ok(total / records.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Recall {
    pub value: f64,
    /// Records left out because their relevant set is empty.
    pub skipped: usize,
}

/// Mean of `|top_k ∩ relevant| / |relevant|` over records with a nonempty
/// relevant set.
pub fn recall_at_k(records: &[EvalRecord], k: usize) -> Result<Recall> {
    if k == 0 {
        return param_err("k must be at least 1");
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for r in records.iter().filter(|r| !r.relevant.is_empty()) {
        sum += r.hits_at(k) as f64 / r.relevant.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return param_err("no evaluation record has a relevant item");
    }
    Ok(Recall {
        value: sum / counted as f64,
        skipped: records.len() - counted,
    })
}

/// Mean of `‖T(x) − x‖²` over the rows of `embeddings`.
pub fn mean_distortion(layer: &QuantizerLayer, embeddings: &Matrix) -> Result<f64> {
    if embeddings.rows() == 0 {
        return param_err("no embeddings");
    }
    check_dim(layer.dim(), embeddings.cols())?;
    let mut total = 0.0;
    for x in embeddings.iter_rows() {
        total += layer.full_quantize(x)?.sq_error();
    }
    Ok(total / embeddings.rows() as f64)
}

/// `(nonempty inverted lists, J)`.
pub fn coarse_utilization(index: &EmbeddingIndex) -> (usize, usize) {
    let lists = index.inverted_lists();
    (lists.iter().filter(|l| !l.is_empty()).count(), lists.len())
}

/// Ground truth for one query: its ordinal and relevant item ordinals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTruth {
    pub query: usize,
    pub relevant: HashSet<usize>,
}

/// Searches the index with each query's embedding row.
pub fn index_records(
    index: &EmbeddingIndex,
    query_table: &Matrix,
    truth: &[QueryTruth],
    params: SearchParams,
) -> Result<Vec<EvalRecord>> {
    truth
        .iter()
        .map(|t| {
            let hits = index.search(query_table.row(t.query), params)?;
            Ok(EvalRecord {
                query: t.query,
                relevant: t.relevant.clone(),
                retrieved: hits.into_iter().map(|h| h.ordinal).collect(),
            })
        })
        .collect()
}

/// Exact top-k item ordinals by cosine, ties to the lower ordinal.
pub fn exact_top_k(items: &Matrix, query: &[f32], k: usize) -> Result<Vec<usize>> {
    check_dim(items.cols(), query.len())?;
    let mut scored: Vec<(f64, usize)> = items
        .iter_rows()
        .enumerate()
        .map(|(i, s)| {
            let n = dot(s, s).sqrt();
            let score = if n > 0.0 { dot(query, s) / n } else { f64::NEG_INFINITY };
            (score, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|p| p.1).collect())
}

/// Precision and recall at one `(k, nprobe)` grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricPoint {
    pub k: usize,
    pub nprobe: usize,
    pub precision: f64,
    pub recall: f64,
    pub skipped: usize,
}

/// p@k and r@k for every `k` and `nprobe`; one search per query and
/// `nprobe`, at the largest `k`.
pub fn metric_grid(
    index: &EmbeddingIndex,
    query_table: &Matrix,
    truth: &[QueryTruth],
    ks: &[usize],
    nprobes: &[usize],
) -> Result<Vec<MetricPoint>> {
    let Some(&k_max) = ks.iter().max() else {
        return param_err("no k values");
    };
    let mut out = Vec::with_capacity(ks.len() * nprobes.len());
    for &nprobe in nprobes {
        let records = index_records(index, query_table, truth, SearchParams { k: k_max, nprobe })?;
        for &k in ks {
            let recall = recall_at_k(&records, k)?;
            out.push(MetricPoint {
                k,
                nprobe,
                precision: precision_at_k(&records, k)?,
                recall: recall.value,
                skipped: recall.skipped,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::seeded_rng;
    use crate::quantizer::{CoarseCodebook, PQCodebook};
    use crate::rotation::{GivensFactor, RotationMatrix};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn rec(relevant: &[usize], retrieved: &[usize]) -> EvalRecord {
        EvalRecord {
            query: 0,
            relevant: relevant.iter().copied().collect(),
            retrieved: retrieved.to_vec(),
        }
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[rec(&[7], &[7, 1, 2])], 1).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[rec(&[], &[7, 1, 2])], 2).unwrap(), 0.0);
        assert!(precision_at_k(&[], 1).is_err());
        assert!(precision_at_k(&[rec(&[1], &[1])], 0).is_err());
    }

    #[test]
    fn hand_computed_means() {
        // k = 2: hits 1, 2, 0; precision (1/2 + 2/2 + 0)/3 = 0.5;
        // recall (1/1 + 2/3 + 0/2)/3 = 5/9.
        let records = [rec(&[4], &[4, 5, 6]), rec(&[1, 2, 3], &[2, 1, 3]), rec(&[8, 9], &[0, 1, 8])];
        assert!((precision_at_k(&records, 2).unwrap() - 0.5).abs() < 1e-12);
        assert!((recall_at_k(&records, 2).unwrap().value - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[rec(&[1, 2], &[2, 1])], 2).unwrap().value, 1.0);
        assert_eq!(recall_at_k(&[rec(&[9], &[1, 2, 3])], 3).unwrap().value, 0.0);
        let r = recall_at_k(&[rec(&[], &[1]), rec(&[1], &[1])], 1).unwrap();
        assert_eq!(r, Recall { value: 1.0, skipped: 1 });
        assert!(recall_at_k(&[rec(&[], &[1])], 1).is_err());
    }

    #[test]
    fn exhaustive_retrieval_has_full_recall() {
        let mut rng = seeded_rng(1);
        let items = Matrix::from_vec(30, 4, (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let top = exact_top_k(&items, &[1.0, 0.0, 0.0, 0.0], 30).unwrap();
        let r = rec(&[0, 5, 17, 29], &top);
        assert_eq!(recall_at_k(&[r], 30).unwrap().value, 1.0);
    }

    fn layer(rotation: RotationMatrix) -> QuantizerLayer {
        QuantizerLayer::new(
            rotation,
            CoarseCodebook::new(Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap())
                .unwrap(),
            PQCodebook::new(vec![
                Matrix::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.5]]).unwrap(),
                Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            ])
            .unwrap(),
            0.0,
            true,
        )
        .unwrap()
    }

    #[test]
    fn representable_embeddings_have_zero_distortion() {
        let l = layer(RotationMatrix::identity(4));
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 1.0], vec![0.5, 1.5, 0.0, 0.0]]).unwrap();
        assert_eq!(mean_distortion(&l, &x).unwrap(), 0.0);
        assert!(mean_distortion(&l, &Matrix::zeros(0, 4)).is_err());
    }

    #[test]
    fn distortion_equals_rotated_space_residuals() {
        let mut rot = RotationMatrix::identity(4);
        rot.push_factor(GivensFactor::new(0, 2, 0.4, 4).unwrap());
        rot.push_factor(GivensFactor::new(1, 3, -0.9, 4).unwrap());
        let l = layer(rot.clone());
        let mut rng = seeded_rng(2);
        let x = Matrix::from_vec(50, 4, (0..200).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mut direct = 0.0;
        for row in x.iter_rows() {
            let q = l.full_quantize(row).unwrap();
            let back: f64 = q.quantized.iter().zip(row).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            direct += back;
        }
        direct /= 50.0;
        let via_layer = mean_distortion(&l, &x).unwrap();
        assert!((direct - via_layer).abs() < 1e-5);

        let rebuilt = RotationMatrix::from_factors(4, rot.factors()).unwrap();
        let l2 = layer(rebuilt);
        assert!((mean_distortion(&l2, &x).unwrap() - via_layer).abs() < 1e-9);
    }

    fn grid_truth() -> Vec<QueryTruth> {
        vec![QueryTruth {
            query: 0,
            relevant: [0usize].into_iter().collect(),
        }]
    }

    #[test]
    fn utilization_counts_nonempty_lists() {
        let l = layer(RotationMatrix::identity(4));
        let all_in_zero = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        let idx = EmbeddingIndex::build(&all_in_zero, &l, ids.clone()).unwrap();
        assert_eq!(coarse_utilization(&idx), (1, 2));
        let spread = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]]).unwrap();
        let idx = EmbeddingIndex::build(&spread, &l, ids).unwrap();
        assert_eq!(coarse_utilization(&idx), (2, 2));

        let queries = Matrix::from_rows(&[vec![1.0f32, 0.0, 0.0, 0.0]]).unwrap();
        let grid = metric_grid(&idx, &queries, &grid_truth(), &[1, 2], &[1, 2]).unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid[0].recall, 1.0);
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_monotone(
            relevant in proptest::collection::hash_set(0usize..20, 1..6),
            perm in Just((0usize..20).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let records = [EvalRecord { query: 0, relevant, retrieved: perm }];
            let mut prev_r = 0.0;
            let mut prev_hits = 0.0;
            for k in 1..=20 {
                let p = precision_at_k(&records, k).unwrap();
                let r = recall_at_k(&records, k).unwrap().value;
                prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
                prop_assert!(r >= prev_r);
                prop_assert!(p * k as f64 >= prev_hits - 1e-9);
                prev_r = r;
                prev_hits = p * k as f64;
            }
        }

        #[test]
        fn single_relevant_recall_is_hit_rate(target in 0usize..10, k in 1usize..10) {
            let retrieved: Vec<usize> = (0..10).collect();
            let r = recall_at_k(&[rec(&[target], &retrieved)], k).unwrap().value;
            prop_assert_eq!(r, if target < k { 1.0 } else { 0.0 });
        }
    }
}
