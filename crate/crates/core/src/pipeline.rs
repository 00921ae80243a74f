//! End-to-end runs: joint training with encode-only index build, and the
//! joint-versus-offline comparison from a shared warm prefix.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::eval::{coarse_utilization, index_records, mean_distortion, precision_at_k, recall_at_k, QueryTruth};
use crate::index::{offline_layer, EmbeddingIndex, OfflineConfig, SearchParams};
use crate::numeric::labeled_rng;
use crate::trainer::{TrainConfig, TrainOutcome, Trainer};

/// Training inputs shared by every pipeline entry point.
#[derive(Clone, Debug)]
pub struct TrainingData<'a> {
    pub query_ids: &'a [String],
    pub item_ids: &'a [String],
    pub pairs: &'a [(u32, u32)],
}

#[derive(Debug)]
pub struct TrainedIndex {
    pub outcome: TrainOutcome,
    pub index: EmbeddingIndex,
    pub build_seconds: f64,
}

/// Warm phase, joint phase, then an encode-only build.
pub fn train_and_build(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainedIndex> {
    let mut trainer = Trainer::new(cfg.clone(), data.query_ids.len(), data.item_ids.len(), data.pairs.to_vec())?;
    trainer.run_warm_until(cfg.warm_steps)?;
    trainer.run_joint_until(cfg.total_steps)?;
    let outcome = trainer.into_outcome()?;
    let start = Instant::now();
    let index = EmbeddingIndex::from_model(&outcome.model, &outcome.layer, data.item_ids.to_vec())?;
    Ok(TrainedIndex {
        build_seconds: start.elapsed().as_secs_f64(),
        outcome,
        index,
    })
}

/// Plain training to `total_steps` without the indexing layer, then an
/// offline build on the frozen item embeddings. The returned layer is the
/// one the offline build learned.
pub fn train_offline_baseline(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainedIndex> {
    let trainer = Trainer::new(cfg.clone(), data.query_ids.len(), data.item_ids.len(), data.pairs.to_vec())?;
    offline_branch(trainer, data, cfg)
}

fn offline_branch(mut trainer: Trainer, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainedIndex> {
    trainer.run_warm_until(cfg.total_steps)?;
    let log = trainer.log().to_vec();
    let model = trainer.model;
    let offline_cfg = OfflineConfig {
        kmeans: cfg.kmeans,
        rotation: cfg.rotation,
        ..OfflineConfig::new(cfg.shape(), cfg.rotation_enabled)
    };
    let start = Instant::now();
    let layer = offline_layer(&model.item_table, &offline_cfg, &mut labeled_rng(cfg.seed, "offline-build"))?;
    let index = EmbeddingIndex::build(&model.item_table, &layer, data.item_ids.to_vec())?;
    Ok(TrainedIndex {
        build_seconds: start.elapsed().as_secs_f64(),
        outcome: TrainOutcome { model, layer, log },
        index,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BranchReport {
    pub precision: f64,
    pub recall: f64,
    pub build_seconds: f64,
    pub cells_used: usize,
    pub cells_total: usize,
    pub mean_distortion: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub k: usize,
    pub nprobe: usize,
    pub joint: BranchReport,
    pub offline: BranchReport,
    pub recall_delta: f64,
    pub precision_delta: f64,
}

fn branch_report(trained: &TrainedIndex, truth: &[QueryTruth], params: SearchParams) -> Result<BranchReport> {
    let TrainedIndex { outcome, index, build_seconds } = trained;
    let records = index_records(index, &outcome.model.query_table, truth, params)?;
    let (cells_used, cells_total) = coarse_utilization(index);
    Ok(BranchReport {
        precision: precision_at_k(&records, params.k)?,
        recall: recall_at_k(&records, params.k)?.value,
        build_seconds: *build_seconds,
        cells_used,
        cells_total,
        mean_distortion: mean_distortion(&outcome.layer, &outcome.model.item_table)?,
    })
}

/// Trains the shared warm prefix once, then continues along two branches
/// over the same batch sequence: joint training with the indexing layer,
/// and plain training followed by an offline index build. Both indexes
/// share `J`, `K`, `D` and are searched with the same `params`.
pub fn compare(
    data: &TrainingData,
    truth: &[QueryTruth],
    cfg: &TrainConfig,
    params: SearchParams,
) -> Result<CompareReport> {
    let mut prefix = Trainer::new(cfg.clone(), data.query_ids.len(), data.item_ids.len(), data.pairs.to_vec())?;
    prefix.run_warm_until(cfg.warm_steps)?;

    let mut joint = prefix.clone();
    joint.run_joint_until(cfg.total_steps)?;
    let outcome = joint.into_outcome()?;
    let start = Instant::now();
    let index = EmbeddingIndex::from_model(&outcome.model, &outcome.layer, data.item_ids.to_vec())?;
    let joint = TrainedIndex {
        build_seconds: start.elapsed().as_secs_f64(),
        outcome,
        index,
    };
    let joint_report = branch_report(&joint, truth, params)?;
    drop(joint);

    let offline = offline_branch(prefix, data, cfg)?;
    let offline_report = branch_report(&offline, truth, params)?;

    Ok(CompareReport {
        k: params.k,
        nprobe: params.nprobe,
        recall_delta: joint_report.recall - offline_report.recall,
        precision_delta: joint_report.precision - offline_report.precision,
        joint: joint_report,
        offline: offline_report,
    })
}
