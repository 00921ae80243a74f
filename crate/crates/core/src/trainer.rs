//! Two-tower retrieval model with ID-embedding towers, trained with an
//! in-batch hinge loss on cosine scores.
//!
//! Training runs in two phases. During the warm phase item embeddings are
//! scored raw. At the phase boundary the indexing layer is plugged in
//! (k-means warm start, or random centroids for a cold start) and every
//! later step scores the quantized item embeddings, passes gradients
//! straight through to the raw embeddings, learns centroids from the
//! distortion regularizer, and periodically updates the rotation.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{check_dim, param_err, Error, Result};
use crate::kmeans::KMeansConfig;
use crate::numeric::{cosine, dot, labeled_rng, Adagrad, Matrix, Rng};
use crate::quantizer::{cold_start_init, reg_term, warm_start_init, LayerShape, Quantized, QuantizerLayer};
use crate::rotation::{steepest_update, ResidualPair, RotationConfig, RotationStep};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    /// `J`.
    pub coarse_cells: usize,
    /// `K`.
    pub pq_centroids: usize,
    /// `D`.
    pub subspaces: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warm_steps: usize,
    pub total_steps: usize,
    /// `λ`, weight of the batch-mean distortion regularizer.
    pub reg_weight: f64,
    pub rotation_period: usize,
    pub rotation_enabled: bool,
    /// Random-normal centroids instead of k-means at the phase boundary.
    pub cold_start: bool,
    pub cold_init_std: f64,
    /// Embedding rows start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    pub kmeans: KMeansConfig,
    pub rotation: RotationConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            coarse_cells: 256,
            pq_centroids: 16,
            subspaces: 8,
            margin: 0.1,
            learning_rate: 0.01,
            batch_size: 1024,
            warm_steps: 2000,
            total_steps: 10_000,
            reg_weight: 0.1,
            rotation_period: 100,
            rotation_enabled: true,
            cold_start: false,
            cold_init_std: 1.0,
            init_range: 0.05,
            kmeans: KMeansConfig::default(),
            rotation: RotationConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn shape(&self) -> LayerShape {
        LayerShape {
            coarse_cells: self.coarse_cells,
            pq_centroids: self.pq_centroids,
            subspaces: self.subspaces,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate(self.dim)?;
        if self.warm_steps >= self.total_steps {
            return param_err(format!(
                "warm steps ({}) must be fewer than total steps ({})",
                self.warm_steps, self.total_steps
            ));
        }
        if !(self.margin > 0.0) {
            return param_err("margin must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return param_err("learning rate must be positive");
        }
        if self.batch_size < 2 {
            return param_err("batch size must be at least 2 for in-batch negatives");
        }
        if self.rotation_period == 0 {
            return param_err("rotation period must be positive");
        }
        if !(self.reg_weight >= 0.0) {
            return param_err("regularizer weight must be nonnegative");
        }
        if !(self.init_range > 0.0) {
            return param_err("embedding init range must be positive");
        }
        Ok(())
    }
}

/// Query and item embedding tables with per-element Adagrad accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoTowerModel {
    pub query_table: Matrix,
    pub item_table: Matrix,
    query_acc: Vec<f64>,
    item_acc: Vec<f64>,
}

impl TwoTowerModel {
    pub fn new(num_queries: usize, num_items: usize, dim: usize, init_range: f64, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let mut fill = |rows: usize| {
            let data: Vec<f32> = (0..rows * dim)
                .map(|_| rng.random_range(-init_range..init_range) as f32)
                .collect();
            Matrix::from_vec(rows, dim, data).expect("sized above")
        };
        let query_table = fill(num_queries);
        let item_table = fill(num_items);
        Self {
            query_acc: vec![0.0; num_queries * dim],
            item_acc: vec![0.0; num_items * dim],
            query_table,
            item_table,
        }
    }

    pub fn dim(&self) -> usize {
        self.item_table.cols()
    }

    /// `f(q, s) = cos(Q(q), S(s))`.
    pub fn score(&self, query: usize, item: usize) -> Result<f64> {
        score(self.query_table.row(query), self.item_table.row(item))
    }
}

/// Cosine scoring between tower outputs.
pub fn score(query_emb: &[f32], item_emb: &[f32]) -> Result<f64> {
    cosine(query_emb, item_emb)
}

/// Mean over ordered pairs `(i, j ≠ i)` of `max(0, margin − s_ii + s_ij)`
/// for a row-major `B x B` score matrix whose diagonal holds positives.
/// Returns the loss and its gradient w.r.t. every score.
pub fn hinge_loss_inbatch(scores: &[f64], batch: usize, margin: f64) -> Result<(f64, Vec<f64>)> {
    if batch < 2 {
        return param_err("in-batch hinge loss needs at least two pairs");
    }
    check_dim(batch * batch, scores.len())?;
    let n = (batch * (batch - 1)) as f64;
    let unit = 1.0 / n;
    let mut loss = 0.0;
    let mut grad = vec![0.0; batch * batch];
    for i in 0..batch {
        let pos = scores[i * batch + i];
        for j in 0..batch {
            if j == i {
                continue;
            }
            let t = margin - pos + scores[i * batch + j];
            if t > 0.0 {
                loss += t;
                grad[i * batch + j] += unit;
                grad[i * batch + i] -= unit;
            }
        }
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warm,
    Joint,
}

/// Positive `(query, item)` ordinal pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingBatch {
    pub pairs: Vec<(u32, u32)>,
}

/// The indexing layer plus Adagrad accumulators for its centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableLayer {
    pub layer: QuantizerLayer,
    coarse_acc: Vec<f64>,
    pq_acc: Vec<f64>,
}

impl TrainableLayer {
    pub fn new(layer: QuantizerLayer) -> Self {
        let coarse_acc = vec![0.0; layer.coarse.centroids.as_slice().len()];
        let pq_acc = vec![0.0; layer.pq.to_flat().len()];
        Self {
            layer,
            coarse_acc,
            pq_acc,
        }
    }
}

/// Gradients of one batch before they are applied.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub hinge_loss: f64,
    /// Batch mean of `‖T(s) − s‖²` (zero in the warm phase).
    pub mean_distortion: f64,
    /// Item embedding fed to the scorer for each batch slot.
    pub emitted: Vec<Vec<f32>>,
    /// `∂L/∂emitted` per slot.
    pub grad_emitted: Vec<Vec<f64>>,
    /// `∂L/∂(raw item row)` per slot.
    pub grad_items: Vec<Vec<f64>>,
    pub grad_queries: Vec<Vec<f64>>,
    /// Per-slot quantization (joint phase only).
    pub quantized: Vec<Quantized>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub phase: Phase,
    pub hinge_loss: f64,
    /// `λ · mean distortion`, the regularizer's share of the total loss.
    pub reg_loss: f64,
    pub mean_distortion: f64,
    /// Distinct coarse cells hit by this batch.
    pub coarse_utilization: usize,
    #[serde(skip)]
    pub rotation: Option<RotationStep>,
}

impl StepMetrics {
    pub fn total_loss(&self) -> f64 {
        self.hinge_loss + self.reg_loss
    }
}

/// Owns every piece of mutable training state, so a run can be cloned at
/// any step and continued along two branches.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    pub model: TwoTowerModel,
    pub layer: Option<TrainableLayer>,
    pairs: Vec<(u32, u32)>,
    order: Vec<usize>,
    cursor: usize,
    batch_rng: Rng,
    rotation_rng: Rng,
    layer_rng: Rng,
    step: usize,
    log: Vec<StepMetrics>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, num_queries: usize, num_items: usize, pairs: Vec<(u32, u32)>) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::Ingestion("no training pairs".into()));
        }
        if let Some(&(q, s)) = pairs
            .iter()
            .find(|&&(q, s)| q as usize >= num_queries || s as usize >= num_items)
        {
            return Err(Error::Ingestion(format!(
                "pair ({q}, {s}) outside vocabularies of {num_queries} queries and {num_items} items"
            )));
        }
        let model = TwoTowerModel::new(
            num_queries,
            num_items,
            cfg.dim,
            cfg.init_range,
            &mut labeled_rng(cfg.seed, "embedding-init"),
        );
        let order = (0..pairs.len()).collect();
        Ok(Self {
            batch_rng: labeled_rng(cfg.seed, "batches"),
            rotation_rng: labeled_rng(cfg.seed, "rotation"),
            layer_rng: labeled_rng(cfg.seed, "layer-init"),
            cursor: usize::MAX,
            step: 0,
            log: Vec::new(),
            layer: None,
            cfg,
            model,
            pairs,
            order,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[StepMetrics] {
        &self.log
    }

    /// Next batch from a reshuffled-per-epoch pass over the pairs.
    pub fn next_batch(&mut self) -> TrainingBatch {
        let mut pairs = Vec::with_capacity(self.cfg.batch_size);
        while pairs.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.batch_rng);
                self.cursor = 0;
            }
            pairs.push(self.pairs[self.order[self.cursor]]);
            self.cursor += 1;
        }
        TrainingBatch { pairs }
    }

    /// Initializes the indexing layer from the current item embeddings.
    pub fn plug_in_layer(&mut self) -> Result<()> {
        let cfg = &self.cfg;
        let layer = if cfg.cold_start {
            cold_start_init(
                cfg.dim,
                cfg.shape(),
                cfg.cold_init_std,
                cfg.reg_weight,
                cfg.rotation_enabled,
                &mut self.layer_rng,
            )?
        } else {
            warm_start_init(
                &self.model.item_table,
                cfg.shape(),
                &cfg.kmeans,
                cfg.reg_weight,
                cfg.rotation_enabled,
                &mut self.layer_rng,
            )?
        };
        self.layer = Some(TrainableLayer::new(layer));
        Ok(())
    }

    /// Forward and backward pass without touching any parameter.
    pub fn batch_gradients(&self, batch: &TrainingBatch, phase: Phase) -> Result<BatchGradients> {
        let b = batch.pairs.len();
        if b < 2 {
            return param_err("batch needs at least two pairs");
        }
        let layer = match phase {
            Phase::Warm => None,
            Phase::Joint => Some(
                &self
                    .layer
                    .as_ref()
                    .ok_or_else(|| Error::State("joint step without an indexing layer".into()))?
                    .layer,
            ),
        };

        let mut quantized = Vec::new();
        let mut emitted: Vec<Vec<f32>> = Vec::with_capacity(b);
        for &(_, s) in &batch.pairs {
            let raw = self.model.item_table.row(s as usize);
            match layer {
                None => emitted.push(raw.to_vec()),
                Some(l) => {
                    let q = l.full_quantize(raw)?;
                    emitted.push(q.quantized.clone());
                    quantized.push(q);
                }
            }
        }
        let queries: Vec<&[f32]> = batch
            .pairs
            .iter()
            .map(|&(q, _)| self.model.query_table.row(q as usize))
            .collect();

        let q_norm = norms(queries.iter().copied(), "query")?;
        let e_norm = norms(emitted.iter().map(Vec::as_slice), "item")?;
        let mut scores = vec![0.0f64; b * b];
        for i in 0..b {
            for j in 0..b {
                scores[i * b + j] = dot(queries[i], &emitted[j]) / (q_norm[i] * e_norm[j]);
            }
        }
        let (hinge_loss, g) = hinge_loss_inbatch(&scores, b, self.cfg.margin)?;
        if !hinge_loss.is_finite() {
            return Err(Error::State(format!("non-finite hinge loss at step {}", self.step)));
        }

        let d = self.cfg.dim;
        let mut grad_queries = vec![vec![0.0f64; d]; b];
        let mut grad_emitted = vec![vec![0.0f64; d]; b];
        // ∂cos/∂q = e/(|q||e|) − cos·q/|q|², and symmetrically for e.
        let mut q_self = vec![0.0f64; b];
        let mut e_self = vec![0.0f64; b];
        for i in 0..b {
            for j in 0..b {
                let gij = g[i * b + j];
                if gij == 0.0 {
                    continue;
                }
                let sij = scores[i * b + j];
                q_self[i] += gij * sij;
                e_self[j] += gij * sij;
                let to_q = gij / (q_norm[i] * e_norm[j]);
                for (acc, &v) in grad_queries[i].iter_mut().zip(&emitted[j]) {
                    *acc += to_q * v as f64;
                }
                for (acc, &v) in grad_emitted[j].iter_mut().zip(queries[i]) {
                    *acc += to_q * v as f64;
                }
            }
        }
        for i in 0..b {
            let c = q_self[i] / (q_norm[i] * q_norm[i]);
            for (acc, &v) in grad_queries[i].iter_mut().zip(queries[i]) {
                *acc -= c * v as f64;
            }
            let c = e_self[i] / (e_norm[i] * e_norm[i]);
            for (acc, &v) in grad_emitted[i].iter_mut().zip(&emitted[i]) {
                *acc -= c * v as f64;
            }
        }

        // Straight-through: the raw embedding receives the gradient of the
        // emitted one unchanged.
        let grad_items = grad_emitted.clone();
        let mean_distortion = if quantized.is_empty() {
            0.0
        } else {
            quantized.iter().map(Quantized::sq_error).sum::<f64>() / b as f64
        };
        Ok(BatchGradients {
            hinge_loss,
            mean_distortion,
            emitted,
            grad_emitted,
            grad_items,
            grad_queries,
            quantized,
        })
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &TrainingBatch, phase: Phase) -> Result<StepMetrics> {
        let grads = self.batch_gradients(batch, phase)?;
        let opt = Adagrad::new(self.cfg.learning_rate);
        let d = self.cfg.dim;

        let query_rows: Vec<u32> = batch.pairs.iter().map(|p| p.0).collect();
        let item_rows: Vec<u32> = batch.pairs.iter().map(|p| p.1).collect();
        for (row, g) in merge_rows(&query_rows, &grads.grad_queries) {
            let r = row as usize;
            opt.apply(
                self.model.query_table.row_mut(r),
                &mut self.model.query_acc[r * d..(r + 1) * d],
                &g,
            );
        }
        for (row, g) in merge_rows(&item_rows, &grads.grad_items) {
            let r = row as usize;
            opt.apply(
                self.model.item_table.row_mut(r),
                &mut self.model.item_acc[r * d..(r + 1) * d],
                &g,
            );
        }

        let mut coarse_utilization = 0;
        let mut rotation = None;
        if phase == Phase::Joint {
            let layer_state = self.layer.as_mut().expect("checked in batch_gradients");
            let layer = &mut layer_state.layer;
            let b = grads.quantized.len();
            let scale = layer.reg_weight / b as f64;
            let mut coarse_buf = vec![0.0f64; layer_state.coarse_acc.len()];
            let mut pq_buf = vec![0.0f64; layer_state.pq_acc.len()];
            let mut cells: Vec<u32> = Vec::with_capacity(b);
            for q in &grads.quantized {
                let reg = reg_term(q);
                layer.route_reg_grad(&reg.code, &reg.grad, scale, &mut coarse_buf, &mut pq_buf);
                cells.push(q.code.coarse);
            }
            cells.sort_unstable();
            cells.dedup();
            coarse_utilization = cells.len();

            opt.apply(layer.coarse.centroids.as_mut_slice(), &mut layer_state.coarse_acc, &coarse_buf);
            let (k, w) = (layer.pq.num_centroids(), layer.pq.sub_dim());
            for j in 0..layer.pq.num_subspaces() {
                let span = j * k * w..(j + 1) * k * w;
                opt.apply(
                    layer.pq.sub_codebook_mut(j).as_mut_slice(),
                    &mut layer_state.pq_acc[span.clone()],
                    &pq_buf[span],
                );
            }

            if layer.rotation_enabled && (self.step + 1).is_multiple_of(self.cfg.rotation_period) {
                let residuals: Vec<ResidualPair> = grads.quantized.iter().map(Quantized::residual_pair).collect();
                rotation = Some(steepest_update(
                    &mut layer.rotation,
                    &residuals,
                    &self.cfg.rotation,
                    &mut self.rotation_rng,
                )?);
            }
        }

        let metrics = StepMetrics {
            step: self.step,
            phase,
            hinge_loss: grads.hinge_loss,
            reg_loss: self.cfg.reg_weight * grads.mean_distortion,
            mean_distortion: grads.mean_distortion,
            coarse_utilization,
            rotation,
        };
        self.step += 1;
        self.log.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs warm-phase steps (no indexing layer) until `until` steps have
    /// been taken in total.
    pub fn run_warm_until(&mut self, until: usize) -> Result<()> {
        while self.step < until {
            let batch = self.next_batch();
            self.train_step(&batch, Phase::Warm)?;
        }
        Ok(())
    }

    /// Plugs the layer in if needed and runs joint steps until `until`.
    pub fn run_joint_until(&mut self, until: usize) -> Result<()> {
        if self.layer.is_none() {
            self.plug_in_layer()?;
        }
        while self.step < until {
            let batch = self.next_batch();
            self.train_step(&batch, Phase::Joint)?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> Result<TrainOutcome> {
        let layer = self
            .layer
            .ok_or_else(|| Error::State("training finished without an indexing layer".into()))?
            .layer;
        Ok(TrainOutcome {
            model: self.model,
            layer,
            log: self.log,
        })
    }
}

fn norms<'a>(rows: impl Iterator<Item = &'a [f32]>, what: &str) -> Result<Vec<f64>> {
    rows.map(|r| {
        let n = dot(r, r).sqrt();
        if n > 0.0 && n.is_finite() {
            Ok(n)
        } else {
            Err(Error::DegenerateInput(format!("{what} embedding has norm {n}")))
        }
    })
    .collect()
}

/// Sums per-slot gradients that hit the same row; rows come out sorted.
fn merge_rows(rows: &[u32], grads: &[Vec<f64>]) -> Vec<(u32, Vec<f64>)> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by_key(|&i| (rows[i], i));
    let mut out: Vec<(u32, Vec<f64>)> = Vec::new();
    for i in idx {
        match out.last_mut() {
            Some((r, acc)) if *r == rows[i] => {
                for (a, g) in acc.iter_mut().zip(&grads[i]) {
                    *a += g;
                }
            }
            _ => out.push((rows[i], grads[i].clone())),
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TwoTowerModel,
    pub layer: QuantizerLayer,
    pub log: Vec<StepMetrics>,
}

/// Warm phase, layer initialization, then joint phase to `total_steps`.
pub fn run_training(
    num_queries: usize,
    num_items: usize,
    pairs: Vec<(u32, u32)>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), num_queries, num_items, pairs)?;
    trainer.run_warm_until(cfg.warm_steps)?;
    trainer.run_joint_until(cfg.total_steps)?;
    trainer.into_outcome()
}
