//! Run configuration: defaults, then a `key=value` file, then flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args;
use jpq_core::TrainConfig;

/// Training and layer options shared by `train`, `build-index` and
/// `compare`. Every flag can also be set in the config file under its
/// long name, e.g. `warm-steps = 400`.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Flat `key = value` file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Total training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Steps trained before the indexing layer is plugged in; defaults to
    /// a fifth of the total.
    #[arg(long)]
    pub warm_steps: Option<usize>,
    /// Coarse cells.
    #[arg(long = "J")]
    pub coarse_cells: Option<usize>,
    /// Centroids per PQ subspace.
    #[arg(long = "K")]
    pub pq_centroids: Option<usize>,
    /// PQ subspaces.
    #[arg(long = "D")]
    pub subspaces: Option<usize>,
    /// Cells probed per search.
    #[arg(long)]
    pub nprobe: Option<usize>,
    /// Hinge margin.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Adagrad learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Pairs per batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Weight of the quantization distortion regularizer.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Steps between centroid and rotation updates.
    #[arg(long)]
    pub rotation_period: Option<usize>,
    /// Keep the rotation fixed at the identity.
    #[arg(long)]
    pub no_rotation: bool,
    /// Random-normal centroids instead of k-means at the phase boundary.
    #[arg(long)]
    pub cold_start: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub nprobe: usize,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("bad value {value:?} for {key}: {e}"))
}

#[derive(Default)]
struct Layered {
    args: RunArgs,
    rotation: Option<bool>,
    cold_start: Option<bool>,
    data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    index: Option<PathBuf>,
    log: Option<PathBuf>,
}

impl Layered {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.args;
        match key {
            "dim" => a.dim = Some(parse(key, value)?),
            "steps" => a.steps = Some(parse(key, value)?),
            "warm-steps" => a.warm_steps = Some(parse(key, value)?),
            "J" => a.coarse_cells = Some(parse(key, value)?),
            "K" => a.pq_centroids = Some(parse(key, value)?),
            "D" => a.subspaces = Some(parse(key, value)?),
            "nprobe" => a.nprobe = Some(parse(key, value)?),
            "margin" => a.margin = Some(parse(key, value)?),
            "lr" => a.lr = Some(parse(key, value)?),
            "batch" => a.batch = Some(parse(key, value)?),
            "lambda" => a.lambda = Some(parse(key, value)?),
            "rotation-period" => a.rotation_period = Some(parse(key, value)?),
            "seed" => a.seed = Some(parse(key, value)?),
            "rotation" => self.rotation = Some(parse(key, value)?),
            "cold-start" => self.cold_start = Some(parse(key, value)?),
            "data" => self.data = Some(value.into()),
            "eval-data" => self.eval_data = Some(value.into()),
            "index" => self.index = Some(value.into()),
            "log" => self.log = Some(value.into()),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Lets every flag present on the command line replace the file value.
    fn overlay(&mut self, flags: &RunArgs) {
        macro_rules! take {
            ($($f:ident),*) => {$(if flags.$f.is_some() { self.args.$f = flags.$f; })*};
        }
        take!(dim, steps, warm_steps, coarse_cells, pq_centroids, subspaces, nprobe, margin, lr, batch, lambda, rotation_period, seed);
        if flags.no_rotation {
            self.rotation = Some(false);
        }
        if flags.cold_start {
            self.cold_start = Some(true);
        }
    }
}

pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key = value", n + 1);
        };
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

/// Paths given directly to a command, which beat the config file.
#[derive(Clone, Debug, Default)]
pub struct PathFlags {
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(flags: &RunArgs, paths: &PathFlags) -> Result<Self> {
        let mut layered = Layered::default();
        if let Some(path) = &flags.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_config_text(&text)? {
                layered.set(&k, &v).with_context(|| format!("in config {}", path.display()))?;
            }
        }
        layered.overlay(flags);
        for (slot, flag) in [
            (&mut layered.data, &paths.data),
            (&mut layered.eval_data, &paths.eval_data),
            (&mut layered.index, &paths.index),
            (&mut layered.log, &paths.log),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }

        let a = &layered.args;
        let d = TrainConfig::default();
        let total_steps = a.steps.unwrap_or(d.total_steps);
        let train = TrainConfig {
            dim: a.dim.unwrap_or(d.dim),
            coarse_cells: a.coarse_cells.unwrap_or(d.coarse_cells),
            pq_centroids: a.pq_centroids.unwrap_or(d.pq_centroids),
            subspaces: a.subspaces.unwrap_or(d.subspaces),
            margin: a.margin.unwrap_or(d.margin),
            learning_rate: a.lr.unwrap_or(d.learning_rate),
            batch_size: a.batch.unwrap_or(d.batch_size),
            warm_steps: a.warm_steps.unwrap_or(total_steps / 5),
            total_steps,
            reg_weight: a.lambda.unwrap_or(d.reg_weight),
            rotation_period: a.rotation_period.unwrap_or(d.rotation_period),
            rotation_enabled: layered.rotation.unwrap_or(true),
            cold_start: layered.cold_start.unwrap_or(false),
            seed: a.seed.unwrap_or(d.seed),
            ..d
        };
        train.validate()?;
        let nprobe = a.nprobe.unwrap_or(train.coarse_cells.min(16));
        if nprobe == 0 {
            bail!("nprobe must be positive");
        }
        for p in [&layered.data, &layered.eval_data, &layered.index, &layered.log].into_iter().flatten() {
            if p.as_os_str().is_empty() {
                bail!("empty path");
            }
        }
        Ok(Self {
            train,
            nprobe,
            data: layered.data,
            eval_data: layered.eval_data,
            index: layered.index,
            log: layered.log,
        })
    }

    pub fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        path.as_deref()
            .with_context(|| format!("missing --{what} (flag or config key)"))
    }
}
