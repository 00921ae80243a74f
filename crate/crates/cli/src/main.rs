mod config;
mod queries;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use jpq_core::data::{ingest, ingest_eval, Dataset, EvalSet, Vocab};
use jpq_core::eval::{coarse_utilization, metric_grid};
use jpq_core::pipeline::{compare, train_and_build, train_offline_baseline, TrainedIndex, TrainingData};
use jpq_core::synth::{blob_dataset, BlobSpec};
use jpq_core::{EmbeddingIndex, SearchParams};

use config::{PathFlags, RunArgs, RunConfig};
use queries::{sidecar_path, QueryTable};

#[derive(Parser)]
#[command(name = "jpq", version, about = "Embedding index trained jointly with a two-tower retrieval model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic blob dataset as train.tsv and eval.tsv.
    Synth(SynthArgs),
    /// Train jointly with the indexing layer and write the index.
    Train(TrainArgs),
    /// Train without the layer, then build the index offline (baseline).
    BuildIndex(TrainArgs),
    /// Print the top-k items for a query.
    Search(SearchArgs),
    /// p@k and r@k of an index over a grid of k and nprobe.
    Evaluate(EvaluateArgs),
    /// Joint training against the offline baseline from a shared warm start.
    Compare(CompareArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = BlobSpec::default().blobs)]
    blobs: usize,
    #[arg(long, default_value_t = BlobSpec::default().items)]
    items: usize,
    #[arg(long, default_value_t = BlobSpec::default().queries)]
    queries: usize,
    #[arg(long, default_value_t = BlobSpec::default().latent_dim)]
    latent_dim: usize,
    /// Within-blob standard deviation.
    #[arg(long, default_value_t = BlobSpec::default().spread)]
    spread: f64,
    /// Relevant items per query.
    #[arg(long, default_value_t = BlobSpec::default().relevant_per_query)]
    relevant: usize,
    /// Relevant items per query moved to eval.tsv.
    #[arg(long, default_value_t = BlobSpec::default().heldout_per_query)]
    heldout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Training pairs, `query_id TAB item_id` per line.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index output; query embeddings go to `<index>.queries`.
    #[arg(long)]
    index: Option<PathBuf>,
    /// JSON-lines training log; defaults to `<index>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query id from the training data.
    #[arg(long, group = "source", required = true)]
    query: Option<String>,
    /// Item id; searches with the item's indexed reconstruction.
    #[arg(long, group = "source")]
    item: Option<String>,
    /// Raw query vector, comma separated.
    #[arg(long, group = "source", allow_hyphen_values = true)]
    vector: Option<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Defaults to min(J, 16).
    #[arg(long)]
    nprobe: Option<usize>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    index: PathBuf,
    /// Held-out pairs, same format as the training data.
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,100")]
    k: Vec<usize>,
    /// Defaults to 1, 4, 16 and J, capped at J.
    #[arg(long, value_delimiter = ',')]
    nprobe: Vec<usize>,
    /// One JSON object per grid point instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Print the report as one JSON object.
    #[arg(long)]
    json: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a, false),
        Command::BuildIndex(a) => train(&a, true),
        Command::Search(a) => search(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Compare(a) => compare_cmd(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let ds = blob_dataset(&BlobSpec {
        blobs: a.blobs,
        items: a.items,
        queries: a.queries,
        latent_dim: a.latent_dim,
        spread: a.spread,
        relevant_per_query: a.relevant,
        heldout_per_query: a.heldout,
        seed: a.seed,
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let train = a.out.join("train.tsv");
    let eval = a.out.join("eval.tsv");
    fs::write(&train, ds.train_tsv()).with_context(|| format!("writing {}", train.display()))?;
    fs::write(&eval, ds.heldout_tsv()).with_context(|| format!("writing {}", eval.display()))?;
    info!(
        "wrote {} training pairs to {} and held-out pairs for {} queries to {}",
        ds.train_pairs.len(),
        train.display(),
        ds.heldout.len(),
        eval.display()
    );
    Ok(())
}

fn load_training(path: &Path) -> Result<Dataset> {
    let ds = ingest(path)?;
    if ds.malformed > 0 {
        warn!("{}: skipped {} malformed lines", path.display(), ds.malformed);
    }
    info!(
        "{}: {} pairs, {} queries, {} items",
        path.display(),
        ds.pairs.len(),
        ds.queries.len(),
        ds.items.len()
    );
    Ok(ds)
}

fn load_eval(path: &Path, queries: &Vocab, items: &Vocab) -> Result<EvalSet> {
    let ev = ingest_eval(path, queries, items)?;
    if ev.malformed > 0 || ev.unknown > 0 {
        warn!(
            "{}: skipped {} malformed lines and {} pairs with unknown ids",
            path.display(),
            ev.malformed,
            ev.unknown
        );
    }
    Ok(ev)
}

fn default_log_path(index: &Path) -> PathBuf {
    let mut s = index.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn write_log(path: &Path, trained: &TrainedIndex) -> Result<()> {
    let mut out = String::new();
    for m in &trained.outcome.log {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Writes the index and checks that the file loads back with the same
/// header.
fn write_index(path: &Path, index: &EmbeddingIndex) -> Result<()> {
    index.save(path).with_context(|| format!("writing {}", path.display()))?;
    let back = EmbeddingIndex::load(path).with_context(|| format!("re-loading {}", path.display()))?;
    if back.dim() != index.dim() || back.shape() != index.shape() || back.len() != index.len() {
        bail!("{} does not match the index that was written", path.display());
    }
    Ok(())
}

fn train(a: &TrainArgs, offline: bool) -> Result<()> {
    let paths = PathFlags {
        data: a.data.clone(),
        index: a.index.clone(),
        log: a.log.clone(),
        ..PathFlags::default()
    };
    let cfg = RunConfig::resolve(&a.run, &paths)?;
    let index_path = RunConfig::require(&cfg.index, "index")?;
    let ds = load_training(RunConfig::require(&cfg.data, "data")?)?;
    let data = TrainingData {
        query_ids: ds.queries.ids(),
        item_ids: ds.items.ids(),
        pairs: &ds.pairs,
    };
    let trained = if offline {
        train_offline_baseline(&data, &cfg.train)?
    } else {
        train_and_build(&data, &cfg.train)?
    };

    write_index(index_path, &trained.index)?;
    QueryTable::save(&sidecar_path(index_path), ds.queries.ids(), &trained.outcome.model.query_table)?;
    let log_path = cfg.log.clone().unwrap_or_else(|| default_log_path(index_path));
    write_log(&log_path, &trained)?;

    let (used, total) = coarse_utilization(&trained.index);
    if let Some(last) = trained.outcome.log.last() {
        info!(
            "step {}: hinge {:.4}, regularizer {:.4}",
            last.step + 1,
            last.hinge_loss,
            last.reg_loss
        );
    }
    info!(
        "{} build of {} items in {:.3}s; {used}/{total} coarse cells used; wrote {}",
        if offline { "offline" } else { "encode-only" },
        trained.index.len(),
        trained.build_seconds,
        index_path.display()
    );
    Ok(())
}

fn load_index_and_queries(path: &Path) -> Result<(EmbeddingIndex, QueryTable)> {
    let index = EmbeddingIndex::load(path).with_context(|| format!("loading {}", path.display()))?;
    let queries = QueryTable::load(&sidecar_path(path), index.dim())?;
    Ok((index, queries))
}

fn search(a: &SearchArgs) -> Result<()> {
    let index = EmbeddingIndex::load(&a.index).with_context(|| format!("loading {}", a.index.display()))?;
    let query: Vec<f32> = if let Some(id) = &a.query {
        let table = QueryTable::load(&sidecar_path(&a.index), index.dim())?;
        let ordinal = table.vocab.ordinal(id).with_context(|| format!("unknown query id {id:?}"))?;
        table.embeddings.row(ordinal as usize).to_vec()
    } else if let Some(id) = &a.item {
        let ordinal = index.ordinal_of(id).with_context(|| format!("unknown item id {id:?}"))?;
        index.reconstruct(ordinal)
    } else {
        let text = a.vector.as_deref().unwrap_or_default();
        text.split(',')
            .map(|v| v.trim().parse::<f32>().with_context(|| format!("bad vector component {v:?}")))
            .collect::<Result<_>>()?
    };
    let nprobe = a.nprobe.unwrap_or(index.shape().coarse_cells.min(16));
    if a.k > index.len() {
        warn!("k = {} exceeds the {} indexed items; returning all of them", a.k, index.len());
    }
    let hits = index.search(&query, SearchParams { k: a.k, nprobe })?;
    let mut out = io::stdout().lock();
    for (rank, h) in hits.iter().enumerate() {
        writeln!(out, "{}\t{}\t{}", rank + 1, index.id(h.ordinal), h.score)?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (index, queries) = load_index_and_queries(&a.index)?;
    let items = Vocab::from_ids(index.ids().iter().cloned())?;
    let ev = load_eval(&a.eval_data, &queries.vocab, &items)?;
    let j = index.shape().coarse_cells;
    let mut nprobes = if a.nprobe.is_empty() {
        vec![1, 4, 16, j]
    } else {
        a.nprobe.clone()
    };
    nprobes.iter_mut().for_each(|n| *n = (*n).min(j));
    nprobes.sort_unstable();
    nprobes.dedup();
    let grid = metric_grid(&index, &queries.embeddings, &ev.truth, &a.k, &nprobes)?;
    let mut out = io::stdout().lock();
    if a.json {
        for p in &grid {
            writeln!(out, "{}", serde_json::to_string(p)?)?;
        }
    } else {
        writeln!(out, "k\tnprobe\tprecision\trecall\tskipped")?;
        for p in &grid {
            writeln!(out, "{}\t{}\t{:.6}\t{:.6}\t{}", p.k, p.nprobe, p.precision, p.recall, p.skipped)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRecord<'a> {
    #[serde(flatten)]
    report: &'a jpq_core::pipeline::CompareReport,
    seed: u64,
    coarse_cells: usize,
    pq_centroids: usize,
    subspaces: usize,
}

fn compare_cmd(a: &CompareArgs) -> Result<()> {
    let paths = PathFlags {
        data: a.data.clone(),
        eval_data: a.eval_data.clone(),
        ..PathFlags::default()
    };
    let cfg = RunConfig::resolve(&a.run, &paths)?;
    let ds = load_training(RunConfig::require(&cfg.data, "data")?)?;
    let ev = load_eval(RunConfig::require(&cfg.eval_data, "eval-data")?, &ds.queries, &ds.items)?;
    let data = TrainingData {
        query_ids: ds.queries.ids(),
        item_ids: ds.items.ids(),
        pairs: &ds.pairs,
    };
    let params = SearchParams {
        k: a.k,
        nprobe: cfg.nprobe,
    };
    let report = compare(&data, &ev.truth, &cfg.train, params)?;
    let mut out = io::stdout().lock();
    if a.json {
        let record = CompareRecord {
            report: &report,
            seed: cfg.train.seed,
            coarse_cells: cfg.train.coarse_cells,
            pq_centroids: cfg.train.pq_centroids,
            subspaces: cfg.train.subspaces,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
        return Ok(());
    }
    let k = report.k;
    writeln!(out, "k={k}")?;
    writeln!(out, "nprobe={}", report.nprobe)?;
    for (name, b) in [("joint", &report.joint), ("offline", &report.offline)] {
        writeln!(out, "{name}.p@{k}={:.6}", b.precision)?;
        writeln!(out, "{name}.r@{k}={:.6}", b.recall)?;
        writeln!(out, "{name}.build_seconds={:.3}", b.build_seconds)?;
        writeln!(out, "{name}.cells_used={}/{}", b.cells_used, b.cells_total)?;
        writeln!(out, "{name}.mean_distortion={:.6}", b.mean_distortion)?;
    }
    writeln!(out, "delta.p@{k}={:+.6}", report.precision_delta)?;
    writeln!(out, "delta.r@{k}={:+.6}", report.recall_delta)?;
    Ok(())
}
