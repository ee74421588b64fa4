//! Stage commands over a work directory:
//!
//! ```text
//! prepare/  train.tsv val.tsv test.tsv vocab.tsv
//! embed/    semantic.bin semantic_flat.bin prompts.txt
//! graph/    item_graph.tsv item_graph_flat.tsv
//! train/    best.clkm log.jsonl
//! eval/     report.json report.tsv
//! ablate/   ablation.tsv ablation.json
//! sweep/    sweep.tsv sweep.json
//! ```
//!
//! Each stage also writes `manifest.json` with the config hash and the
//! SHA-256 of every input and output.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EmbedMode, PipelineConfig};
use crate::data::{compact, kcore_filter, load_interactions, split_dataset, InteractionDataset};
use crate::embed::{
    build_embedding_table, load_embedding_file, ContentCache, EmbeddingProvider, MockProvider, RemoteProvider,
    SemanticEmbeddingTable,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, sparsity_groups, EvalSplit, MetricReport};
use crate::experiment::{ablation, k_sweep, neighbor_graph, rows_to_tsv, ExperimentRow, ExperimentSetup};
use crate::item_graph::ItemItemGraph;
use crate::kg::{load_kg, KnowledgeGraph};
use crate::kg_text::{render_all, write_prompt_dump, PromptConfig};
use crate::model::ModelState;
use crate::trainer::{train_with_callback, PreparedInputs, TrainArtifacts};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Paths inside a work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn file(&self, stage: &str, name: &str) -> PathBuf {
        self.root.join(stage).join(name)
    }

    pub fn prepared(&self) -> PathBuf {
        self.stage("prepare")
    }

    pub fn table(&self, flat: bool) -> PathBuf {
        self.file("embed", if flat { "semantic_flat.bin" } else { "semantic.bin" })
    }

    pub fn item_graph(&self, flat: bool) -> PathBuf {
        self.file("graph", if flat { "item_graph_flat.tsv" } else { "item_graph.tsv" })
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.file("train", "best.clkm")
    }

    fn manifest(&self, stage: &str) -> PathBuf {
        self.file(stage, "manifest.json")
    }

    fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
}

/// Exclusive hold on a work directory, released on drop.
pub struct WorkDirLock {
    path: PathBuf,
}

impl WorkDirLock {
    pub fn acquire(layout: &Layout) -> Result<Self> {
        std::fs::create_dir_all(layout.root()).map_err(|e| Error::io(layout.root(), e))?;
        let path = layout.lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Internal(format!(
                "work dir is in use by another command (remove {} if no command is running)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn create_stage(layout: &Layout, stage: &str) -> Result<PathBuf> {
    let dir = layout.stage(stage);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Keys are relative to the work dir when the file lives inside it.
fn hash_all(layout: &Layout, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let key = p.strip_prefix(layout.root()).unwrap_or(p);
            Ok((key.display().to_string(), sha256_file(p)?))
        })
        .collect()
}

fn write_manifest(layout: &Layout, cfg: &PipelineConfig, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let m = Manifest {
        stage: stage.into(),
        config_hash: cfg.hash(),
        inputs: hash_all(layout, inputs)?,
        outputs: hash_all(layout, outputs)?,
    };
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&layout.manifest(stage), json + "\n")
}

pub fn read_manifest(layout: &Layout, stage: &str) -> Result<Option<Manifest>> {
    let path = layout.manifest(stage);
    match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::parse(&path, e.line(), e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&path, e)),
    }
}

/// Upstream outputs whose bytes no longer match the recorded hash.
pub fn stale_outputs(layout: &Layout, stage: &str) -> Result<Vec<String>> {
    let Some(m) = read_manifest(layout, stage)? else {
        return Ok(Vec::new());
    };
    let mut stale = Vec::new();
    for (path, hash) in &m.outputs {
        match sha256_file(&layout.root().join(path)) {
            Ok(h) if &h == hash => {}
            _ => stale.push(path.clone()),
        }
    }
    Ok(stale)
}

fn require(layout: &Layout, path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        for s in stale_outputs(layout, stage)? {
            log::warn!("{s} changed since `{stage}` recorded it");
        }
        Ok(())
    } else {
        Err(Error::MissingStage {
            stage: stage.into(),
            detail: format!("{} not found; run `colakg {stage}` first", path.display()),
        })
    }
}

fn required_input<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set")))?;
    if !p.exists() {
        return Err(Error::InputNotFound(p.to_owned()));
    }
    Ok(p)
}

fn load_dataset(layout: &Layout) -> Result<InteractionDataset> {
    let dir = layout.prepared();
    require(layout, &dir.join("vocab.tsv"), "prepare")?;
    InteractionDataset::read_splits(&dir)
}

fn load_graph_kg(cfg: &PipelineConfig, ds: &InteractionDataset) -> Result<(KnowledgeGraph, Vec<PathBuf>)> {
    let triples = required_input(&cfg.triples, "triples")?;
    let mut inputs = vec![triples.to_owned()];
    let item_map = match &cfg.item_map {
        Some(_) => Some(required_input(&cfg.item_map, "item_map")?),
        None => None,
    };
    inputs.extend(item_map.map(Path::to_owned));
    Ok((load_kg(triples, item_map, &ds.item_tokens)?, inputs))
}

/// Filters, splits and writes the interaction data. The knowledge graph
/// is loaded too, so a bad triples file fails here rather than in `embed`.
pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<InteractionDataset> {
    let layout = Layout::new(&cfg.work_dir);
    let interactions = required_input(&cfg.interactions, "interactions")?;
    let raw = load_interactions(interactions)?;
    let kept = kcore_filter(&raw.edges, cfg.kcore);
    if kept.is_empty() {
        return Err(Error::Config(format!("no interactions survive the {}-core filter", cfg.kcore)));
    }
    let ds = split_dataset(&compact(&raw, &kept), &cfg.split)?;
    let (kg, mut inputs) = load_graph_kg(cfg, &ds)?;
    let mapped = (0..ds.n_items() as u32).filter(|&v| kg.item_entity(v).is_some()).count();
    if mapped < ds.n_items() {
        log::warn!("{} of {} items have no knowledge-graph entity", ds.n_items() - mapped, ds.n_items());
    }
    let dir = create_stage(&layout, "prepare")?;
    ds.write_splits(&dir)?;
    inputs.insert(0, interactions.to_owned());
    let outputs: Vec<PathBuf> = ["train.tsv", "val.tsv", "test.tsv", "vocab.tsv"].iter().map(|n| dir.join(n)).collect();
    write_manifest(&layout, cfg, "prepare", &inputs, &outputs)?;
    log::info!(
        "prepared {} users, {} items, {}/{}/{} train/val/test edges",
        ds.n_users(),
        ds.n_items(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(ds)
}

fn provider_for(cfg: &PipelineConfig, layout: &Layout) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match cfg.embed_mode {
        EmbedMode::Mock => Box::new(MockProvider::new(cfg.d_s)),
        EmbedMode::Remote => {
            let dir = cfg.cache_dir.clone().unwrap_or_else(|| layout.stage("cache"));
            Box::new(RemoteProvider::from_env(cfg.remote.clone(), ContentCache::new(dir)?)?)
        }
        EmbedMode::File => unreachable!("file mode does not use a provider"),
    })
}

fn file_table(path: &Path, ds: &InteractionDataset, d_s: usize) -> Result<SemanticEmbeddingTable> {
    if !path.exists() {
        return Err(Error::InputNotFound(path.to_owned()));
    }
    let table = load_embedding_file(path, ds.n_items(), ds.n_users())?;
    if table.dim() != d_s {
        return Err(Error::Config(format!("{} has dimension {}, d_s = {d_s}", path.display(), table.dim())));
    }
    Ok(table)
}

/// Produces the semantic tables. Only this command may touch the network.
/// Interrupted runs resume from the partial table and the content cache.
pub fn cmd_embed(cfg: &PipelineConfig) -> Result<SemanticEmbeddingTable> {
    let layout = Layout::new(&cfg.work_dir);
    let ds = load_dataset(&layout)?;
    let mut inputs: Vec<PathBuf> = ["train.tsv", "vocab.tsv"].iter().map(|n| layout.prepared().join(n)).collect();
    let dir = create_stage(&layout, "embed")?;
    let (table, flat) = match cfg.embed_mode {
        EmbedMode::File => {
            let path = cfg.embed_file.as_deref().expect("validated");
            let table = file_table(path, &ds, cfg.d_s)?;
            inputs.push(path.to_owned());
            let flat = match &cfg.embed_file_no_second_order {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(file_table(p, &ds, cfg.d_s)?)
                }
                None => None,
            };
            (table, flat)
        }
        EmbedMode::Mock | EmbedMode::Remote => {
            let provider = provider_for(cfg, &layout)?;
            let (kg, kg_inputs) = load_graph_kg(cfg, &ds)?;
            inputs.extend(kg_inputs);
            let prompts = render_all(&ds, &kg, &cfg.prompts)?;
            write_prompt_dump(&dir.join("prompts.txt"), &prompts)?;
            let build = |prompts: &[_], flat: bool| {
                let out = layout.table(flat);
                build_embedding_table(provider.as_ref(), prompts, &out, ds.n_items(), ds.n_users(), cfg.parallelism)
            };
            let table = build(&prompts, false)?;
            let flat = if cfg.embed_no_second_order {
                let flat_cfg = PromptConfig {
                    second_order: false,
                    ..cfg.prompts
                };
                Some(build(&render_all(&ds, &kg, &flat_cfg)?, true)?)
            } else {
                None
            };
            (table, flat)
        }
    };
    let mut outputs = vec![layout.table(false)];
    if cfg.embed_mode == EmbedMode::File {
        table.save(&layout.table(false))?;
    }
    match &flat {
        Some(t) => {
            if cfg.embed_mode == EmbedMode::File {
                t.save(&layout.table(true))?;
            }
            outputs.push(layout.table(true));
        }
        None => {
            let _ = std::fs::remove_file(layout.table(true));
        }
    }
    if dir.join("prompts.txt").exists() {
        outputs.push(dir.join("prompts.txt"));
    }
    write_manifest(&layout, cfg, "embed", &inputs, &outputs)?;
    log::info!("semantic table: {} vectors of dimension {}", table.len(), table.dim());
    Ok(table)
}

fn load_table(layout: &Layout, flat: bool, ds: &InteractionDataset) -> Result<SemanticEmbeddingTable> {
    let path = layout.table(flat);
    require(layout, &path, "embed")?;
    let table = SemanticEmbeddingTable::load(&path)?;
    table.ensure_complete(ds.n_items(), ds.n_users())?;
    Ok(table)
}

/// Builds the top-k item-item graph from the frozen item vectors.
pub fn cmd_graph(cfg: &PipelineConfig) -> Result<ItemItemGraph> {
    let layout = Layout::new(&cfg.work_dir);
    let ds = load_dataset(&layout)?;
    let table = load_table(&layout, false, &ds)?;
    create_stage(&layout, "graph")?;
    let graph = neighbor_graph(&table, ds.n_items(), cfg.k)?;
    graph.save(&layout.item_graph(false))?;
    let mut inputs = vec![layout.table(false)];
    let mut outputs = vec![layout.item_graph(false)];
    if layout.table(true).exists() {
        let flat = load_table(&layout, true, &ds)?;
        neighbor_graph(&flat, ds.n_items(), cfg.k)?.save(&layout.item_graph(true))?;
        inputs.push(layout.table(true));
        outputs.push(layout.item_graph(true));
    }
    write_manifest(&layout, cfg, "graph", &inputs, &outputs)?;
    Ok(graph)
}

struct TrainInputs {
    ds: InteractionDataset,
    table: SemanticEmbeddingTable,
    graph: ItemItemGraph,
    paths: Vec<PathBuf>,
}

fn train_inputs(cfg: &PipelineConfig, layout: &Layout) -> Result<TrainInputs> {
    let ds = load_dataset(layout)?;
    let flat = cfg.flags().no_second_order;
    if flat && !layout.table(true).exists() {
        return Err(Error::MissingStage {
            stage: "embed".into(),
            detail: "no_second_order needs the flat table; rerun embed with embed_no_second_order = true".into(),
        });
    }
    let table = load_table(layout, flat, &ds)?;
    require(layout, &layout.item_graph(flat), "graph")?;
    let graph = ItemItemGraph::load(&layout.item_graph(flat))?;
    if graph.n_items() != ds.n_items() || graph.k() != cfg.k {
        log::warn!("item graph was built with k = {}; config has k = {}", graph.k(), cfg.k);
    }
    let mut paths: Vec<PathBuf> = ["train.tsv", "val.tsv", "vocab.tsv"].iter().map(|n| layout.prepared().join(n)).collect();
    paths.push(layout.table(flat));
    paths.push(layout.item_graph(flat));
    Ok(TrainInputs { ds, table, graph, paths })
}

/// Trains with the configured flags, writing one JSON line per epoch to
/// `log.jsonl` and forwarding it to `on_epoch`.
pub fn cmd_train(cfg: &PipelineConfig, on_epoch: &mut dyn FnMut(&str)) -> Result<usize> {
    let layout = Layout::new(&cfg.work_dir);
    let inp = train_inputs(cfg, &layout)?;
    let dir = create_stage(&layout, "train")?;
    let log_path = dir.join("log.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let art = TrainArtifacts {
        semantic: Some(&inp.table),
        item_graph: Some(&inp.graph),
    };
    let outcome = train_with_callback::<f32>(&inp.ds, art, cfg.model, &cfg.train, &mut |rec| {
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            io_err.get_or_insert(e);
        }
        on_epoch(&line);
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    drop(log_file);
    outcome.state.save(&layout.checkpoint())?;
    write_manifest(&layout, cfg, "train", &inp.paths, &[layout.checkpoint(), log_path])?;
    log::info!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    Ok(outcome.best_epoch)
}

/// Test-split report of the trained checkpoint, with sparsity groups.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<MetricReport> {
    let layout = Layout::new(&cfg.work_dir);
    require(&layout, &layout.checkpoint(), "train")?;
    let inp = train_inputs(cfg, &layout)?;
    let state = ModelState::<f32>::load(&layout.checkpoint())?;
    let art = TrainArtifacts {
        semantic: Some(&inp.table),
        item_graph: Some(&inp.graph),
    };
    let prepared = PreparedInputs::<f32>::new(&inp.ds, art, cfg.flags())?;
    let expected = prepared.dims(&inp.ds, cfg.model);
    if state.dims != expected {
        return Err(Error::Shape(format!(
            "checkpoint has dims {:?}, config implies {expected:?}",
            state.dims
        )));
    }
    let emb = state.final_embeddings(&prepared.as_inputs(), cfg.flags().switches())?;
    let mut report = evaluate(&emb, &inp.ds, EvalSplit::Test, &cfg.ks);
    report.groups = sparsity_groups(&report)?;
    let dir = create_stage(&layout, "eval")?;
    write_file(&dir.join("report.json"), report.to_json() + "\n")?;
    write_file(&dir.join("report.tsv"), report.to_tsv())?;
    let mut inputs = inp.paths;
    inputs.push(layout.checkpoint());
    inputs.push(layout.prepared().join("test.tsv"));
    write_manifest(&layout, cfg, "eval", &inputs, &[dir.join("report.json"), dir.join("report.tsv")])?;
    Ok(report)
}

fn experiment_tables(layout: &Layout) -> Result<(InteractionDataset, SemanticEmbeddingTable, Option<SemanticEmbeddingTable>)> {
    let ds = load_dataset(layout)?;
    let table = load_table(layout, false, &ds)?;
    let flat = if layout.table(true).exists() {
        Some(load_table(layout, true, &ds)?)
    } else {
        None
    };
    Ok((ds, table, flat))
}

fn write_rows(layout: &Layout, cfg: &PipelineConfig, stage: &str, name: &str, rows: &[ExperimentRow]) -> Result<()> {
    let dir = create_stage(layout, stage)?;
    let tsv = dir.join(format!("{name}.tsv"));
    let json = tsv.with_extension("json");
    write_file(&tsv, rows_to_tsv(rows))?;
    write_file(&json, serde_json::to_string_pretty(rows).expect("rows serialize") + "\n")?;
    let mut inputs: Vec<PathBuf> = ["train.tsv", "val.tsv", "test.tsv", "vocab.tsv"].iter().map(|n| layout.prepared().join(n)).collect();
    inputs.push(layout.table(false));
    if layout.table(true).exists() {
        inputs.push(layout.table(true));
    }
    write_manifest(layout, cfg, stage, &inputs, &[tsv, json])
}

/// Full model plus the four single-flag variants, each retrained from scratch.
pub fn cmd_ablate(cfg: &PipelineConfig) -> Result<Vec<ExperimentRow>> {
    let layout = Layout::new(&cfg.work_dir);
    let (ds, table, flat) = experiment_tables(&layout)?;
    if flat.is_none() {
        return Err(Error::MissingStage {
            stage: "embed".into(),
            detail: "the second-order ablation needs the flat table; rerun embed with embed_no_second_order = true".into(),
        });
    }
    let setup = ExperimentSetup {
        dataset: &ds,
        table: &table,
        table_no_second_order: flat.as_ref(),
        k: cfg.k,
        model: cfg.model,
        train: &cfg.train,
        ks: &cfg.ks,
    };
    let rows = ablation::<f32>(&setup)?;
    write_rows(&layout, cfg, "ablate", "ablation", &rows)?;
    Ok(rows)
}

/// Retrains the full model for every `k` in `sweep_ks`.
pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<Vec<ExperimentRow>> {
    let layout = Layout::new(&cfg.work_dir);
    let (ds, table, _) = experiment_tables(&layout)?;
    let setup = ExperimentSetup {
        dataset: &ds,
        table: &table,
        table_no_second_order: None,
        k: cfg.k,
        model: cfg.model,
        train: &cfg.train,
        ks: &cfg.ks,
    };
    let rows = k_sweep::<f32>(&setup, &cfg.sweep_ks)?;
    write_rows(&layout, cfg, "sweep", "sweep", &rows)?;
    Ok(rows)
}
