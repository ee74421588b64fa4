//! Ablation and neighbor-count sweep drivers.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{compact, kcore_filter, split_dataset, InteractionDataset, SplitConfig};
use crate::embed::{embed_all, EmbeddingProvider, SemanticEmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit, MetricReport};
use crate::item_graph::{top_k_neighbors, ItemItemGraph};
use crate::kg_text::{render_all, PromptConfig};
use crate::scalar::Scalar;
use crate::synthetic::{SyntheticConfig, SyntheticData};
use crate::trainer::{train, AblationFlags, ModelConfig, TrainArtifacts, TrainConfig, TrainOutcome};

/// The model variants compared in the ablation table, in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    Full,
    NoItemSemantic,
    NoUserSemantic,
    NoNeighborAug,
    NoSecondOrder,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoItemSemantic,
        Variant::NoUserSemantic,
        Variant::NoNeighborAug,
        Variant::NoSecondOrder,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoItemSemantic => "w/o s_v",
            Variant::NoUserSemantic => "w/o s_u",
            Variant::NoNeighborAug => "w/o N_k(v)",
            Variant::NoSecondOrder => "w/o D_v'",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::NoItemSemantic => f.no_item_semantic = true,
            Variant::NoUserSemantic => f.no_user_semantic = true,
            Variant::NoNeighborAug => f.no_neighbor_aug = true,
            Variant::NoSecondOrder => f.no_second_order = true,
        }
        f
    }
}

/// Everything a training run needs besides its flags and `k`.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentSetup<'a> {
    pub dataset: &'a InteractionDataset,
    pub table: &'a SemanticEmbeddingTable,
    /// Table built from item prompts without second-order context.
    pub table_no_second_order: Option<&'a SemanticEmbeddingTable>,
    pub k: usize,
    pub model: ModelConfig,
    pub train: &'a TrainConfig,
    pub ks: &'a [usize],
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub label: String,
    pub k: usize,
    pub best_epoch: usize,
    pub report: MetricReport,
}

pub fn neighbor_graph(table: &SemanticEmbeddingTable, n_items: usize, k: usize) -> Result<ItemItemGraph> {
    top_k_neighbors(&table.item_matrix::<f64>(n_items)?, k)
}

/// Trains one configuration and evaluates it on the test split.
pub fn run_once<T: Scalar>(
    setup: &ExperimentSetup<'_>,
    table: &SemanticEmbeddingTable,
    graph: &ItemItemGraph,
    flags: AblationFlags,
) -> Result<(MetricReport, TrainOutcome<T>)> {
    let cfg = TrainConfig {
        flags,
        ..setup.train.clone()
    };
    let art = TrainArtifacts {
        semantic: Some(table),
        item_graph: Some(graph),
    };
    let out = train::<T>(setup.dataset, art, setup.model, &cfg)?;
    let prepared = crate::trainer::PreparedInputs::<T>::new(setup.dataset, art, flags)?;
    let emb = out.state.final_embeddings(&prepared.as_inputs(), flags.switches())?;
    let report = evaluate(&emb, setup.dataset, EvalSplit::Test, setup.ks);
    Ok((report, out))
}

pub fn run_variant<T: Scalar>(setup: &ExperimentSetup<'_>, variant: Variant) -> Result<ExperimentRow> {
    let table = match variant {
        Variant::NoSecondOrder => setup.table_no_second_order.ok_or_else(|| Error::MissingStage {
            stage: "embed".into(),
            detail: "embedding table without second-order context".into(),
        })?,
        _ => setup.table,
    };
    let graph = neighbor_graph(table, setup.dataset.n_items(), setup.k)?;
    let (report, out) = run_once::<T>(setup, table, &graph, variant.flags())?;
    log::info!("{}: recall {:?}", variant.label(), report.recall);
    Ok(ExperimentRow {
        label: variant.label().to_owned(),
        k: setup.k,
        best_epoch: out.best_epoch,
        report,
    })
}

/// Full model plus the four single-component ablations.
pub fn ablation<T: Scalar>(setup: &ExperimentSetup<'_>) -> Result<Vec<ExperimentRow>> {
    Variant::ALL.iter().map(|&v| run_variant::<T>(setup, v)).collect()
}

/// Retrains the full model for each distinct `k`, rebuilding the item graph; rows ascend by `k`.
pub fn k_sweep<T: Scalar>(setup: &ExperimentSetup<'_>, k_values: &[usize]) -> Result<Vec<ExperimentRow>> {
    let mut ks: Vec<usize> = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let s = ExperimentSetup { k, ..*setup };
            let mut row = run_variant::<T>(&s, Variant::Full)?;
            row.label = format!("k={k}");
            Ok(row)
        })
        .collect()
}

/// `label  k  recall@k.. ndcg@k..` with a header line.
pub fn rows_to_tsv(rows: &[ExperimentRow]) -> String {
    let mut s = String::from("variant\tk");
    if let Some(first) = rows.first() {
        for k in &first.report.ks {
            let _ = write!(s, "\trecall@{k}\tndcg@{k}");
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}\t{}", r.label, r.k);
        for (rc, nd) in r.report.recall.iter().zip(&r.report.ndcg) {
            let _ = write!(s, "\t{rc:.6}\t{nd:.6}");
        }
        s.push('\n');
    }
    s
}

/// A prepared synthetic workload with both embedding tables.
#[derive(Debug, Clone)]
pub struct SyntheticWorkload {
    pub data: SyntheticData,
    pub dataset: InteractionDataset,
    pub table: SemanticEmbeddingTable,
    pub table_no_second_order: SemanticEmbeddingTable,
}

impl SyntheticWorkload {
    pub fn build(
        cfg: &SyntheticConfig,
        kcore: usize,
        split: &SplitConfig,
        prompts: &PromptConfig,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self> {
        let data = SyntheticData::generate(cfg);
        let raw = data.raw_interactions();
        let raw = compact(&raw, &kcore_filter(&raw.edges, kcore));
        let dataset = split_dataset(&raw, split)?;
        let kg = data.knowledge_graph(&dataset.item_tokens);
        let (n_items, n_users) = (dataset.n_items(), dataset.n_users());
        let table = embed_all(provider, &render_all(&dataset, &kg, prompts)?, n_items, n_users)?;
        let flat = PromptConfig {
            second_order: false,
            ..*prompts
        };
        let table_no_second_order = embed_all(provider, &render_all(&dataset, &kg, &flat)?, n_items, n_users)?;
        Ok(Self {
            data,
            dataset,
            table,
            table_no_second_order,
        })
    }
}

/// Fixed settings of the synthetic directional experiment.
#[derive(Debug, Clone)]
pub struct SyntheticProtocol {
    pub synthetic: SyntheticConfig,
    pub kcore: usize,
    pub d_s: usize,
    pub k: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for SyntheticProtocol {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            kcore: 2,
            d_s: 128,
            k: 10,
            model: ModelConfig { d: 32, d_a: 16, layers: 2 },
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 256,
                max_epochs: 60,
                patience: 30,
                ..TrainConfig::default()
            },
        }
    }
}

impl SyntheticProtocol {
    /// Data, split and training all derive from `seed`.
    pub fn workload(&self, seed: u64) -> Result<SyntheticWorkload> {
        let syn = SyntheticConfig {
            seed,
            ..self.synthetic.clone()
        };
        let split = SplitConfig {
            seed,
            ..SplitConfig::default()
        };
        let prompts = PromptConfig {
            seed,
            ..PromptConfig::default()
        };
        SyntheticWorkload::build(&syn, self.kcore, &split, &prompts, &crate::embed::MockProvider::new(self.d_s))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}
