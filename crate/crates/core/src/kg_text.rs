//! Item-centered subgraph extraction and prompt rendering.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};

pub const ITEM_INSTRUCTION: &str = "You are given facts about an item from a knowledge graph. Summarize the item, infer and fill in missing attributes, and describe what kind of user would like it, in one paragraph.";
pub const USER_INSTRUCTION: &str = "You are given the items a user interacted with and their knowledge-graph facts. Describe this user's preferences in one paragraph.";
pub const MISSING: &str = "missing";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    /// Second-order triples sampled per first-order neighbor.
    pub m: usize,
    /// Character budget of a user prompt body.
    pub char_budget: usize,
    pub seed: u64,
    /// Include the second-order sentences in item prompts.
    pub second_order: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            m: 10,
            char_budget: 8000,
            seed: 2024,
            second_order: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSubgraph {
    pub item: u32,
    pub first_order: Vec<Triple>,
    /// Sampled triples per first-order neighbor entity, in neighbor order.
    pub second_order: Vec<(u32, Vec<Triple>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Item,
    User,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Item => "item",
            PromptKind::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub kind: PromptKind,
    #[serde(rename = "id")]
    pub subject_id: u32,
    #[serde(rename = "system")]
    pub system_instruction: String,
    pub body: String,
}

/// All triples `(v, r, e)` with the item's entity as head.
pub fn extract_first_order(kg: &KnowledgeGraph, item: u32) -> Vec<Triple> {
    match kg.item_entity(item) {
        Some(e) => kg.outgoing(e).collect(),
        None => Vec::new(),
    }
}

/// Uniform sample without replacement of at most `m` triples `(e, r, v')`
/// with `v'` different from the item's entity. Returned in `(relation, tail)` order.
pub fn sample_second_order<R: rand::Rng + ?Sized>(
    kg: &KnowledgeGraph,
    entity: u32,
    item: u32,
    m: usize,
    rng: &mut R,
) -> Vec<Triple> {
    let center = kg.item_entity(item);
    let pool: Vec<Triple> = kg
        .outgoing(entity)
        .filter(|t| Some(t.tail) != center)
        .collect();
    if pool.len() <= m {
        return pool;
    }
    let mut picked: Vec<Triple> = pool.choose_multiple(rng, m).copied().collect();
    picked.sort_by_key(|t| (t.relation, t.tail));
    picked
}

fn item_rng(seed: u64, item: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item as u64);
    rng
}

pub fn build_item_subgraph(kg: &KnowledgeGraph, item: u32, m: usize, seed: u64) -> ItemSubgraph {
    let first_order = extract_first_order(kg, item);
    let mut rng = item_rng(seed, item);
    let mut neighbors: Vec<u32> = Vec::new();
    for t in &first_order {
        if !neighbors.contains(&t.tail) {
            neighbors.push(t.tail);
        }
    }
    let second_order = neighbors
        .into_iter()
        .map(|e| (e, sample_second_order(kg, e, item, m, &mut rng)))
        .collect();
    ItemSubgraph {
        item,
        first_order,
        second_order,
    }
}

fn or_missing(name: &str) -> &str {
    if name.trim().is_empty() {
        MISSING
    } else {
        name
    }
}

/// First-order text: `(head, relation, tail)` joined by `"; "`, or the
/// placeholder triple when the item has no facts.
pub fn serialize_first_order(kg: &KnowledgeGraph, item: u32, triples: &[Triple]) -> String {
    if triples.is_empty() {
        return format!("({}, {MISSING}, {MISSING})", or_missing(kg.item_name(item)));
    }
    let mut s = String::new();
    for (i, t) in triples.iter().enumerate() {
        if i > 0 {
            s.push_str("; ");
        }
        let _ = write!(
            s,
            "({}, {}, {})",
            or_missing(kg.entity_name(t.head)),
            or_missing(kg.relation_name(t.relation)),
            or_missing(kg.entity_name(t.tail)),
        );
    }
    s
}

/// One sentence per (neighbor, relation) group of second-order triples.
pub fn serialize_second_order(kg: &KnowledgeGraph, second_order: &[(u32, Vec<Triple>)]) -> String {
    let mut sentences = Vec::new();
    for (e, triples) in second_order {
        let mut start = 0;
        while start < triples.len() {
            let rel = triples[start].relation;
            let end = start + triples[start..].iter().take_while(|t| t.relation == rel).count();
            let tails: Vec<&str> = triples[start..end]
                .iter()
                .map(|t| or_missing(kg.entity_name(t.tail)))
                .collect();
            sentences.push(format!(
                "Other items connected to {} via {}: {}.",
                or_missing(kg.entity_name(*e)),
                or_missing(kg.relation_name(rel)),
                tails.join(", ")
            ));
            start = end;
        }
    }
    sentences.join(" ")
}

pub fn render_item_prompt(kg: &KnowledgeGraph, subgraph: &ItemSubgraph, second_order: bool) -> PromptDocument {
    let mut body = serialize_first_order(kg, subgraph.item, &subgraph.first_order);
    if second_order {
        let extra = serialize_second_order(kg, &subgraph.second_order);
        if !extra.is_empty() {
            body.push('\n');
            body.push_str(&extra);
        }
    }
    PromptDocument {
        kind: PromptKind::Item,
        subject_id: subgraph.item,
        system_instruction: ITEM_INSTRUCTION.to_owned(),
        body,
    }
}

/// `name_v: D_v` per training item, newline separated, truncated to whole
/// lines within `char_budget` (the first line is always kept).
pub fn render_user_prompt(
    user: u32,
    dataset: &InteractionDataset,
    kg: &KnowledgeGraph,
    char_budget: usize,
) -> Result<PromptDocument> {
    let items = dataset.user_items(user);
    if items.is_empty() {
        return Err(Error::Config(format!(
            "user {} has no training interactions",
            dataset.user_tokens[user as usize]
        )));
    }
    let mut body = String::new();
    let mut used = 0usize;
    for (i, &v) in items.iter().enumerate() {
        let line = format!(
            "{}: {}",
            or_missing(kg.item_name(v)),
            serialize_first_order(kg, v, &extract_first_order(kg, v))
        );
        let cost = line.chars().count() + usize::from(i > 0);
        if i > 0 && used + cost > char_budget {
            break;
        }
        if i > 0 {
            body.push('\n');
        }
        body.push_str(&line);
        used += cost;
    }
    Ok(PromptDocument {
        kind: PromptKind::User,
        subject_id: user,
        system_instruction: USER_INSTRUCTION.to_owned(),
        body,
    })
}

/// Item prompts for every dataset item followed by user prompts for every user.
pub fn render_all(dataset: &InteractionDataset, kg: &KnowledgeGraph, cfg: &PromptConfig) -> Result<Vec<PromptDocument>> {
    let mut out: Vec<PromptDocument> = (0..dataset.n_items() as u32)
        .into_par_iter()
        .map(|v| render_item_prompt(kg, &build_item_subgraph(kg, v, cfg.m, cfg.seed), cfg.second_order))
        .collect();
    let users: Result<Vec<_>> = (0..dataset.n_users() as u32)
        .into_par_iter()
        .map(|u| render_user_prompt(u, dataset, kg, cfg.char_budget))
        .collect();
    out.extend(users?);
    Ok(out)
}

pub fn write_prompt_dump(path: &Path, prompts: &[PromptDocument]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in prompts {
        let line = serde_json::to_string(p).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
