//! Knowledge-graph triple store with entity/relation vocabularies.

use std::collections::HashSet;
use std::path::Path;

use crate::data::{read_text, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    pub entities: Vocab,
    pub relations: Vocab,
    /// Unique triples in file order.
    pub triples: Vec<Triple>,
    /// Triple indices per head entity, sorted by `(relation, tail)`.
    by_head: Vec<Vec<u32>>,
    /// Entity of each dataset item; `None` for unmapped items.
    item_entity: Vec<Option<u32>>,
    /// Display name per dataset item.
    item_names: Vec<String>,
}

impl KnowledgeGraph {
    /// Builds the graph from `(head, relation, tail)` name triples and binds
    /// dataset items (by token) to entities through `item_map`.
    pub fn from_parts<'a>(
        triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
        item_tokens: &[String],
        item_map: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        let mut kg = KnowledgeGraph::default();
        let mut seen = HashSet::new();
        for (h, r, t) in triples {
            let triple = Triple {
                head: kg.entities.intern(h),
                relation: kg.relations.intern(r),
                tail: kg.entities.intern(t),
            };
            if seen.insert(triple) {
                kg.triples.push(triple);
            }
        }
        let map: std::collections::HashMap<&str, &str> = item_map.into_iter().collect();
        for token in item_tokens {
            match map.get(token.as_str()) {
                Some(name) => {
                    let e = kg.entities.intern(name);
                    kg.item_entity.push(Some(e));
                    kg.item_names.push((*name).to_owned());
                }
                None => {
                    log::warn!("item {token:?} has no entity mapping; its subgraph is empty");
                    kg.item_entity.push(None);
                    kg.item_names.push(token.clone());
                }
            }
        }
        kg.index();
        kg
    }

    fn index(&mut self) {
        let mut by_head = vec![Vec::new(); self.entities.len()];
        for (i, t) in self.triples.iter().enumerate() {
            by_head[t.head as usize].push(i as u32);
        }
        for list in &mut by_head {
            list.sort_by_key(|&i| {
                let t = self.triples[i as usize];
                (t.relation, t.tail)
            });
        }
        self.by_head = by_head;
    }

    pub fn n_items(&self) -> usize {
        self.item_entity.len()
    }

    pub fn item_entity(&self, item: u32) -> Option<u32> {
        self.item_entity.get(item as usize).copied().flatten()
    }

    pub fn item_name(&self, item: u32) -> &str {
        &self.item_names[item as usize]
    }

    /// Triples with `entity` as head, in `(relation, tail)` order.
    pub fn outgoing(&self, entity: u32) -> impl Iterator<Item = Triple> + '_ {
        self.by_head
            .get(entity as usize)
            .into_iter()
            .flatten()
            .map(move |&i| self.triples[i as usize])
    }

    pub fn entity_name(&self, id: u32) -> &str {
        self.entities.token(id)
    }

    pub fn relation_name(&self, id: u32) -> &str {
        self.relations.token(id)
    }
}

fn parse_tab_columns<'a>(text: &'a str, path: &Path, n: usize) -> Result<Vec<Vec<&'a str>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() < n {
            return Err(Error::parse(path, i + 1, format!("expected {n} tab-separated columns")));
        }
        rows.push(cols);
    }
    Ok(rows)
}

/// Loads `head\trelation\ttail` triples plus an optional
/// `item_token\tentity_name` map for the dataset's items.
pub fn load_kg(triples_path: &Path, item_map_path: Option<&Path>, item_tokens: &[String]) -> Result<KnowledgeGraph> {
    let triples_text = read_text(triples_path)?;
    let rows = parse_tab_columns(&triples_text, triples_path, 3)?;
    let map_text = match item_map_path {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let map_rows = match item_map_path {
        Some(p) => parse_tab_columns(&map_text, p, 2)?,
        None => Vec::new(),
    };
    Ok(KnowledgeGraph::from_parts(
        rows.iter().map(|c| (c[0], c[1], c[2])),
        item_tokens,
        map_rows.iter().map(|c| (c[0], c[1])),
    ))
}
