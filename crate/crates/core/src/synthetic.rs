//! Clustered synthetic interaction data with a matching knowledge graph.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_text, RawInteractions, Vocab};
use crate::error::Result;
use crate::kg::KnowledgeGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    /// Inclusive range of interactions drawn per user.
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction falls in the user's preferred cluster.
    pub preference: f64,
    /// Zipf exponent of item popularity inside a cluster.
    pub popularity_skew: f64,
    /// Probability that an item's genre fact names the wrong cluster.
    pub label_noise: f64,
    /// Tag facts per item; each is cluster-specific with probability `tag_signal`.
    pub tags_per_item: usize,
    pub tag_signal: f64,
    /// Uninformative attribute facts per item (studio, country, ...).
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            n_clusters: 5,
            min_interactions: 2,
            max_interactions: 4,
            preference: 0.85,
            popularity_skew: 1.0,
            label_noise: 0.05,
            tags_per_item: 3,
            tag_signal: 0.5,
            distractors: 6,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub interactions: Vec<(String, String)>,
    pub triples: Vec<(String, String, String)>,
    /// `(item token, entity name)`.
    pub item_map: Vec<(String, String)>,
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
}

pub struct SyntheticPaths {
    pub interactions: PathBuf,
    pub triples: PathBuf,
    pub item_map: PathBuf,
}

const TAGS_PER_CLUSTER: usize = 4;
const SHARED_TAGS: usize = 12;
const YEARS: usize = 8;
const DISTRACTOR_VALUES: usize = 10;
const DISTRACTORS: [(&str, &str); 6] = [
    ("studio", "studio"),
    ("country", "country"),
    ("language", "lang"),
    ("rating", "rated"),
    ("format", "format"),
    ("award", "award"),
];

const CLUSTER_WORDS: [&str; 8] = ["noir", "space", "romance", "western", "horror", "comedy", "fantasy", "war"];

/// Whitespace-separated word naming cluster `c` in entity names.
pub fn cluster_word(c: usize) -> String {
    match CLUSTER_WORDS.get(c) {
        Some(w) => (*w).to_owned(),
        None => format!("theme{c}"),
    }
}

impl SyntheticData {
    pub fn generate(cfg: &SyntheticConfig) -> Self {
        assert!(cfg.n_clusters > 0 && cfg.n_items >= cfg.n_clusters);
        assert!(cfg.min_interactions <= cfg.max_interactions);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let item_cluster: Vec<usize> = (0..cfg.n_items).map(|v| v % cfg.n_clusters).collect();
        let members: Vec<Vec<usize>> = (0..cfg.n_clusters)
            .map(|c| (0..cfg.n_items).filter(|&v| item_cluster[v] == c).collect())
            .collect();
        // popularity rank inside each cluster is a random permutation
        let popularity: Vec<WeightedIndex<f64>> = members
            .iter()
            .map(|m| {
                let mut ranks: Vec<usize> = (1..=m.len()).collect();
                for i in (1..ranks.len()).rev() {
                    ranks.swap(i, rng.random_range(0..=i));
                }
                WeightedIndex::new(ranks.iter().map(|&r| (r as f64).powf(-cfg.popularity_skew))).expect("positive weights")
            })
            .collect();

        let item_token = |v: usize| format!("i{v}");
        let item_name = |v: usize| format!("Item {v}");
        let mut interactions = Vec::new();
        let mut user_cluster = Vec::with_capacity(cfg.n_users);
        for u in 0..cfg.n_users {
            let pref = u % cfg.n_clusters;
            user_cluster.push(pref);
            let target = rng.random_range(cfg.min_interactions..=cfg.max_interactions).min(cfg.n_items);
            let mut chosen = BTreeSet::new();
            let mut attempts = 0;
            while chosen.len() < target && attempts < 100 * target {
                attempts += 1;
                let c = if rng.random_bool(cfg.preference) {
                    pref
                } else {
                    rng.random_range(0..cfg.n_clusters)
                };
                chosen.insert(members[c][popularity[c].sample(&mut rng)]);
            }
            interactions.extend(chosen.into_iter().map(|v| (format!("u{u}"), item_token(v))));
        }

        let mut triples = Vec::new();
        let mut item_map = Vec::new();
        for v in 0..cfg.n_items {
            let name = item_name(v);
            item_map.push((item_token(v), name.clone()));
            let c = item_cluster[v];
            let genre = if rng.random_bool(cfg.label_noise) {
                (c + rng.random_range(1..cfg.n_clusters.max(2))) % cfg.n_clusters
            } else {
                c
            };
            let genre_name = format!("{} stories", cluster_word(genre));
            triples.push((name.clone(), "genre".to_owned(), genre_name.clone()));
            triples.push((genre_name, "genre_of".to_owned(), name.clone()));
            let mut tags = BTreeSet::new();
            for _ in 0..cfg.tags_per_item {
                let tag = if rng.random_bool(cfg.tag_signal) {
                    let w = cluster_word(c);
                    format!("{w} {w}-{}", rng.random_range(0..TAGS_PER_CLUSTER))
                } else {
                    format!("common-{}", rng.random_range(0..SHARED_TAGS))
                };
                tags.insert(tag);
            }
            for tag in tags {
                triples.push((name.clone(), "tag".to_owned(), tag.clone()));
                triples.push((tag, "tag_of".to_owned(), name.clone()));
            }
            for (i, (relation, pool)) in DISTRACTORS.iter().take(cfg.distractors).enumerate() {
                let value = format!("{}-{}", pool, rng.random_range(0..DISTRACTOR_VALUES));
                triples.push((name.clone(), (*relation).to_owned(), value.clone()));
                if i == 0 {
                    triples.push((value, format!("{relation}_of"), name.clone()));
                }
            }
            let year = format!("Year {}", 2000 + rng.random_range(0..YEARS));
            triples.push((name.clone(), "released".to_owned(), year.clone()));
            triples.push((year, "released_in".to_owned(), name));
        }
        Self {
            interactions,
            triples,
            item_map,
            user_cluster,
            item_cluster,
        }
    }

    pub fn raw_interactions(&self) -> RawInteractions {
        let mut users = Vocab::new();
        let mut items = Vocab::new();
        let edges = self
            .interactions
            .iter()
            .map(|(u, v)| (users.intern(u), items.intern(v)))
            .collect();
        RawInteractions { users, items, edges }
    }

    pub fn knowledge_graph(&self, item_tokens: &[String]) -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            self.triples.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
            item_tokens,
            self.item_map.iter().map(|(a, b)| (a.as_str(), b.as_str())),
        )
    }

    /// Writes `interactions.tsv`, `triples.tsv` and `item_map.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        let paths = SyntheticPaths {
            interactions: dir.join("interactions.tsv"),
            triples: dir.join("triples.tsv"),
            item_map: dir.join("item_map.tsv"),
        };
        let mut s = String::new();
        for (u, v) in &self.interactions {
            let _ = writeln!(s, "{u}\t{v}");
        }
        write_text(&paths.interactions, &s)?;
        s.clear();
        for (h, r, t) in &self.triples {
            let _ = writeln!(s, "{h}\t{r}\t{t}");
        }
        write_text(&paths.triples, &s)?;
        s.clear();
        for (a, b) in &self.item_map {
            let _ = writeln!(s, "{a}\t{b}");
        }
        write_text(&paths.item_map, &s)?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_preference() {
        let cfg = SyntheticConfig::default();
        let d = SyntheticData::generate(&cfg);
        assert_eq!(d.user_cluster.len(), 200);
        assert_eq!(d.item_map.len(), 100);
        let raw = d.raw_interactions();
        assert_eq!(raw.users.len(), 200);
        let in_pref = d
            .interactions
            .iter()
            .filter(|(u, v)| {
                let u: usize = u[1..].parse().unwrap();
                let v: usize = v[1..].parse().unwrap();
                d.user_cluster[u] == d.item_cluster[v]
            })
            .count();
        assert!(in_pref as f64 / d.interactions.len() as f64 > 0.8);
        // reverse links give every item second-order context
        let kg = d.knowledge_graph(raw.items.tokens());
        for v in 0..kg.n_items() as u32 {
            let e = kg.item_entity(v).unwrap();
            assert!(kg.outgoing(e).count() >= 3);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = SyntheticData::generate(&SyntheticConfig::default());
        let b = SyntheticData::generate(&SyntheticConfig::default());
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.triples, b.triples);
        let c = SyntheticData::generate(&SyntheticConfig {
            seed: 8,
            ..Default::default()
        });
        assert_ne!(a.interactions, c.interactions);
    }

    #[test]
    fn files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let d = SyntheticData::generate(&SyntheticConfig::default());
        let p = d.write(dir.path()).unwrap();
        let raw = crate::data::load_interactions(&p.interactions).unwrap();
        assert_eq!(raw.edges.len(), d.interactions.len());
        let kg = crate::kg::load_kg(&p.triples, Some(&p.item_map), raw.items.tokens()).unwrap();
        assert_eq!(kg.triples.len(), d.triples.len());
    }
}
