//! Interaction data: loading, k-core filtering, and per-user splitting.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `(user, item)` pair of dense ids.
pub type Edge = (u32, u32);

/// Interns string tokens to dense ids in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.intern(&t);
        }
        v
    }

    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Deduplicated interaction edges with their token vocabularies.
#[derive(Debug, Clone, Default)]
pub struct RawInteractions {
    pub users: Vocab,
    pub items: Vocab,
    /// Unique edges in first-occurrence file order.
    pub edges: Vec<Edge>,
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_interactions(path: &Path) -> Result<RawInteractions> {
    parse_interactions(&read_text(path)?, path)
}

/// Parses `user<sep>item[<sep>extra...]` lines; the separator is a tab if
/// the first non-empty line contains one, otherwise a comma.
pub fn parse_interactions(text: &str, origin: &Path) -> Result<RawInteractions> {
    let sep = match text.lines().find(|l| !l.trim().is_empty()) {
        Some(l) if l.contains('\t') => '\t',
        Some(_) => ',',
        None => return Ok(RawInteractions::default()),
    };
    let mut raw = RawInteractions::default();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(sep);
        let user = cols.next().map(str::trim).unwrap_or("");
        let item = cols.next().map(str::trim).unwrap_or("");
        if user.is_empty() || item.is_empty() {
            return Err(Error::parse(
                origin,
                lineno + 1,
                format!("expected `user{}item`, got {line:?}", sep.escape_default()),
            ));
        }
        let edge = (raw.users.intern(user), raw.items.intern(item));
        if seen.insert(edge) {
            raw.edges.push(edge);
        }
    }
    Ok(raw)
}

/// Iteratively drops users and items with fewer than `threshold` edges
/// until every remaining node meets it. Surviving edges keep input order.
pub fn kcore_filter(edges: &[Edge], threshold: usize) -> Vec<Edge> {
    assert!(threshold >= 1, "k-core threshold must be at least 1");
    let n_users = edges.iter().map(|e| e.0 as usize + 1).max().unwrap_or(0);
    let n_items = edges.iter().map(|e| e.1 as usize + 1).max().unwrap_or(0);
    let mut user_deg = vec![0usize; n_users];
    let mut item_deg = vec![0usize; n_items];
    let mut user_edges = vec![Vec::new(); n_users];
    let mut item_edges = vec![Vec::new(); n_items];
    for (i, &(u, v)) in edges.iter().enumerate() {
        user_deg[u as usize] += 1;
        item_deg[v as usize] += 1;
        user_edges[u as usize].push(i);
        item_edges[v as usize].push(i);
    }

    let mut alive = vec![true; edges.len()];
    let mut user_gone = vec![false; n_users];
    let mut item_gone = vec![false; n_items];
    // Worklist of nodes whose degree fell below threshold: (is_user, id).
    let mut queue: Vec<(bool, usize)> = Vec::new();
    queue.extend((0..n_users).filter(|&u| user_deg[u] < threshold).map(|u| (true, u)));
    queue.extend((0..n_items).filter(|&v| item_deg[v] < threshold).map(|v| (false, v)));

    while let Some((is_user, id)) = queue.pop() {
        let (gone, incident) = if is_user {
            (&mut user_gone[id], &user_edges[id])
        } else {
            (&mut item_gone[id], &item_edges[id])
        };
        if *gone {
            continue;
        }
        *gone = true;
        for &ei in incident {
            if !alive[ei] {
                continue;
            }
            alive[ei] = false;
            let (u, v) = edges[ei];
            let (u, v) = (u as usize, v as usize);
            if is_user {
                item_deg[v] -= 1;
                if item_deg[v] + 1 == threshold {
                    queue.push((false, v));
                }
            } else {
                user_deg[u] -= 1;
                if user_deg[u] + 1 == threshold {
                    queue.push((true, u));
                }
            }
        }
    }

    edges
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(&e, _)| e)
        .collect()
}

/// Re-indexes the surviving edges to dense ids in first-appearance order.
pub fn compact(raw: &RawInteractions, edges: &[Edge]) -> RawInteractions {
    let mut out = RawInteractions::default();
    for &(u, v) in edges {
        let nu = out.users.intern(raw.users.token(u));
        let nv = out.items.intern(raw.items.token(v));
        out.edges.push((nu, nv));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub train_ratio: f64,
    pub val_ratio_of_train: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            val_ratio_of_train: 0.1,
            seed: 2024,
        }
    }
}

/// Users, items, the three disjoint edge splits, and train adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub train: Vec<Edge>,
    pub val: Vec<Edge>,
    pub test: Vec<Edge>,
    /// Train items per user, in train-edge order.
    user_items: Vec<Vec<u32>>,
    /// Train users per item, in train-edge order.
    item_users: Vec<Vec<u32>>,
}

impl InteractionDataset {
    pub fn new(
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
        train: Vec<Edge>,
        val: Vec<Edge>,
        test: Vec<Edge>,
    ) -> Self {
        let mut user_items = vec![Vec::new(); user_tokens.len()];
        let mut item_users = vec![Vec::new(); item_tokens.len()];
        for &(u, v) in &train {
            user_items[u as usize].push(v);
            item_users[v as usize].push(u);
        }
        Self {
            user_tokens,
            item_tokens,
            train,
            val,
            test,
            user_items,
            item_users,
        }
    }

    /// Dataset whose tokens are the decimal ids.
    pub fn from_edges(n_users: usize, n_items: usize, train: Vec<Edge>, val: Vec<Edge>, test: Vec<Edge>) -> Self {
        Self::new(
            (0..n_users).map(|u| u.to_string()).collect(),
            (0..n_items).map(|v| v.to_string()).collect(),
            train,
            val,
            test,
        )
    }

    pub fn n_users(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_tokens.len()
    }

    /// `M_u`: train items of `user`.
    pub fn user_items(&self, user: u32) -> &[u32] {
        &self.user_items[user as usize]
    }

    /// `M_v`: train users of `item`.
    pub fn item_users(&self, item: u32) -> &[u32] {
        &self.item_users[item as usize]
    }

    pub fn per_user(&self, edges: &[Edge]) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for &(u, v) in edges {
            out[u as usize].push(v);
        }
        out
    }

    pub fn write_splits(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, edges) in [("train.tsv", &self.train), ("val.tsv", &self.val), ("test.tsv", &self.test)] {
            let mut s = String::new();
            for &(u, v) in edges.iter() {
                let _ = writeln!(s, "{u}\t{v}");
            }
            write_text(&dir.join(name), &s)?;
        }
        let mut s = String::new();
        for (id, t) in self.user_tokens.iter().enumerate() {
            let _ = writeln!(s, "user\t{t}\t{id}");
        }
        for (id, t) in self.item_tokens.iter().enumerate() {
            let _ = writeln!(s, "item\t{t}\t{id}");
        }
        write_text(&dir.join("vocab.tsv"), &s)
    }

    pub fn read_splits(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.tsv");
        let mut users = Vec::new();
        let mut items = Vec::new();
        for (i, line) in read_text(&vocab_path)?.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::parse(&vocab_path, i + 1, "expected `kind\\ttoken\\tid`");
            if cols.len() != 3 {
                return Err(bad());
            }
            let id: usize = cols[2].parse().map_err(|_| bad())?;
            let target = match cols[0] {
                "user" => &mut users,
                "item" => &mut items,
                _ => return Err(bad()),
            };
            if id != target.len() {
                return Err(Error::parse(&vocab_path, i + 1, "ids must be dense and ascending"));
            }
            target.push(cols[1].to_owned());
        }
        let read_edges = |name: &str| -> Result<Vec<Edge>> {
            let path = dir.join(name);
            let mut out = Vec::new();
            for (i, line) in read_text(&path)?.lines().enumerate() {
                let bad = || Error::parse(&path, i + 1, "expected `user_id\\titem_id`");
                let (u, v) = line.split_once('\t').ok_or_else(bad)?;
                let u: u32 = u.parse().map_err(|_| bad())?;
                let v: u32 = v.parse().map_err(|_| bad())?;
                if u as usize >= users.len() || v as usize >= items.len() {
                    return Err(Error::parse(&path, i + 1, "id outside vocabulary"));
                }
                out.push((u, v));
            }
            Ok(out)
        };
        let train = read_edges("train.tsv")?;
        let val = read_edges("val.tsv")?;
        let test = read_edges("test.tsv")?;
        Ok(Self::new(users, items, train, val, test))
    }
}

/// Number of a user's `n` interactions that go to test.
pub fn test_count(n: usize, train_ratio: f64) -> usize {
    if n < 2 {
        return 0;
    }
    let t = ((1.0 - train_ratio) * n as f64 + 1e-9).floor() as usize;
    t.clamp(1, n - 1)
}

/// Per-user random holdout of `max(1, floor((1 - train_ratio) n))` edges
/// to test; then a global uniform sample of the train pool moves to
/// validation, never emptying a user's train set.
pub fn split_dataset(raw: &RawInteractions, cfg: &SplitConfig) -> Result<InteractionDataset> {
    for (name, r) in [("train_ratio", cfg.train_ratio), ("val_ratio_of_train", cfg.val_ratio_of_train)] {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("{name} must lie in (0, 1), got {r}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_users = raw.users.len();
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); n_users];
    for (i, &(u, _)) in raw.edges.iter().enumerate() {
        by_user[u as usize].push(i);
    }
    // 0 = train, 1 = val, 2 = test
    let mut fate = vec![0u8; raw.edges.len()];
    for idx in by_user.iter_mut() {
        let n_test = test_count(idx.len(), cfg.train_ratio);
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..n_test] {
            fate[i] = 2;
        }
    }

    let mut pool: Vec<usize> = (0..raw.edges.len()).filter(|&i| fate[i] == 0).collect();
    let n_val = (pool.len() as f64 * cfg.val_ratio_of_train + 1e-9).floor() as usize;
    let mut train_left = vec![0usize; n_users];
    for &i in &pool {
        train_left[raw.edges[i].0 as usize] += 1;
    }
    pool.shuffle(&mut rng);
    let mut moved = 0;
    for &i in &pool {
        if moved == n_val {
            break;
        }
        let u = raw.edges[i].0 as usize;
        if train_left[u] > 1 {
            train_left[u] -= 1;
            fate[i] = 1;
            moved += 1;
        }
    }

    let mut splits = [Vec::new(), Vec::new(), Vec::new()];
    for (i, &e) in raw.edges.iter().enumerate() {
        splits[fate[i] as usize].push(e);
    }
    let [train, val, test] = splits;
    Ok(InteractionDataset::new(
        raw.users.tokens().to_vec(),
        raw.items.tokens().to_vec(),
        train,
        val,
        test,
    ))
}
