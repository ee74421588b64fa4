//! All-ranking evaluation: Recall@k, NDCG@k and activity-quartile breakdown.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::FinalEmbeddings;
use crate::scalar::Scalar;

/// Anything that can score every item for a user.
pub trait ScoreSource: Sync {
    fn n_items(&self) -> usize;
    fn score_user(&self, user: u32, out: &mut [f64]);
}

impl<T: Scalar> ScoreSource for FinalEmbeddings<T> {
    fn n_items(&self) -> usize {
        self.items.rows()
    }

    fn score_user(&self, user: u32, out: &mut [f64]) {
        for (v, o) in out.iter_mut().enumerate() {
            *o = self.score(user, v as u32).to_f64_lossy();
        }
    }
}

/// Precomputed `users x items` score table.
impl ScoreSource for Matrix<f64> {
    fn n_items(&self) -> usize {
        self.cols()
    }

    fn score_user(&self, user: u32, out: &mut [f64]) {
        out.copy_from_slice(self.row(user as usize));
    }
}

fn by_score_then_id(scores: &[f64]) -> impl Fn(&u32, &u32) -> Ordering + '_ {
    move |&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Every item not in `exclude`, by descending score, ties by ascending id.
pub fn rank_candidates(scores: &[f64], exclude: &[u32]) -> Vec<u32> {
    let excluded: HashSet<u32> = exclude.iter().copied().collect();
    let mut ranked: Vec<u32> = (0..scores.len() as u32).filter(|v| !excluded.contains(v)).collect();
    ranked.sort_by(by_score_then_id(scores));
    ranked
}

/// Leading `k` entries of [`rank_candidates`] without a full sort.
pub fn top_candidates(scores: &[f64], exclude: &HashSet<u32>, k: usize) -> Vec<u32> {
    let mut ranked: Vec<u32> = (0..scores.len() as u32).filter(|v| !exclude.contains(v)).collect();
    let cmp = by_score_then_id(scores);
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k, &cmp);
        ranked.truncate(k);
    }
    ranked.sort_by(cmp);
    ranked
}

/// `|top-k ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|v| relevant.contains(v)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-gain NDCG with `1 / log2(position + 1)` discounts.
pub fn ndcg_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, v)| relevant.contains(v))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    Some(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// Rank against validation items, excluding train items.
    Validation,
    /// Rank against test items, excluding train and validation items.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub n_train: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// 1 = least active quartile.
    pub group: usize,
    pub n_users: usize,
    pub min_train: usize,
    pub max_train: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    /// Mean over evaluated users, aligned with `ks`.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub per_user: Vec<UserMetrics>,
    #[serde(default)]
    pub groups: Vec<GroupMetrics>,
}

impl MetricReport {
    fn position(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|i| self.ndcg[i])
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header row plus one `overall` row and one row per group.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scope\tusers");
        for k in &self.ks {
            let _ = write!(s, "\trecall@{k}\tndcg@{k}");
        }
        s.push('\n');
        let mut row = |name: &str, n: usize, r: &[f64], d: &[f64]| {
            let _ = write!(s, "{name}\t{n}");
            for (a, b) in r.iter().zip(d) {
                let _ = write!(s, "\t{a:.6}\t{b:.6}");
            }
            s.push('\n');
        };
        row("overall", self.n_users(), &self.recall, &self.ndcg);
        for g in &self.groups {
            row(&format!("group{:02}", g.group), g.n_users, &g.recall, &g.ndcg);
        }
        s
    }
}

fn mean_columns(rows: &[&UserMetrics], n_ks: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = vec![0.0; n_ks];
    let mut d = vec![0.0; n_ks];
    for m in rows {
        for i in 0..n_ks {
            r[i] += m.recall[i];
            d[i] += m.ndcg[i];
        }
    }
    let n = rows.len().max(1) as f64;
    (r.into_iter().map(|x| x / n).collect(), d.into_iter().map(|x| x / n).collect())
}

/// Mean per-user Recall@k and NDCG@k over users with at least one target item.
pub fn evaluate(model: &dyn ScoreSource, ds: &InteractionDataset, split: EvalSplit, ks: &[usize]) -> MetricReport {
    let n_items = ds.n_items();
    assert_eq!(model.n_items(), n_items, "model and dataset disagree on item count");
    let targets = match split {
        EvalSplit::Validation => ds.per_user(&ds.val),
        EvalSplit::Test => ds.per_user(&ds.test),
    };
    let val = ds.per_user(&ds.val);
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let per_user: Vec<UserMetrics> = (0..ds.n_users() as u32)
        .into_par_iter()
        .filter(|&u| !targets[u as usize].is_empty())
        .map_init(
            || vec![0.0; n_items],
            |scores, u| {
                model.score_user(u, scores);
                let mut exclude: HashSet<u32> = ds.user_items(u).iter().copied().collect();
                if split == EvalSplit::Test {
                    exclude.extend(val[u as usize].iter().copied());
                }
                let ranked = top_candidates(scores, &exclude, max_k);
                let relevant: HashSet<u32> = targets[u as usize].iter().copied().collect();
                UserMetrics {
                    user: u,
                    n_train: ds.user_items(u).len(),
                    recall: ks.iter().map(|&k| recall_at_k(&ranked, &relevant, k).unwrap()).collect(),
                    ndcg: ks.iter().map(|&k| ndcg_at_k(&ranked, &relevant, k).unwrap()).collect(),
                }
            },
        )
        .collect();
    let rows: Vec<&UserMetrics> = per_user.iter().collect();
    let (recall, ndcg) = mean_columns(&rows, ks.len());
    MetricReport {
        ks: ks.to_vec(),
        recall,
        ndcg,
        per_user,
        groups: Vec::new(),
    }
}

/// Splits evaluated users into four balanced quartiles by train-interaction
/// count (ties by user id), least active first, and averages each group.
pub fn sparsity_groups(report: &MetricReport) -> Result<Vec<GroupMetrics>> {
    const GROUPS: usize = 4;
    let n = report.per_user.len();
    if n < GROUPS {
        return Err(Error::Config(format!("sparsity groups need at least 4 evaluated users, got {n}")));
    }
    let mut users: Vec<&UserMetrics> = report.per_user.iter().collect();
    users.sort_by_key(|m| (m.n_train, m.user));
    let mut out = Vec::with_capacity(GROUPS);
    let mut start = 0;
    for g in 0..GROUPS {
        let size = n / GROUPS + usize::from(g < n % GROUPS);
        let members = &users[start..start + size];
        let (recall, ndcg) = mean_columns(members, report.ks.len());
        out.push(GroupMetrics {
            group: g + 1,
            n_users: size,
            min_train: members.first().map_or(0, |m| m.n_train),
            max_train: members.last().map_or(0, |m| m.n_train),
            recall,
            ndcg,
        });
        start += size;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[u32]) -> HashSet<u32> {
        xs.iter().copied().collect()
    }

    #[test]
    fn candidates_exclude_and_break_ties() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(rank_candidates(&scores, &[1, 4, 7]).len(), 7);
        let tied = [0.5, 1.0, 1.0, 0.2];
        assert_eq!(rank_candidates(&tied, &[]), vec![1, 2, 0, 3]);
        assert_eq!(rank_candidates(&[0.0; 5], &[2]), vec![0, 1, 3, 4]);
    }

    #[test]
    fn top_candidates_agree_with_full_ranking() {
        let scores = [0.3, 0.9, 0.1, 0.9, 0.5, 0.7, 0.0];
        let full = rank_candidates(&scores, &[5]);
        for k in 0..8 {
            let top = top_candidates(&scores, &set(&[5]), k);
            assert_eq!(top, full[..k.min(full.len())].to_vec());
        }
    }

    #[test]
    fn recall_examples() {
        let ranked = [3, 1, 4, 0, 2];
        assert_eq!(recall_at_k(&ranked, &set(&[3, 1]), 2), Some(1.0));
        assert_eq!(recall_at_k(&ranked, &set(&[0, 2]), 2), Some(0.0));
        assert_eq!(recall_at_k(&ranked, &set(&[1, 2]), 3), Some(0.5));
        assert_eq!(recall_at_k(&ranked, &set(&[]), 3), None);
    }

    #[test]
    fn ndcg_examples() {
        let ranked = [7, 8, 9, 10];
        assert_eq!(ndcg_at_k(&ranked, &set(&[7, 8]), 4), Some(1.0));
        let single = ndcg_at_k(&ranked, &set(&[8]), 2).unwrap();
        assert!((single - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((single - 0.63093).abs() < 1e-5);
        // relevant {a, b}, ranking [a, x, b]
        let v = ndcg_at_k(&[1, 0, 2], &set(&[1, 2]), 3).unwrap();
        assert!((v - 0.91972).abs() < 1e-5, "{v}");
    }

    fn toy_dataset() -> InteractionDataset {
        // 3 users, 5 items
        InteractionDataset::from_edges(
            3,
            5,
            vec![(0, 0), (1, 1), (1, 2), (2, 4)],
            vec![(0, 3)],
            vec![(0, 1), (1, 0), (1, 4), (2, 3)],
        )
    }

    #[test]
    fn all_zero_scores_rank_by_id() {
        // user 0: excluded {0, 3} -> [1, 2, 4]; test {1} at rank 1
        // user 1: excluded {1, 2} -> [0, 3, 4]; test {0, 4} at ranks 1, 3
        // user 2: excluded {4}    -> [0, 1, 2, 3]; test {3} at rank 4
        let ds = toy_dataset();
        let scores = Matrix::<f64>::zeros(3, 5);
        let r = evaluate(&scores, &ds, EvalSplit::Test, &[2, 3]);
        let l = |p: f64| 1.0 / (p + 1.0).log2();
        let recall2 = (1.0 + 0.5 + 0.0) / 3.0;
        let recall3 = (1.0 + 1.0 + 0.0) / 3.0;
        let ndcg2 = (1.0 + l(1.0) / (l(1.0) + l(2.0)) + 0.0) / 3.0;
        let ndcg3 = (1.0 + (l(1.0) + l(3.0)) / (l(1.0) + l(2.0)) + 0.0) / 3.0;
        assert!((r.recall_at(2).unwrap() - recall2).abs() < 1e-12);
        assert!((r.recall_at(3).unwrap() - recall3).abs() < 1e-12);
        assert!((r.ndcg_at(2).unwrap() - ndcg2).abs() < 1e-12);
        assert!((r.ndcg_at(3).unwrap() - ndcg3).abs() < 1e-12);
    }

    #[test]
    fn perfect_scores_give_ones() {
        let ds = toy_dataset();
        let mut scores = Matrix::<f64>::zeros(3, 5);
        for &(u, v) in &ds.test {
            scores.row_mut(u as usize)[v as usize] = f64::INFINITY;
        }
        let r = evaluate(&scores, &ds, EvalSplit::Test, &[10, 20]);
        assert!(r.recall.iter().chain(&r.ndcg).all(|&x| x == 1.0));
    }

    #[test]
    fn users_without_targets_are_skipped() {
        let ds = toy_dataset();
        let r = evaluate(&Matrix::<f64>::zeros(3, 5), &ds, EvalSplit::Validation, &[20]);
        assert_eq!(r.n_users(), 1);
        assert_eq!(r.per_user[0].user, 0);
    }

    fn report_with_counts(counts: &[usize]) -> MetricReport {
        MetricReport {
            ks: vec![20],
            recall: vec![0.0],
            ndcg: vec![0.0],
            per_user: counts
                .iter()
                .enumerate()
                .map(|(u, &n)| UserMetrics {
                    user: u as u32,
                    n_train: n,
                    recall: vec![n as f64 / 10.0],
                    ndcg: vec![0.0],
                })
                .collect(),
            groups: vec![],
        }
    }

    #[test]
    fn quartiles() {
        let g = sparsity_groups(&report_with_counts(&[8, 7, 6, 5, 4, 3, 2, 1])).unwrap();
        assert!(g.iter().all(|x| x.n_users == 2));
        assert_eq!((g[0].min_train, g[0].max_train), (1, 2));
        assert!((g[0].recall[0] - 0.15).abs() < 1e-12);

        let g = sparsity_groups(&report_with_counts(&[3, 3, 3, 3, 3, 1, 9])).unwrap();
        let sizes: Vec<usize> = g.iter().map(|x| x.n_users).collect();
        assert_eq!(sizes, vec![2, 2, 2, 1]);
        assert!(sparsity_groups(&report_with_counts(&[1, 2, 3])).is_err());
    }

    #[test]
    fn tsv_has_group_rows() {
        let mut r = report_with_counts(&[1, 2, 3, 4]);
        r.groups = sparsity_groups(&r).unwrap();
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 6);
        assert!(tsv.starts_with("scope\tusers\trecall@20\tndcg@20\n"));
        assert!(tsv.contains("group01\t1\t"));
    }
}
