//! Exact top-k semantic neighbor graph over items.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{read_text, write_text};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot, Scalar};

pub fn cosine_similarity<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", x.len(), y.len())));
    }
    let nx = dot(x, x).sqrt();
    let ny = dot(y, y).sqrt();
    if nx == T::zero() || ny == T::zero() {
        return Err(Error::ZeroVector("cosine operand".into()));
    }
    Ok(dot(x, y) / (nx * ny))
}

/// Per-item neighbor lists, descending similarity, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemItemGraph {
    k: usize,
    neighbors: Vec<Vec<(u32, f64)>>,
}

/// Orders by similarity descending, then id ascending.
fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

impl ItemItemGraph {
    /// Graph with no neighbors for any of `n_items` items.
    pub fn empty(n_items: usize) -> Self {
        Self {
            k: 0,
            neighbors: vec![Vec::new(); n_items],
        }
    }

    pub fn from_lists(k: usize, neighbors: Vec<Vec<(u32, f64)>>) -> Self {
        Self { k, neighbors }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_items(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, item: u32) -> &[(u32, f64)] {
        &self.neighbors[item as usize]
    }

    pub fn neighbor_ids(&self, item: u32) -> impl Iterator<Item = u32> + '_ {
        self.neighbors(item).iter().map(|&(j, _)| j)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            let _ = write!(s, "{i}\t");
            for (n, (j, sim)) in list.iter().enumerate() {
                if n > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{j}:{sim:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut neighbors = Vec::new();
        let mut k = 0;
        for (i, line) in text.lines().enumerate() {
            let bad = |m: &str| Error::parse(path, i + 1, m.to_owned());
            let (id, rest) = line.split_once('\t').ok_or_else(|| bad("expected `item\\tneighbors`"))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(bad("item ids must be dense and ascending"));
            }
            let mut list = Vec::new();
            for pair in rest.split(' ').filter(|p| !p.is_empty()) {
                let (j, sim) = pair.split_once(':').ok_or_else(|| bad("expected `id:similarity`"))?;
                let j: u32 = j.parse().map_err(|_| bad("bad neighbor id"))?;
                let sim: f64 = sim.parse().map_err(|_| bad("bad similarity"))?;
                list.push((j, sim));
            }
            k = k.max(list.len());
            neighbors.push(list);
        }
        for list in &neighbors {
            if list.iter().any(|&(j, _)| j as usize >= neighbors.len()) {
                return Err(Error::parse(path, 0, "neighbor id outside item range"));
            }
        }
        Ok(Self { k, neighbors })
    }
}

/// Exact top-`k` cosine neighbors of every row of `vectors` (one row per item).
pub fn top_k_neighbors<T: Scalar>(vectors: &Matrix<T>, k: usize) -> Result<ItemItemGraph> {
    let n = vectors.rows();
    let norms: Vec<T> = (0..n).map(|i| dot(vectors.row(i), vectors.row(i)).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&x| x == T::zero() || !x.is_finite()) {
        return Err(Error::ZeroVector(format!("item {i}")));
    }
    if k == 0 {
        return Ok(ItemItemGraph::empty(n));
    }
    let keep = k.min(n.saturating_sub(1));
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = vectors.row(i);
            let mut sims: Vec<(u32, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let s = dot(xi, vectors.row(j)) / (norms[i] * norms[j]);
                    (j as u32, s.to_f64_lossy())
                })
                .collect();
            if keep < sims.len() {
                sims.select_nth_unstable_by(keep, rank_order);
                sims.truncate(keep);
            }
            sims.sort_by(rank_order);
            sims
        })
        .collect();
    Ok(ItemItemGraph { k, neighbors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        let x = [3.0f64, -1.0, 2.0];
        assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 1.0]), Err(Error::ZeroVector(_))));
    }

    fn random(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn k_zero_and_saturation() {
        let m = random(6, 4, 1);
        let g0 = top_k_neighbors(&m, 0).unwrap();
        assert!((0..6).all(|i| g0.neighbors(i).is_empty()));
        let g = top_k_neighbors(&m, 10).unwrap();
        for i in 0..6u32 {
            let list = g.neighbors(i);
            assert_eq!(list.len(), 5);
            assert!(list.iter().all(|&(j, _)| j != i));
            assert!(list.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn zero_vector_is_named() {
        let mut m = random(4, 3, 2);
        m.row_mut(2).iter_mut().for_each(|x| *x = 0.0);
        let err = top_k_neighbors(&m, 1).unwrap_err();
        assert!(err.to_string().contains("item 2"));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        // items 1, 2, 3 are identical; 0 sees them all at the same similarity.
        let m = Matrix::from_vec(4, 2, vec![1.0f64, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let g = top_k_neighbors(&m, 2).unwrap();
        assert_eq!(g.neighbor_ids(0).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(g.neighbor_ids(3).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn text_file_round_trip() {
        let g = top_k_neighbors(&random(8, 5, 3), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.tsv");
        g.save(&p).unwrap();
        let back = ItemItemGraph::load(&p).unwrap();
        assert_eq!(back.k(), 3);
        for i in 0..8 {
            let a: Vec<u32> = g.neighbor_ids(i).collect();
            let b: Vec<u32> = back.neighbor_ids(i).collect();
            assert_eq!(a, b);
            for (x, y) in g.neighbors(i).iter().zip(back.neighbors(i)) {
                assert!((x.1 - y.1).abs() <= 5e-7);
            }
        }
        assert!(g.to_text().lines().next().unwrap().contains(':'));
    }

    proptest! {
        #[test]
        fn scale_invariance_and_symmetry(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let m = random(12, 6, seed);
            let mut scaled = m.clone();
            scaled.scale(scale);
            let a = top_k_neighbors(&m, 4).unwrap();
            let b = top_k_neighbors(&scaled, 4).unwrap();
            for i in 0..12 {
                prop_assert_eq!(a.neighbor_ids(i).collect::<Vec<_>>(), b.neighbor_ids(i).collect::<Vec<_>>());
                for &(j, s) in a.neighbors(i) {
                    let x = cosine_similarity(m.row(i as usize), m.row(j as usize)).unwrap();
                    prop_assert!((s - x).abs() < 1e-6);
                    if let Some(&(_, back)) = a.neighbors(j).iter().find(|&&(t, _)| t == i) {
                        prop_assert!((back - s).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>()) {
            let n = 10;
            let m = random(n, 5, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            // row perm[i] of the relabeled matrix is row i of the original
            let mut relabeled = Matrix::zeros(n, 5);
            for i in 0..n {
                relabeled.row_mut(perm[i]).copy_from_slice(m.row(i));
            }
            let a = top_k_neighbors(&m, 3).unwrap();
            let b = top_k_neighbors(&relabeled, 3).unwrap();
            for i in 0..n {
                let mapped: Vec<u32> = a.neighbor_ids(i as u32).map(|j| perm[j as usize] as u32).collect();
                prop_assert_eq!(mapped, b.neighbor_ids(perm[i] as u32).collect::<Vec<_>>());
            }
        }
    }
}
