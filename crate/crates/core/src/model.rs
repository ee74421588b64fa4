//! Forward model: semantic adapters, fusion, attention-based neighbor
//! augmentation, LightGCN propagation and inner-product scoring.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::item_graph::ItemItemGraph;
use crate::matrix::Matrix;
use crate::scalar::{axpy, dot, elu, leaky_relu, Scalar};

pub const LEAKY_SLOPE: f64 = 0.2;
const CHECKPOINT_MAGIC: &[u8; 4] = b"CLKM";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_users: usize,
    pub n_items: usize,
    /// ID embedding size.
    pub d: usize,
    /// Semantic embedding size.
    pub d_s: usize,
    /// Attention projection size.
    pub d_a: usize,
    /// Propagation layers.
    pub layers: usize,
}

/// Which parts of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switches {
    pub item_semantic: bool,
    pub user_semantic: bool,
    pub neighbor_aug: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            item_semantic: true,
            user_semantic: true,
            neighbor_aug: true,
        }
    }
}

impl Switches {
    pub const PLAIN_LIGHTGCN: Switches = Switches {
        item_semantic: false,
        user_semantic: false,
        neighbor_aug: false,
    };
}

/// Trainable parameters. The same layout doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub dims: ModelDims,
    /// `E_u`, `n_users x d`.
    pub user_emb: Matrix<T>,
    /// `E_v`, `n_items x d`.
    pub item_emb: Matrix<T>,
    /// Item adapter `W1`, `d x d_s`.
    pub item_adapter: Matrix<T>,
    /// User adapter `W2`, `d x d_s`.
    pub user_adapter: Matrix<T>,
    /// Attention projection, `d_a x d_s` (applied to frozen semantic vectors).
    pub att_proj: Matrix<T>,
    /// Attention vector, `1 x 2 d_a`.
    pub att_vec: Matrix<T>,
}

pub type Gradients<T> = ModelState<T>;

impl<T: Scalar> ModelState<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            user_emb: Matrix::zeros(dims.n_users, dims.d),
            item_emb: Matrix::zeros(dims.n_items, dims.d),
            item_adapter: Matrix::zeros(dims.d, dims.d_s),
            user_adapter: Matrix::zeros(dims.d, dims.d_s),
            att_proj: Matrix::zeros(dims.d_a, dims.d_s),
            att_vec: Matrix::zeros(1, 2 * dims.d_a),
        }
    }

    /// ID embeddings ~ N(0, 0.1^2); dense weights Xavier-uniform.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.1).expect("valid std");
        let mut gauss = |rows, cols| Matrix::from_fn(rows, cols, |_, _| T::of(normal.sample(&mut rng)));
        let user_emb = gauss(dims.n_users, dims.d);
        let item_emb = gauss(dims.n_items, dims.d);
        let mut xavier = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..bound)))
        };
        let item_adapter = xavier(dims.d, dims.d_s);
        let user_adapter = xavier(dims.d, dims.d_s);
        let att_proj = xavier(dims.d_a, dims.d_s);
        let att_vec = xavier(1, 2 * dims.d_a);
        Self {
            dims,
            user_emb,
            item_emb,
            item_adapter,
            user_adapter,
            att_proj,
            att_vec,
        }
    }

    /// Parameter tables in checkpoint order.
    pub fn tensors(&self) -> [&Matrix<T>; 6] {
        [
            &self.user_emb,
            &self.item_emb,
            &self.item_adapter,
            &self.user_adapter,
            &self.att_proj,
            &self.att_vec,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 6] {
        [
            &mut self.user_emb,
            &mut self.item_emb,
            &mut self.item_adapter,
            &mut self.user_adapter,
            &mut self.att_proj,
            &mut self.att_vec,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            dims: self.dims,
            user_emb: self.user_emb.cast(),
            item_emb: self.item_emb.cast(),
            item_adapter: self.item_adapter.cast(),
            user_adapter: self.user_adapter.cast(),
            att_proj: self.att_proj.cast(),
            att_vec: self.att_vec.cast(),
        }
    }

    fn check_inputs(&self, inputs: &ModelInputs<'_, T>, sw: Switches) -> Result<()> {
        let dims = self.dims;
        let g = inputs.graph;
        if g.n_users() != dims.n_users || g.n_items() != dims.n_items {
            return Err(Error::Shape(format!(
                "interaction graph is {}x{}, model is {}x{}",
                g.n_users(),
                g.n_items(),
                dims.n_users,
                dims.n_items
            )));
        }
        let need_items = sw.item_semantic || inputs.attention_active(sw);
        for (name, needed, m, rows) in [
            ("item", need_items, inputs.item_semantic, dims.n_items),
            ("user", sw.user_semantic, inputs.user_semantic, dims.n_users),
        ] {
            match (needed, m) {
                (true, None) => {
                    return Err(Error::Config(format!("{name} semantic embeddings required by the enabled model paths")))
                }
                (true, Some(m)) if m.shape() != (rows, dims.d_s) => {
                    return Err(Error::Shape(format!(
                        "{name} semantic table is {:?}, expected ({rows}, {})",
                        m.shape(),
                        dims.d_s
                    )))
                }
                _ => {}
            }
        }
        if let Some(n) = inputs.neighbors {
            if n.n_items() != dims.n_items {
                return Err(Error::Shape(format!(
                    "item graph covers {} items, model has {}",
                    n.n_items(),
                    dims.n_items
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass over every user and item, recording what backward needs.
    pub fn forward(
        &self,
        inputs: &ModelInputs<'_, T>,
        sw: Switches,
        dropout: Option<&DropoutMasks<T>>,
    ) -> Result<ForwardTrace<T>> {
        self.check_inputs(inputs, sw)?;
        let dims = self.dims;
        let half = T::of(0.5);

        let (item_pre, h_items) = fused_embeddings(&self.item_emb, &self.item_adapter, inputs.item_semantic, sw.item_semantic);
        let (user_pre, h_users) = fused_embeddings(&self.user_emb, &self.user_adapter, inputs.user_semantic, sw.user_semantic);

        // attention-based augmentation
        let mut attention = None;
        let mut h0_items = h_items.clone();
        if inputs.attention_active(sw) {
            let sem = inputs.item_semantic.expect("checked");
            let graph = inputs.neighbors.expect("checked");
            let proj = project_rows(&self.att_proj, sem);
            let (a_src, a_dst) = self.att_vec.as_slice().split_at(dims.d_a);
            let src: Vec<T> = (0..dims.n_items).map(|i| dot(a_src, proj.row(i))).collect();
            let dst: Vec<T> = (0..dims.n_items).map(|i| dot(a_dst, proj.row(i))).collect();
            let mut raw = Vec::with_capacity(dims.n_items);
            let mut alpha = Vec::with_capacity(dims.n_items);
            let mut aug_pre = Matrix::zeros(dims.n_items, dims.d);
            for i in 0..dims.n_items {
                let nb: Vec<u32> = graph.neighbor_ids(i as u32).collect();
                let r: Vec<T> = nb.iter().map(|&j| src[i] + dst[j as usize]).collect();
                let logits: Vec<T> = r.iter().map(|&x| leaky_relu(x, T::of(LEAKY_SLOPE))).collect();
                let a = softmax(&logits);
                if !nb.is_empty() {
                    let neigh: Vec<&[T]> = nb.iter().map(|&j| h_items.row(j as usize)).collect();
                    let pre = augment_pre(h_items.row(i), &neigh, &a, half);
                    for (c, &p) in pre.iter().enumerate() {
                        h0_items.row_mut(i)[c] = elu(p);
                    }
                    aug_pre.row_mut(i).copy_from_slice(&pre);
                }
                raw.push(r);
                alpha.push(a);
            }
            attention = Some(AttentionTrace {
                proj,
                raw,
                alpha,
                aug_pre,
            });
        }

        let mut h0_users = h_users.clone();
        if let Some(m) = dropout {
            apply_mask(&mut h0_users, &m.users[0]);
            apply_mask(&mut h0_items, &m.items[0]);
        }
        let (user_layers, item_layers) = propagate_layers(inputs.graph, h0_users, h0_items, dims.layers, dropout);
        let final_users = layer_mean(&user_layers);
        let final_items = layer_mean(&item_layers);
        Ok(ForwardTrace {
            item_pre,
            user_pre,
            h_items,
            h_users,
            attention,
            user_layers,
            item_layers,
            final_users,
            final_items,
        })
    }

    /// Final user and item representations without dropout.
    pub fn final_embeddings(&self, inputs: &ModelInputs<'_, T>, sw: Switches) -> Result<FinalEmbeddings<T>> {
        let t = self.forward(inputs, sw, None)?;
        Ok(FinalEmbeddings {
            users: t.final_users,
            items: t.final_items,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        let d = self.dims;
        for x in [d.n_users, d.n_items, d.d, d.d_s, d.d_a, d.layers] {
            bytes.extend_from_slice(&(x as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for &x in t.as_slice() {
                bytes.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::parse(path, 0, m.to_owned());
        if bytes.len() < 28 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a CLKM checkpoint"));
        }
        let header: Vec<usize> = bytes[4..28]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let dims = ModelDims {
            n_users: header[0],
            n_items: header[1],
            d: header[2],
            d_s: header[3],
            d_a: header[4],
            layers: header[5],
        };
        let mut state = Self::zeros(dims);
        let expected: usize = state.tensors().iter().map(|t| t.as_slice().len()).sum();
        if bytes.len() != 28 + 4 * expected {
            return Err(bad("checkpoint size does not match its shape header"));
        }
        let mut floats = bytes[28..]
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64));
        for t in state.tensors_mut() {
            for x in t.as_mut_slice() {
                *x = floats.next().expect("length checked");
            }
        }
        Ok(state)
    }
}

fn fused_embeddings<T: Scalar>(
    id_emb: &Matrix<T>,
    adapter: &Matrix<T>,
    semantic: Option<&Matrix<T>>,
    enabled: bool,
) -> (Option<Matrix<T>>, Matrix<T>) {
    match (enabled, semantic) {
        (true, Some(sem)) => {
            let pre = project_rows(adapter, sem);
            let mut h = Matrix::zeros(id_emb.rows(), id_emb.cols());
            for r in 0..id_emb.rows() {
                let s_prime: Vec<T> = pre.row(r).iter().map(|&x| elu(x)).collect();
                h.row_mut(r).copy_from_slice(&fuse(id_emb.row(r), &s_prime));
            }
            (Some(pre), h)
        }
        _ => (None, id_emb.clone()),
    }
}

/// Row `r` of the result is `w * rows.row(r)`.
fn project_rows<T: Scalar>(w: &Matrix<T>, rows: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(rows.rows(), w.rows());
    for r in 0..rows.rows() {
        w.mul_vec_into(rows.row(r), out.row_mut(r));
    }
    out
}

fn apply_mask<T: Scalar>(m: &mut Matrix<T>, mask: &Matrix<T>) {
    for (x, &k) in m.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *x *= k;
    }
}

/// `ELU(W s)`: projects a semantic vector into the ID space.
pub fn adapter_forward<T: Scalar>(s: &[T], w: &Matrix<T>) -> Vec<T> {
    w.mul_vec(s).into_iter().map(elu).collect()
}

/// Mean pooling of an ID embedding and an adapted semantic embedding.
pub fn fuse<T: Scalar>(e: &[T], s_prime: &[T]) -> Vec<T> {
    let half = T::of(0.5);
    e.iter().zip(s_prime).map(|(&a, &b)| (a + b) * half).collect()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|x| x / z).collect()
}

/// Attention weights of `item` over `neighbors`, computed from the frozen
/// semantic vectors only: `softmax_j LeakyReLU(a . [P s_i || P s_j])`.
pub fn attention_weights<T: Scalar>(
    state: &ModelState<T>,
    item_semantic: &Matrix<T>,
    item: u32,
    neighbors: &[u32],
) -> Vec<T> {
    softmax(&attention_logits(state, item_semantic, item, neighbors))
}

pub fn attention_logits<T: Scalar>(
    state: &ModelState<T>,
    item_semantic: &Matrix<T>,
    item: u32,
    neighbors: &[u32],
) -> Vec<T> {
    let d_a = state.dims.d_a;
    let (a_src, a_dst) = state.att_vec.as_slice().split_at(d_a);
    let zi = state.att_proj.mul_vec(item_semantic.row(item as usize));
    let left = dot(a_src, &zi);
    neighbors
        .iter()
        .map(|&j| {
            let zj = state.att_proj.mul_vec(item_semantic.row(j as usize));
            leaky_relu(left + dot(a_dst, &zj), T::of(LEAKY_SLOPE))
        })
        .collect()
}

fn augment_pre<T: Scalar>(h_i: &[T], neighbor_h: &[&[T]], alpha: &[T], half: T) -> Vec<T> {
    let mut acc = h_i.to_vec();
    for (hj, &a) in neighbor_h.iter().zip(alpha) {
        axpy(a, hj, &mut acc);
    }
    acc.iter_mut().for_each(|x| *x *= half);
    acc
}

/// `ELU(½(h_i + Σ α_j h_j))`; with no neighbors `h_i` passes through unchanged.
pub fn augment_item<T: Scalar>(h_i: &[T], neighbor_h: &[&[T]], alpha: &[T]) -> Vec<T> {
    if neighbor_h.is_empty() {
        return h_i.to_vec();
    }
    augment_pre(h_i, neighbor_h, alpha, T::of(0.5))
        .into_iter()
        .map(elu)
        .collect()
}

pub fn predict<T: Scalar>(user: &[T], item: &[T]) -> T {
    dot(user, item)
}

/// Symmetrically normalized bipartite adjacency built from train edges.
#[derive(Debug, Clone)]
pub struct PropagationGraph<T> {
    /// Per user: `(item, 1/sqrt(|M_u||M_v|))`.
    user_adj: Vec<Vec<(u32, T)>>,
    /// Per item: `(user, coefficient)`.
    item_adj: Vec<Vec<(u32, T)>>,
}

impl<T: Scalar> PropagationGraph<T> {
    pub fn from_dataset(ds: &InteractionDataset) -> Self {
        Self::from_edges(ds.n_users(), ds.n_items(), &ds.train)
    }

    pub fn from_edges(n_users: usize, n_items: usize, edges: &[(u32, u32)]) -> Self {
        let mut ud = vec![0usize; n_users];
        let mut vd = vec![0usize; n_items];
        let mut uniq = edges.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        for &(u, v) in &uniq {
            ud[u as usize] += 1;
            vd[v as usize] += 1;
        }
        let mut user_adj = vec![Vec::new(); n_users];
        let mut item_adj = vec![Vec::new(); n_items];
        for &(u, v) in &uniq {
            let c = T::one() / T::of((ud[u as usize] * vd[v as usize]) as f64).sqrt();
            user_adj[u as usize].push((v, c));
            item_adj[v as usize].push((u, c));
        }
        Self { user_adj, item_adj }
    }

    pub fn n_users(&self) -> usize {
        self.user_adj.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_adj.len()
    }

    /// One propagation step in both directions: users gather items and vice versa.
    pub fn step(&self, users: &Matrix<T>, items: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let mut nu = Matrix::zeros(users.rows(), users.cols());
        let mut ni = Matrix::zeros(items.rows(), items.cols());
        for (u, adj) in self.user_adj.iter().enumerate() {
            let out = nu.row_mut(u);
            for &(v, c) in adj {
                axpy(c, items.row(v as usize), out);
            }
        }
        for (v, adj) in self.item_adj.iter().enumerate() {
            let out = ni.row_mut(v);
            for &(u, c) in adj {
                axpy(c, users.row(u as usize), out);
            }
        }
        (nu, ni)
    }
}

fn propagate_layers<T: Scalar>(
    graph: &PropagationGraph<T>,
    h0_users: Matrix<T>,
    h0_items: Matrix<T>,
    layers: usize,
    dropout: Option<&DropoutMasks<T>>,
) -> (Vec<Matrix<T>>, Vec<Matrix<T>>) {
    let mut us = vec![h0_users];
    let mut is = vec![h0_items];
    for l in 0..layers {
        let (mut nu, mut ni) = graph.step(&us[l], &is[l]);
        if let Some(m) = dropout {
            apply_mask(&mut nu, &m.users[l + 1]);
            apply_mask(&mut ni, &m.items[l + 1]);
        }
        us.push(nu);
        is.push(ni);
    }
    (us, is)
}

pub(crate) fn layer_mean<T: Scalar>(layers: &[Matrix<T>]) -> Matrix<T> {
    let mut out = Matrix::zeros(layers[0].rows(), layers[0].cols());
    for l in layers {
        out.add_scaled(T::one(), l);
    }
    out.scale(T::one() / T::of(layers.len() as f64));
    out
}

/// `L` propagation rounds followed by the mean over layers `0..=L`.
pub fn lightgcn_propagate<T: Scalar>(
    graph: &PropagationGraph<T>,
    h0_users: &Matrix<T>,
    h0_items: &Matrix<T>,
    layers: usize,
) -> (Matrix<T>, Matrix<T>) {
    let (us, is) = propagate_layers(graph, h0_users.clone(), h0_items.clone(), layers, None);
    (layer_mean(&us), layer_mean(&is))
}

/// Inverted-dropout masks: index 0 is embedding dropout on the layer-0
/// inputs, index `l >= 1` is message dropout on layer `l` outputs.
#[derive(Debug, Clone)]
pub struct DropoutMasks<T> {
    pub users: Vec<Matrix<T>>,
    pub items: Vec<Matrix<T>>,
}

impl<T: Scalar> DropoutMasks<T> {
    pub fn sample<R: Rng + ?Sized>(dims: ModelDims, rate: f64, rng: &mut R) -> Self {
        assert!((0.0..1.0).contains(&rate));
        let keep = T::of(1.0 / (1.0 - rate));
        let mut mk = |rows| Matrix::from_fn(rows, dims.d, |_, _| if rng.random::<f64>() < rate { T::zero() } else { keep });
        let mut users = Vec::with_capacity(dims.layers + 1);
        let mut items = Vec::with_capacity(dims.layers + 1);
        for _ in 0..=dims.layers {
            users.push(mk(dims.n_users));
            items.push(mk(dims.n_items));
        }
        Self { users, items }
    }
}

/// Read-only data the forward pass consumes besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ModelInputs<'a, T> {
    pub graph: &'a PropagationGraph<T>,
    pub item_semantic: Option<&'a Matrix<T>>,
    pub user_semantic: Option<&'a Matrix<T>>,
    pub neighbors: Option<&'a ItemItemGraph>,
}

impl<T> ModelInputs<'_, T> {
    /// Augmentation runs only when enabled and some item has a neighbor.
    pub fn attention_active(&self, sw: Switches) -> bool {
        sw.neighbor_aug && self.neighbors.is_some_and(|g| g.k() > 0)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    /// `P s_v` per item, `n_items x d_a`.
    pub proj: Matrix<T>,
    /// Pre-LeakyReLU logits per item, aligned with its neighbor list.
    pub raw: Vec<Vec<T>>,
    pub alpha: Vec<Vec<T>>,
    /// Pre-ELU augmentation input; rows of neighborless items are unused.
    pub aug_pre: Matrix<T>,
}

/// Intermediate activations of one full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub item_pre: Option<Matrix<T>>,
    pub user_pre: Option<Matrix<T>>,
    /// Fused item embeddings `h_v` (before augmentation).
    pub h_items: Matrix<T>,
    pub h_users: Matrix<T>,
    pub attention: Option<AttentionTrace<T>>,
    /// Layers `0..=L`, layer 0 after embedding dropout.
    pub user_layers: Vec<Matrix<T>>,
    pub item_layers: Vec<Matrix<T>>,
    pub final_users: Matrix<T>,
    pub final_items: Matrix<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn score(&self, user: u32, item: u32) -> T {
        predict(self.final_users.row(user as usize), self.final_items.row(item as usize))
    }
}

/// Final representations used for ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEmbeddings<T> {
    pub users: Matrix<T>,
    pub items: Matrix<T>,
}

impl<T: Scalar> FinalEmbeddings<T> {
    pub fn score(&self, user: u32, item: u32) -> T {
        predict(self.users.row(user as usize), self.items.row(item as usize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn adapter_examples() {
        let s = [0.3f64, -1.0, 2.0];
        assert_eq!(adapter_forward(&s, &Matrix::zeros(2, 3)), vec![0.0, 0.0]);
        let w = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(adapter_forward(&s, &w), vec![0.3, 2.0]);
        let w = Matrix::from_vec(1, 1, vec![-(2.0f64.ln())]);
        assert!((adapter_forward(&[1.0], &w)[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(&[1.0f64, -2.0], &[1.0, -2.0]), vec![1.0, -2.0]);
        assert_eq!(fuse(&[1.0f64, -2.0], &[0.0, 0.0]), vec![0.5, -1.0]);
        assert_eq!(fuse(&[1.0f64, 3.0], &[3.0, 1.0]), vec![2.0, 2.0]);
    }

    fn att_state(d_s: usize, d_a: usize, n_items: usize, seed: u64) -> ModelState<f64> {
        ModelState::init(
            ModelDims {
                n_users: 1,
                n_items,
                d: 2,
                d_s,
                d_a,
                layers: 1,
            },
            seed,
        )
    }

    #[test]
    fn attention_examples() {
        let st = att_state(3, 4, 4, 5);
        // items 1..3 share one semantic vector -> equal logits
        let sem = Matrix::from_vec(4, 3, vec![1.0, 0.0, 0.5, 0.2, 0.2, 0.9, 0.2, 0.2, 0.9, 0.2, 0.2, 0.9]);
        let a = attention_weights(&st, &sem, 0, &[1, 2, 3]);
        for x in &a {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(attention_weights(&st, &sem, 0, &[2]), vec![1.0]);
        assert!(attention_weights(&st, &sem, 0, &[]).is_empty());
        let p = softmax(&[2.0f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn augment_examples() {
        let h = [0.3f64, -0.7];
        assert_eq!(augment_item(&h, &[], &[]), h.to_vec());
        let pos = [0.4f64, 1.2];
        assert_eq!(augment_item(&pos, &[&pos], &[1.0]), pos.to_vec());
        assert_eq!(augment_item(&[2.0f64, 0.0], &[&[0.0, 2.0]], &[1.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[1.0f64, 0.0], &[0.0, 5.0]), 0.0);
        let h = [1.5f64, -2.0];
        assert_eq!(predict(&h, &h), 1.5 * 1.5 + 4.0);
        assert_eq!(predict(&[1.0f64, 2.0], &[3.0, -1.0]), 1.0);
    }

    #[test]
    fn propagation_examples() {
        let g = PropagationGraph::<f64>::from_edges(1, 1, &[(0, 0)]);
        let hu = Matrix::from_vec(1, 2, vec![1.0, 2.0]);
        let hv = Matrix::from_vec(1, 2, vec![-3.0, 0.5]);
        let (u0, v0) = lightgcn_propagate(&g, &hu, &hv, 0);
        assert_eq!((u0, v0), (hu.clone(), hv.clone()));
        let (u1, v1) = g.step(&hu, &hv);
        assert_eq!(u1, hv);
        assert_eq!(v1, hu);

        // isolated nodes keep only layer 0, divided by L+1
        let g = PropagationGraph::<f64>::from_edges(2, 2, &[]);
        let hu = Matrix::from_vec(2, 1, vec![3.0, -6.0]);
        let hv = Matrix::from_vec(2, 1, vec![9.0, 1.5]);
        let (fu, fv) = lightgcn_propagate(&g, &hu, &hv, 2);
        assert_eq!(fu.as_slice(), &[1.0, -2.0]);
        assert_eq!(fv.as_slice(), &[3.0, 0.5]);
    }

    proptest! {
        #[test]
        fn propagation_is_linear(seed in any::<u64>(), c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let edges: Vec<(u32, u32)> = (0..15).map(|_| (rng.random_range(0..5), rng.random_range(0..4))).collect();
            let g = PropagationGraph::<f64>::from_edges(5, 4, &edges);
            let hu = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
            let hv = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
            let (fu, fv) = lightgcn_propagate(&g, &hu, &hv, 3);
            let (mut su, mut sv) = (hu.clone(), hv.clone());
            su.scale(c);
            sv.scale(c);
            let (gu, gv) = lightgcn_propagate(&g, &su, &sv, 3);
            for (a, b) in fu.as_slice().iter().chain(fv.as_slice()).zip(gu.as_slice().iter().chain(gv.as_slice())) {
                prop_assert!((a * c - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dims = ModelDims {
            n_users: 3,
            n_items: 4,
            d: 5,
            d_s: 6,
            d_a: 2,
            layers: 3,
        };
        let st = ModelState::<f32>::init(dims, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.clkm");
        st.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CLKM");
        assert_eq!(bytes.len(), 28 + 4 * (15 + 20 + 30 + 30 + 12 + 4));
        // E_u comes first after the header
        assert_eq!(&bytes[28..32], &st.user_emb.as_slice()[0].to_le_bytes());
        assert_eq!(ModelState::<f32>::load(&p).unwrap(), st);
        std::fs::write(&p, &bytes[..40]).unwrap();
        assert!(ModelState::<f32>::load(&p).is_err());
    }
}
