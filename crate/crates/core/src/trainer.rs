//! BPR training with hand-derived reverse-mode gradients and Adam.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::embed::SemanticEmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit};
use crate::item_graph::ItemItemGraph;
use crate::matrix::Matrix;
use crate::model::{
    DropoutMasks, ForwardTrace, Gradients, ModelDims, ModelInputs, ModelState, PropagationGraph, Switches,
    LEAKY_SLOPE,
};
use crate::scalar::{dot, elu_grad, sigmoid, softplus, Scalar};

/// The four single-component ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_item_semantic: bool,
    pub no_user_semantic: bool,
    pub no_neighbor_aug: bool,
    /// Consumed when rendering item prompts; the trainer only records it.
    pub no_second_order: bool,
}

impl AblationFlags {
    pub const ALL: AblationFlags = AblationFlags {
        no_item_semantic: true,
        no_user_semantic: true,
        no_neighbor_aug: true,
        no_second_order: true,
    };

    pub fn switches(self) -> Switches {
        Switches {
            item_semantic: !self.no_item_semantic,
            user_semantic: !self.no_user_semantic,
            neighbor_aug: !self.no_neighbor_aug,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_a: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 64, d_a: 64, layers: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// L2 coefficient.
    pub lambda: f64,
    pub dropout: f64,
    pub seed: u64,
    pub flags: AblationFlags,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Cutoff of the validation recall that selects the best epoch.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 1024,
            max_epochs: 200,
            lambda: 1e-4,
            dropout: 0.2,
            seed: 2024,
            flags: AblationFlags::default(),
            patience: 20,
            eval_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// `(user, positive item, negative item)`.
pub type BprTriple = (u32, u32, u32);

/// Uniform positive edges with rejection-sampled negatives.
pub struct BatchSampler<'a> {
    ds: &'a InteractionDataset,
    sorted_items: Vec<Vec<u32>>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(ds: &'a InteractionDataset) -> Self {
        let sorted_items = (0..ds.n_users() as u32)
            .map(|u| {
                let mut v = ds.user_items(u).to_vec();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        Self { ds, sorted_items }
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<BprTriple> {
        let train = &self.ds.train;
        let n_items = self.ds.n_items() as u32;
        let mut out = Vec::with_capacity(batch_size);
        if train.is_empty() {
            return out;
        }
        let mut skipped = 0usize;
        while out.len() < batch_size {
            let (u, pos) = train[rng.random_range(0..train.len())];
            let seen = &self.sorted_items[u as usize];
            if seen.len() >= n_items as usize {
                skipped += 1;
                if skipped == 1 {
                    log::warn!("user {u} interacted with every item; no negative exists");
                }
                if skipped > 10 * batch_size {
                    break;
                }
                continue;
            }
            let neg = loop {
                let v = rng.random_range(0..n_items);
                if seen.binary_search(&v).is_err() {
                    break v;
                }
            };
            out.push((u, pos, neg));
        }
        out
    }
}

pub fn sample_training_batch<R: Rng + ?Sized>(ds: &InteractionDataset, batch_size: usize, rng: &mut R) -> Vec<BprTriple> {
    BatchSampler::new(ds).sample(batch_size, rng)
}

/// `Σ -ln σ(pos - neg) + λ·theta_sq_norm`.
pub fn bpr_loss<T: Scalar>(pos: &[T], neg: &[T], theta_sq_norm: T, lambda: T) -> T {
    assert_eq!(pos.len(), neg.len());
    let pairs: T = pos.iter().zip(neg).map(|(&p, &n)| softplus(n - p)).sum();
    pairs + lambda * theta_sq_norm
}

/// Which parameter groups are part of the differentiable model.
#[derive(Debug, Clone, Copy)]
struct ActiveParams {
    item_adapter: bool,
    user_adapter: bool,
    attention: bool,
}

impl ActiveParams {
    fn new<T>(inputs: &ModelInputs<'_, T>, sw: Switches) -> Self {
        Self {
            item_adapter: sw.item_semantic,
            user_adapter: sw.user_semantic,
            attention: inputs.attention_active(sw),
        }
    }
}

fn batch_members(batch: &[BprTriple]) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let users = batch.iter().map(|t| t.0).collect();
    let items = batch.iter().flat_map(|t| [t.1, t.2]).collect();
    (users, items)
}

/// `‖Θ‖²` over the batch's user/item embeddings and the active dense weights.
fn theta_sq_norm<T: Scalar>(state: &ModelState<T>, batch: &[BprTriple], active: ActiveParams) -> T {
    let (users, items) = batch_members(batch);
    let mut s = T::zero();
    for u in users {
        s += dot(state.user_emb.row(u as usize), state.user_emb.row(u as usize));
    }
    for v in items {
        s += dot(state.item_emb.row(v as usize), state.item_emb.row(v as usize));
    }
    if active.item_adapter {
        s += state.item_adapter.sq_norm();
    }
    if active.user_adapter {
        s += state.user_adapter.sq_norm();
    }
    if active.attention {
        s += state.att_proj.sq_norm() + state.att_vec.sq_norm();
    }
    s
}

/// Loss of `batch` under an existing forward trace.
pub fn batch_loss<T: Scalar>(
    state: &ModelState<T>,
    inputs: &ModelInputs<'_, T>,
    sw: Switches,
    trace: &ForwardTrace<T>,
    batch: &[BprTriple],
    lambda: T,
) -> T {
    let pos: Vec<T> = batch.iter().map(|&(u, p, _)| trace.score(u, p)).collect();
    let neg: Vec<T> = batch.iter().map(|&(u, _, n)| trace.score(u, n)).collect();
    bpr_loss(&pos, &neg, theta_sq_norm(state, batch, ActiveParams::new(inputs, sw)), lambda)
}

/// Exact gradient of [`batch_loss`] with respect to every trainable table.
/// Semantic inputs are constants and receive nothing.
pub fn backward<T: Scalar>(
    state: &ModelState<T>,
    inputs: &ModelInputs<'_, T>,
    sw: Switches,
    trace: &ForwardTrace<T>,
    batch: &[BprTriple],
    lambda: T,
    dropout: Option<&DropoutMasks<T>>,
) -> Gradients<T> {
    let dims = state.dims;
    let active = ActiveParams::new(inputs, sw);
    let mut grads = ModelState::zeros(dims);
    let half = T::of(0.5);

    // scores -> final representations
    let mut g_final_u = Matrix::zeros(dims.n_users, dims.d);
    let mut g_final_v = Matrix::zeros(dims.n_items, dims.d);
    for &(u, p, n) in batch {
        let x = trace.score(u, p) - trace.score(u, n);
        let c = -sigmoid(-x);
        let (fu, fp, fn_) = (
            trace.final_users.row(u as usize),
            trace.final_items.row(p as usize),
            trace.final_items.row(n as usize),
        );
        for k in 0..dims.d {
            g_final_u.row_mut(u as usize)[k] += c * (fp[k] - fn_[k]);
            g_final_v.row_mut(p as usize)[k] += c * fu[k];
            g_final_v.row_mut(n as usize)[k] -= c * fu[k];
        }
    }

    // layer mean and propagation
    let inv_layers = T::one() / T::of((dims.layers + 1) as f64);
    g_final_u.scale(inv_layers);
    g_final_v.scale(inv_layers);
    let (mut acc_u, mut acc_v) = (g_final_u.clone(), g_final_v.clone());
    for l in (1..=dims.layers).rev() {
        if let Some(m) = dropout {
            mask_in_place(&mut acc_u, &m.users[l]);
            mask_in_place(&mut acc_v, &m.items[l]);
        }
        let (pu, pv) = inputs.graph.step(&acc_u, &acc_v);
        acc_u = pu;
        acc_v = pv;
        acc_u.add_scaled(T::one(), &g_final_u);
        acc_v.add_scaled(T::one(), &g_final_v);
    }
    if let Some(m) = dropout {
        mask_in_place(&mut acc_u, &m.users[0]);
        mask_in_place(&mut acc_v, &m.items[0]);
    }
    let g_h_users = acc_u;
    let g_aug_items = acc_v;

    // neighbor augmentation
    let g_h_items = match (&trace.attention, active.attention) {
        (Some(att), true) => {
            let sem = inputs.item_semantic.expect("attention requires item semantics");
            let graph = inputs.neighbors.expect("attention requires the item graph");
            let mut g_h = Matrix::zeros(dims.n_items, dims.d);
            let mut g_src = vec![T::zero(); dims.n_items];
            let mut g_dst = vec![T::zero(); dims.n_items];
            let slope = T::of(LEAKY_SLOPE);
            for i in 0..dims.n_items {
                let nb: Vec<u32> = graph.neighbor_ids(i as u32).collect();
                let g_out = g_aug_items.row(i);
                if nb.is_empty() {
                    crate::scalar::axpy(T::one(), g_out, g_h.row_mut(i));
                    continue;
                }
                let g_pre: Vec<T> = g_out
                    .iter()
                    .zip(att.aug_pre.row(i))
                    .map(|(&g, &p)| g * elu_grad(p) * half)
                    .collect();
                crate::scalar::axpy(T::one(), &g_pre, g_h.row_mut(i));
                let alpha = &att.alpha[i];
                let g_alpha: Vec<T> = nb.iter().map(|&j| dot(&g_pre, trace.h_items.row(j as usize))).collect();
                for (&j, &a) in nb.iter().zip(alpha) {
                    crate::scalar::axpy(a, &g_pre, g_h.row_mut(j as usize));
                }
                let weighted: T = alpha.iter().zip(&g_alpha).map(|(&a, &g)| a * g).sum();
                for (n, &j) in nb.iter().enumerate() {
                    let g_logit = alpha[n] * (g_alpha[n] - weighted);
                    let g_raw = if att.raw[i][n] > T::zero() { g_logit } else { g_logit * slope };
                    g_src[i] += g_raw;
                    g_dst[j as usize] += g_raw;
                }
            }
            let d_a = dims.d_a;
            let (a_src, a_dst) = state.att_vec.as_slice().split_at(d_a);
            let a_src = a_src.to_vec();
            let a_dst = a_dst.to_vec();
            let mut g_proj = vec![T::zero(); d_a];
            for i in 0..dims.n_items {
                if g_src[i] == T::zero() && g_dst[i] == T::zero() {
                    continue;
                }
                let z = att.proj.row(i);
                {
                    let gv = grads.att_vec.as_mut_slice();
                    for k in 0..d_a {
                        gv[k] += g_src[i] * z[k];
                        gv[d_a + k] += g_dst[i] * z[k];
                    }
                }
                for k in 0..d_a {
                    g_proj[k] = g_src[i] * a_src[k] + g_dst[i] * a_dst[k];
                }
                grads.att_proj.add_outer(T::one(), &g_proj, sem.row(i));
            }
            g_h
        }
        _ => g_aug_items,
    };

    // fusion and adapters
    adapter_backward(
        &g_h_items,
        trace.item_pre.as_ref().filter(|_| sw.item_semantic),
        inputs.item_semantic,
        &mut grads.item_emb,
        &mut grads.item_adapter,
        half,
    );
    adapter_backward(
        &g_h_users,
        trace.user_pre.as_ref().filter(|_| sw.user_semantic),
        inputs.user_semantic,
        &mut grads.user_emb,
        &mut grads.user_adapter,
        half,
    );

    // L2 term
    if lambda != T::zero() {
        let two_l = T::of(2.0) * lambda;
        let (users, items) = batch_members(batch);
        for u in users {
            crate::scalar::axpy(two_l, state.user_emb.row(u as usize), grads.user_emb.row_mut(u as usize));
        }
        for v in items {
            crate::scalar::axpy(two_l, state.item_emb.row(v as usize), grads.item_emb.row_mut(v as usize));
        }
        if active.item_adapter {
            grads.item_adapter.add_scaled(two_l, &state.item_adapter);
        }
        if active.user_adapter {
            grads.user_adapter.add_scaled(two_l, &state.user_adapter);
        }
        if active.attention {
            grads.att_proj.add_scaled(two_l, &state.att_proj);
            grads.att_vec.add_scaled(two_l, &state.att_vec);
        }
    }
    grads
}

fn mask_in_place<T: Scalar>(m: &mut Matrix<T>, mask: &Matrix<T>) {
    for (x, &k) in m.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *x *= k;
    }
}

/// Backpropagates `g_h` through `h = ½(e + ELU(W s))`, or `h = e` when the
/// semantic path is off.
fn adapter_backward<T: Scalar>(
    g_h: &Matrix<T>,
    pre: Option<&Matrix<T>>,
    semantic: Option<&Matrix<T>>,
    g_emb: &mut Matrix<T>,
    g_adapter: &mut Matrix<T>,
    half: T,
) {
    match (pre, semantic) {
        (Some(pre), Some(sem)) => {
            g_emb.add_scaled(half, g_h);
            for r in 0..g_h.rows() {
                let g_pre: Vec<T> = g_h
                    .row(r)
                    .iter()
                    .zip(pre.row(r))
                    .map(|(&g, &p)| g * half * elu_grad(p))
                    .collect();
                g_adapter.add_outer(T::one(), &g_pre, sem.row(r));
            }
        }
        _ => g_emb.add_scaled(T::one(), g_h),
    }
}

/// One forward + backward on `batch`.
pub fn loss_and_gradients<T: Scalar>(
    state: &ModelState<T>,
    inputs: &ModelInputs<'_, T>,
    sw: Switches,
    batch: &[BprTriple],
    lambda: T,
    dropout: Option<&DropoutMasks<T>>,
) -> Result<(T, Gradients<T>)> {
    let trace = state.forward(inputs, sw, dropout)?;
    let loss = batch_loss(state, inputs, sw, &trace, batch, lambda);
    let grads = backward(state, inputs, sw, &trace, batch, lambda, dropout);
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub cfg: AdamConfig,
    pub first: ModelState<T>,
    pub second: ModelState<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            cfg: AdamConfig::default(),
            first: ModelState::zeros(dims),
            second: ModelState::zeros(dims),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. A non-finite gradient aborts without touching
/// parameters or moments.
pub fn adam_step<T: Scalar>(
    state: &mut ModelState<T>,
    opt: &mut OptimizerState<T>,
    grads: &Gradients<T>,
    lr: f64,
) -> Result<()> {
    if state.dims != grads.dims || state.dims != opt.first.dims {
        return Err(Error::Shape("optimizer state does not match the model".into()));
    }
    const NAMES: [&str; 6] = ["E_u", "E_v", "W1", "W2", "W_att", "a_att"];
    for (name, g) in NAMES.iter().zip(grads.tensors()) {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} at step {}", opt.step + 1)));
        }
    }
    opt.step += 1;
    let AdamConfig { beta1, beta2, eps } = opt.cfg;
    let t = opt.step as i32;
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (c1, c2) = (T::of(1.0 - beta1.powi(t)), T::of(1.0 - beta2.powi(t)));
    let (lr, eps) = (T::of(lr), T::of(eps));
    let params = state.tensors_mut();
    let firsts = opt.first.tensors_mut();
    let seconds = opt.second.tensors_mut();
    for (((p, m), v), g) in params.into_iter().zip(firsts).zip(seconds).zip(grads.tensors()) {
        for (((p, m), v), &g) in p
            .as_mut_slice()
            .iter_mut()
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
            .zip(g.as_slice())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Precomputed upstream artifacts consumed by training.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainArtifacts<'a> {
    pub semantic: Option<&'a SemanticEmbeddingTable>,
    pub item_graph: Option<&'a ItemItemGraph>,
}

/// Dense inputs derived once from the dataset and artifacts.
pub struct PreparedInputs<T> {
    pub graph: PropagationGraph<T>,
    pub item_semantic: Option<Matrix<T>>,
    pub user_semantic: Option<Matrix<T>>,
    pub neighbors: Option<ItemItemGraph>,
    pub d_s: usize,
}

impl<T: Scalar> PreparedInputs<T> {
    /// Fails before any training when an enabled path lacks its artifact.
    pub fn new(ds: &InteractionDataset, artifacts: TrainArtifacts<'_>, flags: AblationFlags) -> Result<Self> {
        let sw = flags.switches();
        let needs_table = sw.item_semantic || sw.user_semantic || sw.neighbor_aug;
        let table = match (needs_table, artifacts.semantic) {
            (true, None) => {
                return Err(Error::MissingStage {
                    stage: "embed".into(),
                    detail: "semantic embedding table required by the enabled model paths".into(),
                })
            }
            (_, t) => t,
        };
        if sw.neighbor_aug && artifacts.item_graph.is_none() {
            return Err(Error::MissingStage {
                stage: "graph".into(),
                detail: "item-item graph required for neighbor augmentation".into(),
            });
        }
        let item_semantic = match table {
            Some(t) if sw.item_semantic || sw.neighbor_aug => Some(t.item_matrix(ds.n_items())?),
            _ => None,
        };
        let user_semantic = match table {
            Some(t) if sw.user_semantic => Some(t.user_matrix(ds.n_users())?),
            _ => None,
        };
        Ok(Self {
            graph: PropagationGraph::from_dataset(ds),
            item_semantic,
            user_semantic,
            neighbors: artifacts.item_graph.filter(|_| sw.neighbor_aug).cloned(),
            d_s: table.map_or(1, SemanticEmbeddingTable::dim),
        })
    }

    pub fn as_inputs(&self) -> ModelInputs<'_, T> {
        ModelInputs {
            graph: &self.graph,
            item_semantic: self.item_semantic.as_ref(),
            user_semantic: self.user_semantic.as_ref(),
            neighbors: self.neighbors.as_ref(),
        }
    }

    pub fn dims(&self, ds: &InteractionDataset, model: ModelConfig) -> ModelDims {
        ModelDims {
            n_users: ds.n_users(),
            n_items: ds.n_items(),
            d: model.d,
            d_s: self.d_s,
            d_a: model.d_a,
            layers: model.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_recall@20")]
    pub val_recall: f64,
    #[serde(rename = "val_ndcg@20")]
    pub val_ndcg: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch (or the last epoch without validation data).
    pub state: ModelState<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn train<T: Scalar>(
    ds: &InteractionDataset,
    artifacts: TrainArtifacts<'_>,
    model: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_callback(ds, artifacts, model, cfg, &mut |_| {})
}

/// Runs single-threaded deterministic training, reporting each epoch.
pub fn train_with_callback<T: Scalar>(
    ds: &InteractionDataset,
    artifacts: TrainArtifacts<'_>,
    model: ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Config("no training edges".into()));
    }
    let prepared = PreparedInputs::<T>::new(ds, artifacts, cfg.flags)?;
    let inputs = prepared.as_inputs();
    let sw = cfg.flags.switches();
    let dims = prepared.dims(ds, model);
    let mut state = ModelState::<T>::init(dims, cfg.seed);
    let mut opt = OptimizerState::new(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let sampler = BatchSampler::new(ds);
    let lambda = T::of(cfg.lambda);
    let n_batches = ds.train.len().div_ceil(cfg.batch_size);
    let eval_ks = [cfg.eval_k];
    let start = Instant::now();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelState<T>)> = None;
    let mut stale = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..n_batches {
            let batch = sampler.sample(cfg.batch_size, &mut rng);
            if batch.is_empty() {
                continue;
            }
            let masks = (cfg.dropout > 0.0).then(|| DropoutMasks::sample(dims, cfg.dropout, &mut rng));
            let (loss, grads) = loss_and_gradients(&state, &inputs, sw, &batch, lambda, masks.as_ref())?;
            adam_step(&mut state, &mut opt, &grads, cfg.learning_rate)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} aborted: {e}")))?;
            loss_sum += loss.to_f64_lossy() / batch.len() as f64;
        }
        let (val_recall, val_ndcg) = if ds.val.is_empty() {
            (0.0, 0.0)
        } else {
            let emb = state.final_embeddings(&inputs, sw)?;
            let r = evaluate(&emb, ds, EvalSplit::Validation, &eval_ks);
            (r.recall[0], r.ndcg[0])
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_recall,
            val_ndcg,
            elapsed_ms: start.elapsed().as_millis() as u64,
        };
        log::debug!("epoch {epoch}: loss {:.5} val recall {:.4}", record.train_loss, val_recall);
        on_epoch(&record);
        history.push(record);

        if ds.val.is_empty() {
            continue;
        }
        match &best {
            Some((score, _, _)) if val_recall <= *score => {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log::info!("early stop at epoch {epoch}");
                    break;
                }
            }
            _ => {
                best = Some((val_recall, epoch, state.clone()));
                stale = 0;
            }
        }
    }
    let (state, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => (state, history.len()),
    };
    Ok(TrainOutcome {
        state,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn two_item_dataset() -> InteractionDataset {
        InteractionDataset::from_edges(1, 2, vec![(0, 0)], vec![], vec![])
    }

    #[test]
    fn forced_negative() {
        let ds = two_item_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_training_batch(&ds, 50, &mut rng);
        assert_eq!(b.len(), 50);
        assert!(b.iter().all(|&t| t == (0, 0, 1)));
    }

    #[test]
    fn negatives_are_unobserved() {
        let edges: Vec<(u32, u32)> = (0..40).map(|i| (i % 7, (i * 3) % 11)).collect();
        let ds = InteractionDataset::from_edges(7, 11, edges.clone(), vec![], vec![]);
        let b = sample_training_batch(&ds, 1024, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(b.len(), 1024);
        for (u, p, n) in b {
            assert!(edges.contains(&(u, p)));
            assert!(!edges.contains(&(u, n)));
        }
    }

    #[test]
    fn saturated_user_is_skipped() {
        let ds = InteractionDataset::from_edges(2, 2, vec![(0, 0), (0, 1), (1, 0)], vec![], vec![]);
        let b = sample_training_batch(&ds, 30, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(b.len(), 30);
        assert!(b.iter().all(|&(u, _, n)| u == 1 && n == 1));
        let all = InteractionDataset::from_edges(1, 1, vec![(0, 0)], vec![], vec![]);
        assert!(sample_training_batch(&all, 4, &mut ChaCha8Rng::seed_from_u64(2)).is_empty());
    }

    #[test]
    fn bpr_examples() {
        let l: f64 = bpr_loss(&[0.7, -2.0], &[0.7, -2.0], 0.0, 0.0);
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let big: f64 = bpr_loss(&[1e6], &[0.0], 0.0, 0.0);
        assert!(big.abs() < 1e-12);
        let reg: f64 = bpr_loss(&[0.0], &[0.0], 3.0f64 * 3.0 + 4.0 * 4.0, 1.0);
        assert!((reg - (2f64.ln() + 25.0)).abs() < 1e-12);
    }

    fn dims() -> ModelDims {
        ModelDims {
            n_users: 2,
            n_items: 3,
            d: 2,
            d_s: 2,
            d_a: 2,
            layers: 1,
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut st = ModelState::<f64>::init(dims(), 1);
        let before = st.clone();
        let mut opt = OptimizerState::new(dims());
        let mut g = ModelState::zeros(dims());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in g.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(0.1..2.0) * if rng.random() { 1.0 } else { -1.0 });
        }
        adam_step(&mut st, &mut opt, &g, 0.001).unwrap();
        for ((a, b), gt) in st.tensors().iter().zip(before.tensors()).zip(g.tensors()) {
            for ((&x, &y), &gg) in a.as_slice().iter().zip(b.as_slice()).zip(gt.as_slice()) {
                let delta = x - y;
                assert!(delta.abs() <= 0.001 && delta.abs() >= 0.999 * 0.001);
                assert_eq!(delta.signum(), -gg.signum());
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut st = ModelState::<f64>::init(dims(), 1);
        let before = st.clone();
        let mut opt = OptimizerState::new(dims());
        adam_step(&mut st, &mut opt, &ModelState::zeros(dims()), 0.01).unwrap();
        assert_eq!(st, before);
    }

    #[test]
    fn adam_two_steps_match_scalar_recurrence() {
        // lr 0.1, g = 0.5 constant, p0 = 1.0:
        // m1 = 0.05, v1 = 0.00025, m1hat = 0.5, v1hat = 0.25 -> p1 = 1 - 0.1*0.5/(0.5+1e-8)
        // m2 = 0.095, v2 = 0.00049975, m2hat = 0.095/0.19 = 0.5, v2hat = 0.00049975/0.001999 = 0.25
        let p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let p2 = p1 - 0.1 * (0.095 / 0.19) / ((0.00049975f64 / 0.001999).sqrt() + 1e-8);
        let dims = ModelDims {
            n_users: 1,
            n_items: 0,
            d: 1,
            d_s: 0,
            d_a: 0,
            layers: 0,
        };
        let mut st = ModelState::<f64>::zeros(dims);
        st.user_emb.as_mut_slice()[0] = 1.0;
        let mut g = ModelState::zeros(dims);
        g.user_emb.as_mut_slice()[0] = 0.5;
        let mut opt = OptimizerState::new(dims);
        adam_step(&mut st, &mut opt, &g, 0.1).unwrap();
        assert!((st.user_emb.get(0, 0) - p1).abs() < 1e-15);
        adam_step(&mut st, &mut opt, &g, 0.1).unwrap();
        assert!((st.user_emb.get(0, 0) - p2).abs() < 1e-12);
        assert!((opt.first.user_emb.get(0, 0) - 0.095).abs() < 1e-15);
        assert!((opt.second.user_emb.get(0, 0) - 0.00049975).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut st = ModelState::<f64>::init(dims(), 1);
        let before = st.clone();
        let mut opt = OptimizerState::new(dims());
        let mut g = ModelState::zeros(dims());
        g.att_vec.as_mut_slice()[0] = f64::NAN;
        assert!(matches!(adam_step(&mut st, &mut opt, &g, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(st, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn lambda_only_gradient_is_two_lambda_theta() {
        let ds = InteractionDataset::from_edges(2, 3, vec![(0, 0), (1, 1), (1, 2)], vec![], vec![]);
        let mut table = SemanticEmbeddingTable::new(2, "t");
        for v in 0..3 {
            table.insert(crate::kg_text::PromptKind::Item, v, vec![1.0, v as f32]).unwrap();
        }
        for u in 0..2 {
            table.insert(crate::kg_text::PromptKind::User, u, vec![u as f32, 1.0]).unwrap();
        }
        let graph = crate::item_graph::top_k_neighbors(&table.item_matrix::<f64>(3).unwrap(), 1).unwrap();
        let art = TrainArtifacts {
            semantic: Some(&table),
            item_graph: Some(&graph),
        };
        let prep = PreparedInputs::<f64>::new(&ds, art, AblationFlags::default()).unwrap();
        let st = ModelState::<f64>::init(dims(), 5);
        let (_, g) = loss_and_gradients(&st, &prep.as_inputs(), Switches::default(), &[], 0.3, None).unwrap();
        // no pairs: only the dense weights are regularized
        assert!(g.user_emb.as_slice().iter().all(|&x| x == 0.0));
        for (gt, pt) in g.tensors().iter().zip(st.tensors()).skip(2) {
            for (&a, &b) in gt.as_slice().iter().zip(pt.as_slice()) {
                assert_eq!(a, 2.0 * 0.3 * b);
            }
        }
    }

    #[test]
    fn missing_artifacts_fail_before_training() {
        let ds = InteractionDataset::from_edges(1, 2, vec![(0, 0)], vec![], vec![]);
        let cfg = TrainConfig::default();
        let err = train::<f32>(&ds, TrainArtifacts::default(), ModelConfig::default(), &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        let plain = TrainConfig {
            flags: AblationFlags::ALL,
            max_epochs: 1,
            ..cfg
        };
        assert!(train::<f32>(&ds, TrainArtifacts::default(), ModelConfig::default(), &plain).is_ok());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { dropout: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -0.1, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok }.validate().is_err());
    }
}
