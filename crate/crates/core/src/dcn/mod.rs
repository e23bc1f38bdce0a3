//! Cross-network fusion model over handcrafted features and sequential
//! embeddings.
//!
//! Numeric features enter through piecewise-linear-encoded dim-2 embeddings;
//! the sequential embedding is projected through a small two-layer module
//! with an intermediate RMSNorm. Three low-rank cross layers
//! `x_{l+1} = x0 ⊙ (U_l(V_lᵀ x_l) + b_l) + x_l` produce rank projections
//! whose concatenation feeds a four-layer densely-connected head; its output
//! is the exported embedding. Training objectives: churn BCE, SKU and
//! category propensity BCE, and a contrastive term over history-masked
//! augmentation pairs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSet, FeatureMatrix};
use crate::encoders::{encode_ple, fit_ple, PleBins, PLE_IDS_PER_FEATURE};
use crate::error::{Error, Result};
use crate::event::{EventType, UserHistory};
use crate::nn::{
    backward, clip_global_norm, concat_cols, AdamState, Graph, Init, ParamStore, Var,
};
use crate::scalar::Scalar;

pub const GROUP_PLE: u32 = 1;
pub const GROUP_CROSS: u32 = 2;

/// How the churn label is derived from the target window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChurnRule {
    /// No purchase event in the target window (the default).
    NoPurchase,
    /// No events at all in the target window.
    NoEvents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcnConfig {
    pub cross_ranks: [usize; 3],
    pub densenet_hidden: usize,
    pub out_dim: usize,
    pub seq_proj_hidden: usize,
    pub seq_proj_out: usize,
    pub sku_k: usize,
    pub cat_k: usize,
    pub churn_rule: ChurnRule,
    pub mask_rate: f64,
    pub contrastive_enabled: bool,
    pub contrastive_negatives: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_ple: f64,
    pub lr_cross: f64,
    pub lr_other: f64,
    pub clip_norm: f64,
}

impl DcnConfig {
    pub fn desk() -> Self {
        DcnConfig {
            cross_ranks: [64, 32, 32],
            densenet_hidden: 64,
            out_dim: 32,
            seq_proj_hidden: 32,
            seq_proj_out: 16,
            sku_k: 20,
            cat_k: 10,
            churn_rule: ChurnRule::NoPurchase,
            mask_rate: 0.3,
            contrastive_enabled: true,
            contrastive_negatives: 64,
            steps: 1000,
            batch_size: 128,
            lr_ple: 2e-4,
            lr_cross: 5e-4,
            lr_other: 1e-3,
            clip_norm: 1.0,
        }
    }

    pub fn paper() -> Self {
        DcnConfig {
            out_dim: 128,
            seq_proj_hidden: 128,
            seq_proj_out: 64,
            sku_k: 100,
            cat_k: 100,
            contrastive_negatives: 8192,
            steps: 25_000,
            batch_size: 16_384,
            ..Self::desk()
        }
    }
}

/// Per-user labels derived from the target window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DcnTargets {
    pub churn: bool,
    /// Indices into the SKU label vocabulary.
    pub skus: Vec<usize>,
    /// Indices into the category label vocabulary.
    pub cats: Vec<usize>,
}

/// Derives churn/propensity labels from target-window histories. Labels are
/// restricted to the given vocabularies (train-period top lists).
pub fn derive_targets(
    target_histories: &BTreeMap<u64, UserHistory>,
    rule: ChurnRule,
    sku_vocab: &[u64],
    cat_vocab: &[u64],
) -> BTreeMap<u64, DcnTargets> {
    let sku_idx: BTreeMap<u64, usize> =
        sku_vocab.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let cat_idx: BTreeMap<u64, usize> =
        cat_vocab.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut out = BTreeMap::new();
    for (&uid, h) in target_histories {
        let mut t = DcnTargets::default();
        let mut purchased = false;
        for e in &h.events {
            if e.event_type == EventType::Purchase {
                purchased = true;
                if let Some(i) = e.sku.and_then(|s| sku_idx.get(&s)) {
                    if !t.skus.contains(i) {
                        t.skus.push(*i);
                    }
                }
                if let Some(i) = e.category.and_then(|c| cat_idx.get(&c)) {
                    if !t.cats.contains(i) {
                        t.cats.push(*i);
                    }
                }
            }
        }
        t.churn = match rule {
            ChurnRule::NoPurchase => !purchased,
            ChurnRule::NoEvents => h.events.is_empty(),
        };
        t.skus.sort_unstable();
        t.cats.sort_unstable();
        out.insert(uid, t);
    }
    out
}

/// Randomly drops ~`mask_rate` of the events; at least one event is kept
/// (fully-masked draws are redrawn). Deterministic per
/// (user, seed, draw_index).
pub fn augment_mask(h: &UserHistory, mask_rate: f64, seed: u64, draw_index: u64) -> UserHistory {
    if h.events.is_empty() || mask_rate <= 0.0 {
        return h.clone();
    }
    let mix = seed ^ h.user_id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ draw_index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    loop {
        let kept: Vec<_> =
            h.events.iter().filter(|_| rng.gen::<f64>() >= mask_rate).cloned().collect();
        if !kept.is_empty() {
            return UserHistory { user_id: h.user_id, events: kept };
        }
    }
}

/// Reference contrastive loss over two views (full in-batch negatives):
/// mean over u of −ln( e^{s_uu/τ} / (e^{s_uu/τ} + Σ_{n≠u} e^{s_un/τ}) ),
/// with s the cosine similarity of the normalized rows.
pub fn contrastive_loss(p1: &[Vec<f64>], p2: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let m = p1.len();
    if m < 2 {
        return Err(Error::invalid("contrastive_loss: batch of 1"));
    }
    if p2.len() != m {
        return Err(Error::shape("contrastive_loss: view sizes differ"));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let norm = |v: &[f64]| -> Result<Vec<f64>> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::invalid("zero-norm row in contrastive batch"));
        }
        Ok(v.iter().map(|x| x / n).collect())
    };
    let a: Vec<Vec<f64>> = p1.iter().map(|v| norm(v)).collect::<Result<_>>()?;
    let b: Vec<Vec<f64>> = p2.iter().map(|v| norm(v)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 0..m {
        let s: Vec<f64> = (0..m)
            .map(|j| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>() / temperature)
            .collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + s.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        total += lse - s[i];
    }
    Ok(total / m as f64)
}

#[derive(Debug, Clone)]
struct CrossIds {
    u: usize,
    v: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct DcnModel {
    pub cfg: DcnConfig,
    pub ple: PleBins,
    /// Label vocabularies (train-period top SKUs/categories).
    pub sku_vocab: Vec<u64>,
    pub cat_vocab: Vec<u64>,
    n_features: usize,
    seq_dim: usize,
    ple_table: usize,
    seq_w1: usize,
    seq_b1: usize,
    seq_rms: usize,
    seq_w2: usize,
    seq_b2: usize,
    cross: Vec<CrossIds>,
    dense: Vec<(usize, usize)>,
    head_churn: (usize, usize),
    head_sku: (usize, usize),
    head_cat: (usize, usize),
    log_tau: usize,
}

impl DcnModel {
    /// Fits the PLE bins on the training feature matrix and registers all
    /// parameters.
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &DcnConfig,
        train_features: &FeatureMatrix,
        seq_dim: usize,
        sku_vocab: Vec<u64>,
        cat_vocab: Vec<u64>,
    ) -> Result<Self> {
        let n_features = train_features.dim();
        if n_features == 0 || train_features.user_ids.is_empty() {
            return Err(Error::invalid("dcn: empty training feature matrix"));
        }
        let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(train_features.user_ids.len()); n_features];
        for row in train_features.rows() {
            for (c, &v) in row.iter().enumerate() {
                columns[c].push(v);
            }
        }
        let ple = fit_ple(&columns)?;

        let d = 2 * n_features + cfg.seq_proj_out;
        let mut cross = Vec::new();
        for (l, &r) in cfg.cross_ranks.iter().enumerate() {
            cross.push(CrossIds {
                u: store.add_tagged(&format!("dcn.cross{l}.u"), d, r, Init::UniformFanIn, GROUP_CROSS, false),
                v: store.add_tagged(&format!("dcn.cross{l}.v"), d, r, Init::UniformFanIn, GROUP_CROSS, false),
                b: store.add_tagged(&format!("dcn.cross{l}.b"), 1, d, Init::Zeros, GROUP_CROSS, false),
            });
        }
        let concat_dim: usize = cfg.cross_ranks.iter().sum();
        let mut dense = Vec::new();
        let mut in_dim = concat_dim;
        for l in 0..4 {
            let out = if l == 3 { cfg.out_dim } else { cfg.densenet_hidden };
            dense.push((
                store.add(&format!("dcn.dense{l}.w"), in_dim, out, Init::UniformFanIn),
                store.add(&format!("dcn.dense{l}.b"), 1, out, Init::Zeros),
            ));
            in_dim += out;
        }
        let ple_table = store.add_tagged(
            "dcn.ple",
            n_features * PLE_IDS_PER_FEATURE,
            2,
            Init::Normal(0.02),
            GROUP_PLE,
            true,
        );
        let k_sku = sku_vocab_len(&sku_vocab);
        let k_cat = sku_vocab_len(&cat_vocab);
        Ok(DcnModel {
            cfg: cfg.clone(),
            ple,
            sku_vocab,
            cat_vocab,
            n_features,
            seq_dim,
            ple_table,
            seq_w1: store.add("dcn.seqproj.w1", seq_dim, cfg.seq_proj_hidden, Init::UniformFanIn),
            seq_b1: store.add("dcn.seqproj.b1", 1, cfg.seq_proj_hidden, Init::Zeros),
            seq_rms: store.add("dcn.seqproj.rms.g", 1, cfg.seq_proj_hidden, Init::Const(1.0)),
            seq_w2: store.add("dcn.seqproj.w2", cfg.seq_proj_hidden, cfg.seq_proj_out, Init::UniformFanIn),
            seq_b2: store.add("dcn.seqproj.b2", 1, cfg.seq_proj_out, Init::Zeros),
            cross,
            dense,
            head_churn: (
                store.add("dcn.head.churn.w", cfg.out_dim, 1, Init::UniformFanIn),
                store.add("dcn.head.churn.b", 1, 1, Init::Zeros),
            ),
            head_sku: (
                store.add("dcn.head.sku.w", cfg.out_dim, k_sku, Init::UniformFanIn),
                store.add("dcn.head.sku.b", 1, k_sku, Init::Zeros),
            ),
            head_cat: (
                store.add("dcn.head.cat.w", cfg.out_dim, k_cat, Init::UniformFanIn),
                store.add("dcn.head.cat.b", 1, k_cat, Init::Zeros),
            ),
            log_tau: store.add("dcn.loss.log_tau", 1, 1, Init::Const((0.1f64).ln())),
        })
    }

    /// Flattened PLE interval ids of one standardized feature row.
    pub fn ple_ids(&self, row: &[f64]) -> Vec<i64> {
        row.iter()
            .enumerate()
            .map(|(f, &v)| (f * PLE_IDS_PER_FEATURE + encode_ple(v, &self.ple.edges[f])) as i64)
            .collect()
    }

    /// Two-layer projection with intermediate RMSNorm.
    pub fn project_seq<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        seq: &Var<S>,
    ) -> Var<S> {
        seq.matmul(&g.param(store, self.seq_w1))
            .add_row(&g.param(store, self.seq_b1))
            .rms_norm(&g.param(store, self.seq_rms))
            .matmul(&g.param(store, self.seq_w2))
            .add_row(&g.param(store, self.seq_b2))
    }

    /// One cross layer; returns (x_{l+1}, V_lᵀ x_l).
    pub fn cross_layer<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        layer: usize,
        x0: &Var<S>,
        x: &Var<S>,
    ) -> (Var<S>, Var<S>) {
        let ids = &self.cross[layer];
        let vx = x.matmul(&g.param(store, ids.v));
        let up = vx.matmul_nt(&g.param(store, ids.u)).add_row(&g.param(store, ids.b));
        (x0.mul(&up).add(x), vx)
    }

    /// Full forward: PLE ids + raw sequential embeddings → dcn embedding
    /// [m, out_dim].
    pub fn forward<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        ple_ids: &[i64],
        seq_rows: &[S],
    ) -> Result<Var<S>> {
        let m = ple_ids.len() / self.n_features;
        if ple_ids.len() != m * self.n_features || seq_rows.len() != m * self.seq_dim {
            return Err(Error::shape(format!(
                "dcn forward: {} ple ids / {} seq values for batch {m}",
                ple_ids.len(),
                seq_rows.len()
            )));
        }
        let ple = g
            .gather_param(store, self.ple_table, ple_ids)
            .reshape(m, 2 * self.n_features);
        let seq = g.constant(m, self.seq_dim, seq_rows.to_vec());
        let proj = self.project_seq(g, store, &seq);
        let x0 = concat_cols(&[ple, proj]);
        let mut x = x0.clone();
        let mut vxs = Vec::with_capacity(self.cross.len());
        for l in 0..self.cross.len() {
            let (next, vx) = self.cross_layer(g, store, l, &x0, &x);
            x = next;
            vxs.push(vx);
        }
        let mut outs: Vec<Var<S>> = vec![concat_cols(&vxs)];
        for (l, &(w, b)) in self.dense.iter().enumerate() {
            let inp = if outs.len() == 1 { outs[0].clone() } else { concat_cols(&outs) };
            let out = inp.matmul(&g.param(store, w)).add_row(&g.param(store, b)).gelu();
            outs.push(out);
            let _ = l;
        }
        Ok(outs.last().unwrap().clone())
    }

    /// Churn + SKU + category multi-task BCE (per-head mean over batch and
    /// labels). Returns (total, [churn, sku, cat]).
    pub fn multitask_loss<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        emb: &Var<S>,
        targets: &[&DcnTargets],
    ) -> Result<(Var<S>, [f64; 3])> {
        let m = targets.len();
        if emb.rows() != m {
            return Err(Error::shape("multitask_loss: batch size mismatch"));
        }
        let bce = |logits: Var<S>, labels: Vec<S>| -> Var<S> {
            // softplus(l) − y·l, averaged over all entries
            logits.softplus().sub(&logits.mul_const(&labels)).mean()
        };
        let churn_logits =
            emb.matmul(&g.param(store, self.head_churn.0)).add_row(&g.param(store, self.head_churn.1));
        let churn_labels: Vec<S> =
            targets.iter().map(|t| if t.churn { S::one() } else { S::zero() }).collect();
        let l_churn = bce(churn_logits, churn_labels);

        let k = self.sku_vocab.len();
        let sku_logits =
            emb.matmul(&g.param(store, self.head_sku.0)).add_row(&g.param(store, self.head_sku.1));
        let mut sku_labels = vec![S::zero(); m * k];
        for (i, t) in targets.iter().enumerate() {
            for &s in &t.skus {
                if s >= k {
                    return Err(Error::invalid(format!("sku label index {s} out of {k}")));
                }
                sku_labels[i * k + s] = S::one();
            }
        }
        let l_sku = bce(sku_logits, sku_labels);

        let kc = self.cat_vocab.len();
        let cat_logits =
            emb.matmul(&g.param(store, self.head_cat.0)).add_row(&g.param(store, self.head_cat.1));
        let mut cat_labels = vec![S::zero(); m * kc];
        for (i, t) in targets.iter().enumerate() {
            for &c in &t.cats {
                if c >= kc {
                    return Err(Error::invalid(format!("cat label index {c} out of {kc}")));
                }
                cat_labels[i * kc + c] = S::one();
            }
        }
        let l_cat = bce(cat_logits, cat_labels);

        let parts =
            [l_churn.scalar().as_f64(), l_sku.scalar().as_f64(), l_cat.scalar().as_f64()];
        Ok((l_churn.add(&l_sku).add(&l_cat), parts))
    }

    /// In-batch contrastive term over the two augmented views (graph form,
    /// learnable temperature, up to `contrastive_negatives` shared negative
    /// columns).
    pub fn contrastive_graph_loss<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        p1: &Var<S>,
        p2: &Var<S>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<S>> {
        let m = p1.rows();
        if m < 2 {
            return Err(Error::invalid("contrastive batch of 1"));
        }
        let a = p1.l2_normalize_rows();
        let b = p2.l2_normalize_rows();
        let inv_tau = g.param(store, self.log_tau).neg().exp();
        let sp = a.row_dot(&b).mul_scalar(&inv_tau);
        let k = self.cfg.contrastive_negatives.min(m);
        let mut cols: Vec<usize> = (0..m).collect();
        if let Some(r) = rng {
            cols.shuffle(r);
        }
        cols.truncate(k);
        let sn = a.matmul_nt(&b.gather_rows(&cols)).mul_scalar(&inv_tau);
        let mut mask = vec![S::zero(); m * k];
        for i in 0..m {
            for (j, &c) in cols.iter().enumerate() {
                if c == i {
                    mask[i * k + j] = S::of(-1e9);
                }
            }
        }
        let lse = concat_cols(&[sp.clone(), sn.add_const(&mask)]).logsumexp_rows();
        Ok(lse.sub(&sp).mean())
    }
}

fn sku_vocab_len(v: &[u64]) -> usize {
    v.len().max(1)
}

/// Per-step training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DcnStepMetrics {
    pub step: u64,
    pub loss: f64,
    pub churn: f64,
    pub sku: f64,
    pub cat: f64,
    pub contrastive: f64,
    pub grad_norm: f64,
}

/// Inputs to DCN training; all tagged with the data period they were
/// computed on.
pub struct DcnTrainData<'a> {
    pub features: &'a FeatureMatrix,
    pub seq_embs: &'a EmbeddingSet,
    /// Two augmented-view embedding sets (empty slices disable the
    /// contrastive term).
    pub aug_embs: Option<(&'a EmbeddingSet, &'a EmbeddingSet)>,
    pub targets: &'a BTreeMap<u64, DcnTargets>,
    /// Start of the label window; inputs must predate it.
    pub target_window_start: i64,
}

/// Trains the DCN with three optimizer groups (numeric-feature embeddings,
/// cross parameters, everything else). Fails fast if any input matrix was
/// computed on data overlapping the label window.
pub fn train_dcn<S: Scalar>(
    cfg: &DcnConfig,
    data: &DcnTrainData<'_>,
    sku_vocab: Vec<u64>,
    cat_vocab: Vec<u64>,
    param_seed: u64,
    train_seed: u64,
) -> Result<(DcnModel, ParamStore<S>, Vec<DcnStepMetrics>)> {
    if data.features.period_end > data.target_window_start {
        return Err(Error::Leakage(format!(
            "features were computed through {} but labels start at {}",
            data.features.period_end, data.target_window_start
        )));
    }
    if data.seq_embs.period_end > data.target_window_start {
        return Err(Error::Leakage(format!(
            "sequential embeddings were computed through {} but labels start at {}",
            data.seq_embs.period_end, data.target_window_start
        )));
    }
    if let Some((a, b)) = data.aug_embs {
        if a.period_end > data.target_window_start || b.period_end > data.target_window_start {
            return Err(Error::Leakage("augmented embeddings overlap the label window".into()));
        }
    }

    let mut store: ParamStore<S> = ParamStore::new(param_seed);
    let model = DcnModel::register(
        &mut store,
        cfg,
        data.features,
        data.seq_embs.dim,
        sku_vocab,
        cat_vocab,
    )?;

    // per-user caches: PLE ids, seq rows, targets
    let users = data.features.user_ids.clone();
    let ple_ids: Vec<Vec<i64>> = data.features.rows().map(|r| model.ple_ids(r)).collect();
    let empty = DcnTargets::default();
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed);
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut metrics = Vec::with_capacity(cfg.steps as usize);

    let lr_of = |group: u32| -> f64 {
        match group {
            GROUP_PLE => cfg.lr_ple,
            GROUP_CROSS => cfg.lr_cross,
            _ => cfg.lr_other,
        }
    };

    for step in 1..=cfg.steps {
        let take = cfg.batch_size.min(users.len());
        let mut batch_rows = Vec::with_capacity(take);
        while batch_rows.len() < take {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_rows.push(order[cursor]);
            cursor += 1;
        }

        let mut ids = Vec::with_capacity(take * model.n_features);
        let mut seq_rows: Vec<S> = Vec::with_capacity(take * data.seq_embs.dim);
        let mut targets: Vec<&DcnTargets> = Vec::with_capacity(take);
        for &r in &batch_rows {
            ids.extend_from_slice(&ple_ids[r]);
            let uid = users[r];
            let si = data.seq_embs.index_of(uid)?;
            seq_rows.extend(data.seq_embs.row(si).iter().map(|&v| S::of(v as f64)));
            targets.push(data.targets.get(&uid).unwrap_or(&empty));
        }

        let g: Graph<S> = Graph::new();
        let emb = model.forward(&g, &store, &ids, &seq_rows)?;
        let (mut total, parts) = model.multitask_loss(&g, &store, &emb, &targets)?;
        let mut cl_val = 0.0;
        if cfg.contrastive_enabled {
            if let Some((aug_a, aug_b)) = data.aug_embs {
                let mut rows_a: Vec<S> = Vec::with_capacity(take * aug_a.dim);
                let mut rows_b: Vec<S> = Vec::with_capacity(take * aug_b.dim);
                for &r in &batch_rows {
                    let uid = users[r];
                    rows_a.extend(aug_a.row(aug_a.index_of(uid)?).iter().map(|&v| S::of(v as f64)));
                    rows_b.extend(aug_b.row(aug_b.index_of(uid)?).iter().map(|&v| S::of(v as f64)));
                }
                let p1 = model.forward(&g, &store, &ids, &rows_a)?;
                let p2 = model.forward(&g, &store, &ids, &rows_b)?;
                let cl = model.contrastive_graph_loss(&g, &store, &p1, &p2, Some(&mut rng))?;
                cl_val = cl.scalar().as_f64();
                total = total.add(&cl);
            }
        }
        let mut grads = backward(&total)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(&mut store, &grads, lr_of);
        metrics.push(DcnStepMetrics {
            step,
            loss: total.scalar().as_f64(),
            churn: parts[0],
            sku: parts[1],
            cat: parts[2],
            contrastive: cl_val,
            grad_norm,
        });
        if step % 200 == 0 || step == 1 {
            log::info!("dcn step {step}: loss {:.4}", total.scalar().as_f64());
        }
    }
    Ok((model, store, metrics))
}

/// Eval-mode embedding export for the given inputs (any period; the PLE
/// bins stay as fitted at training time).
pub fn export_embeddings<S: Scalar>(
    model: &DcnModel,
    store: &ParamStore<S>,
    features: &FeatureMatrix,
    seq_embs: &EmbeddingSet,
) -> Result<EmbeddingSet> {
    let mut rows: Vec<(u64, Vec<f32>)> = Vec::with_capacity(features.user_ids.len());
    let chunk = 256;
    let n = features.user_ids.len();
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let mut ids = Vec::new();
        let mut seq_rows: Vec<S> = Vec::new();
        for r in i..hi {
            ids.extend(model.ple_ids(features.row(r)));
            let uid = features.user_ids[r];
            let si = seq_embs.index_of(uid)?;
            seq_rows.extend(seq_embs.row(si).iter().map(|&v| S::of(v as f64)));
        }
        let g: Graph<S> = Graph::new();
        let emb = model.forward(&g, store, &ids, &seq_rows)?;
        let data = emb.value();
        for (k, r) in (i..hi).enumerate() {
            rows.push((
                features.user_ids[r],
                data[k * model.cfg.out_dim..(k + 1) * model.cfg.out_dim]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect(),
            ));
        }
        i = hi;
    }
    EmbeddingSet::from_rows(rows, model.cfg.out_dim, features.period_end)
}
