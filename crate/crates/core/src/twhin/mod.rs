//! Bipartite user–item embedding trained with a BCE link-prediction
//! objective over cart-addition and purchase edges.
//!
//! The edge logit is the dot product of the normalized user embedding and
//! the normalized sum of the item and edge-type embeddings; in-batch items
//! act as negatives. Dropout (p=0.3) is applied to both sides before
//! normalization during training. Items are either id-table rows (top-K
//! popular plus one shared out-of-vocabulary row) or the pretrained item
//! encoder reused from the sequential model.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TwoHash;
use crate::error::{Error, Result};
use crate::event::{EventType, UserHistory};
use crate::nn::{backward, clip_global_norm, AdamState, Gradients, Graph, Init, ParamStore, Var};
use crate::scalar::Scalar;
use crate::seq::{ContentIds, ItemCatalog, ItemFeatures, SeqModelConfig};

/// The two edge kinds of the interaction graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Purchase = 0,
    AddToCart = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub user: u64,
    pub item: u64,
    pub kind: EdgeKind,
}

/// Multiset of typed user-item edges, in deterministic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeSet {
    pub edges: Vec<Edge>,
}

/// One edge per cart addition or purchase event.
pub fn build_graph(histories: &BTreeMap<u64, UserHistory>) -> EdgeSet {
    let mut edges = Vec::new();
    for h in histories.values() {
        for e in &h.events {
            let kind = match e.event_type {
                EventType::Purchase => EdgeKind::Purchase,
                EventType::AddToCart => EdgeKind::AddToCart,
                _ => continue,
            };
            if let Some(item) = e.sku {
                edges.push(Edge { user: h.user_id, item, kind });
            }
        }
    }
    EdgeSet { edges }
}

/// Item representation source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ItemEncoderMode {
    /// Top-K popular items get id rows; the rest share one OOV row.
    IdTable { top_k: usize },
    /// Reuse (and fine-tune) the sequential model's content pathway and
    /// item projection, initialized from its checkpoint.
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwhinConfig {
    pub dim: usize,
    pub dropout: f64,
    pub item_mode: ItemEncoderMode,
    /// Keep at most this many users (evaluation users plus the most active
    /// remainder by cart additions and purchases).
    pub max_users: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub clip_norm: f64,
}

impl TwhinConfig {
    pub fn desk() -> Self {
        TwhinConfig {
            dim: 32,
            dropout: 0.3,
            item_mode: ItemEncoderMode::IdTable { top_k: 500 },
            max_users: usize::MAX,
            batch_size: 256,
            steps: 500,
            lr: 1e-3,
            clip_norm: 1.0,
        }
    }

    pub fn paper() -> Self {
        TwhinConfig {
            dim: 256,
            item_mode: ItemEncoderMode::IdTable { top_k: 1_000_000 },
            max_users: 1_500_000,
            batch_size: 4096,
            steps: 10_000,
            ..Self::desk()
        }
    }
}

/// Plain scoring: ⟨normalize(u), normalize(item + edge)⟩ ∈ [-1, 1].
pub fn twhin_score(user: &[f64], item: &[f64], edge: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let un = norm(user);
    let sum: Vec<f64> = item.iter().zip(edge).map(|(a, b)| a + b).collect();
    let sn = norm(&sum);
    user.iter().zip(&sum).map(|(u, s)| (u / un) * (s / sn)).sum()
}

/// Plain BCE link-prediction loss over an in-batch logit matrix: the
/// diagonal holds positives, off-diagonal entries are negatives.
pub fn twhin_loss(logits: &[Vec<f64>]) -> Result<f64> {
    let m = logits.len();
    if m < 2 {
        return Err(Error::invalid("twhin_loss: batch of 1 has no negatives"));
    }
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        if row.len() != m {
            return Err(Error::shape("twhin_loss: logit matrix must be square"));
        }
        for (j, &l) in row.iter().enumerate() {
            if i == j {
                total -= sigmoid(l).ln();
            } else {
                total -= (1.0 - sigmoid(l)).ln();
            }
        }
    }
    Ok(total / m as f64)
}

/// Inverted dropout mask whose rows are never fully zeroed (fully dropped
/// rows are re-drawn so the downstream normalization stays defined).
fn row_dropout_mask<S: Scalar>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Rc<Vec<S>> {
    let keep = S::of(1.0 / (1.0 - p));
    let mut mask = vec![S::zero(); rows * cols];
    for r in 0..rows {
        loop {
            let mut any = false;
            for c in 0..cols {
                let v = if rng.gen::<f64>() < p { S::zero() } else { keep };
                if v != S::zero() {
                    any = true;
                }
                mask[r * cols + c] = v;
            }
            if any {
                break;
            }
        }
    }
    Rc::new(mask)
}

enum ItemSide {
    IdTable { table: usize, row_of: BTreeMap<u64, usize>, oov: usize },
    Pretrained {
        content: ContentIds,
        item_w: usize,
        item_b: usize,
        features: BTreeMap<u64, ItemFeatures>,
    },
}

/// TwHIN model bound to a caller-owned parameter store.
pub struct TwhinModel {
    pub cfg: TwhinConfig,
    user_table: usize,
    edge_table: usize,
    user_row: BTreeMap<u64, usize>,
    items: ItemSide,
}

/// Selected users: all of them when they fit, otherwise the most active by
/// cart additions and purchases (event count, ties by id).
pub fn select_users(histories: &BTreeMap<u64, UserHistory>, max_users: usize) -> Vec<u64> {
    let mut activity: Vec<(u64, usize)> = histories
        .iter()
        .map(|(&uid, h)| {
            let n = h
                .events
                .iter()
                .filter(|e| {
                    matches!(e.event_type, EventType::Purchase | EventType::AddToCart)
                })
                .count();
            (uid, n)
        })
        .collect();
    if activity.len() > max_users {
        activity.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        activity.truncate(max_users);
    }
    let mut users: Vec<u64> = activity.into_iter().map(|(u, _)| u).collect();
    users.sort_unstable();
    users
}

impl TwhinModel {
    /// Registers parameters. In pretrained mode the content pathway uses
    /// `seq_cfg` (embedding_dim must equal `cfg.dim`) and expects weights to
    /// be loaded from a sequential checkpoint afterwards.
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &TwhinConfig,
        users: &[u64],
        edges: &EdgeSet,
        catalog: &ItemCatalog,
        seq_cfg: Option<&SeqModelConfig>,
    ) -> Result<Self> {
        let user_row: BTreeMap<u64, usize> =
            users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let user_table = store.add_tagged(
            "twhin.user",
            users.len().max(1),
            cfg.dim,
            Init::Normal(0.02),
            0,
            true,
        );
        let edge_table = store.add("twhin.edge", 2, cfg.dim, Init::Normal(0.02));
        let items = match &cfg.item_mode {
            ItemEncoderMode::IdTable { top_k } => {
                let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
                for e in &edges.edges {
                    *counts.entry(e.item).or_insert(0) += 1;
                }
                let mut ranked: Vec<(u64, usize)> = counts.into_iter().collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked.truncate(*top_k);
                let row_of: BTreeMap<u64, usize> =
                    ranked.iter().enumerate().map(|(i, &(id, _))| (id, i)).collect();
                let oov = row_of.len();
                let table = store.add_tagged(
                    "twhin.item",
                    oov + 1,
                    cfg.dim,
                    Init::Normal(0.02),
                    0,
                    true,
                );
                ItemSide::IdTable { table, row_of, oov }
            }
            ItemEncoderMode::Pretrained => {
                let seq_cfg = seq_cfg
                    .ok_or_else(|| Error::invalid("pretrained item encoder needs the seq config"))?;
                if seq_cfg.embedding_dim != cfg.dim {
                    return Err(Error::invalid(format!(
                        "twhin dim {} must match seq embedding_dim {}",
                        cfg.dim, seq_cfg.embedding_dim
                    )));
                }
                let content = ContentIds::register(store, "seq.", seq_cfg);
                let e = seq_cfg.embedding_dim;
                let item_w = store.add("seq.head.item.w", e, e, Init::UniformFanIn);
                let item_b = store.add("seq.head.item.b", 1, e, Init::Zeros);
                let features: BTreeMap<u64, ItemFeatures> = catalog
                    .items
                    .iter()
                    .filter_map(|f| f.sku.map(|s| (s, f.clone())))
                    .collect();
                ItemSide::Pretrained { content, item_w, item_b, features }
            }
        };
        Ok(TwhinModel { cfg: cfg.clone(), user_table, edge_table, user_row, items })
    }

    fn item_embeddings<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        items: &[u64],
        hash: &TwoHash,
    ) -> Var<S> {
        match &self.items {
            ItemSide::IdTable { table, row_of, oov } => {
                let idx: Vec<i64> = items
                    .iter()
                    .map(|id| row_of.get(id).copied().unwrap_or(*oov) as i64)
                    .collect();
                g.gather_param(store, *table, &idx)
            }
            ItemSide::Pretrained { content, item_w, item_b, features } => {
                let feats: Vec<ItemFeatures> = items
                    .iter()
                    .map(|id| {
                        features.get(id).cloned().unwrap_or(ItemFeatures {
                            sku: Some(*id),
                            ..Default::default()
                        })
                    })
                    .collect();
                embed_content_with(g, store, content, &feats, hash)
                    .matmul(&g.param(store, *item_w))
                    .add_row(&g.param(store, *item_b))
            }
        }
    }

    /// Batch loss on the tape: in-batch BCE link prediction.
    fn batch_loss<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        batch: &[Edge],
        hash: &TwoHash,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<S>> {
        let m = batch.len();
        if m < 2 {
            return Err(Error::invalid("twhin batch needs at least 2 edges"));
        }
        let user_idx: Vec<i64> = batch
            .iter()
            .map(|e| self.user_row.get(&e.user).map(|&r| r as i64).unwrap_or(-1))
            .collect();
        let items: Vec<u64> = batch.iter().map(|e| e.item).collect();
        let mut users = g.gather_param(store, self.user_table, &user_idx);
        let mut item_embs = self.item_embeddings(g, store, &items, hash);
        if let Some(rng) = train_rng {
            if self.cfg.dropout > 0.0 {
                users = users.dropout(&row_dropout_mask(m, self.cfg.dim, self.cfg.dropout, rng));
                item_embs =
                    item_embs.dropout(&row_dropout_mask(m, self.cfg.dim, self.cfg.dropout, rng));
            }
        }
        let users_n = users.l2_normalize_rows();

        // per edge type: normalize(item + edge_t), then select rows by the
        // batch edge types
        let mut logits: Option<Var<S>> = None;
        for (t, kind) in [(0i64, EdgeKind::Purchase), (1, EdgeKind::AddToCart)] {
            if !batch.iter().any(|e| e.kind == kind) {
                continue;
            }
            let edge_row = g.gather_param(store, self.edge_table, &[t]);
            let mt = item_embs.add_row(&edge_row).l2_normalize_rows();
            let lt = users_n.matmul_nt(&mt);
            let mut mask = vec![S::zero(); m * m];
            for (i, e) in batch.iter().enumerate() {
                if e.kind == kind {
                    for j in 0..m {
                        mask[i * m + j] = S::one();
                    }
                }
            }
            let masked = lt.mul_const(&mask);
            logits = Some(match logits.take() {
                None => masked,
                Some(acc) => acc.add(&masked),
            });
        }
        let logits = logits.unwrap();

        // −1/m Σ_i [ln σ(l_ii) + Σ_{j≠i} ln(1−σ(l_ij))], via softplus
        let diag = logits.take_diag();
        let pos = diag.neg().softplus().sum();
        let neg_all = logits.softplus().sum();
        let neg_diag = diag.softplus().sum();
        Ok(pos.add(&neg_all).sub(&neg_diag).scale(1.0 / m as f64))
    }

    /// Current user embeddings (raw table rows), one per selected user.
    pub fn export_users<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<(u64, Vec<f32>)> {
        let table = store.get(self.user_table);
        self.user_row
            .iter()
            .map(|(&uid, &row)| {
                let v = table.data[row * self.cfg.dim..(row + 1) * self.cfg.dim]
                    .iter()
                    .map(|x| x.as_f64() as f32)
                    .collect();
                (uid, v)
            })
            .collect()
    }

    /// Eval-mode logit for one edge (used by the link-prediction AUC).
    pub fn score_edge<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        edge: &Edge,
        hash: &TwoHash,
    ) -> Result<f64> {
        let row = self
            .user_row
            .get(&edge.user)
            .ok_or_else(|| Error::invalid(format!("unknown user {}", edge.user)))?;
        let table = store.get(self.user_table);
        let user: Vec<f64> =
            table.data[row * self.cfg.dim..(row + 1) * self.cfg.dim].iter().map(|v| v.as_f64()).collect();
        let g: Graph<S> = Graph::new();
        let item = self.item_embeddings(&g, store, &[edge.item], hash);
        let item: Vec<f64> = item.value().iter().map(|v| v.as_f64()).collect();
        let et = store.get(self.edge_table);
        let kind = edge.kind as usize;
        let edge_emb: Vec<f64> =
            et.data[kind * self.cfg.dim..(kind + 1) * self.cfg.dim].iter().map(|v| v.as_f64()).collect();
        Ok(twhin_score(&user, &item, &edge_emb))
    }
}

fn embed_content_with<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    ids: &ContentIds,
    items: &[ItemFeatures],
    hash: &TwoHash,
) -> Var<S> {
    use crate::encoders::IdNamespace;
    use crate::nn::concat_cols;
    let m = items.len();
    let price_idx: Vec<i64> =
        items.iter().map(|f| f.price_bucket.map(|p| p as i64).unwrap_or(-1)).collect();
    let price = g.gather_param(store, ids.price, &price_idx);
    let mut text: Option<Var<S>> = None;
    for p in 0..16 {
        let idx: Vec<i64> = items
            .iter()
            .map(|f| f.text_embedding.map(|e| e[p] as i64).unwrap_or(-1))
            .collect();
        let rows = g.gather_param(store, ids.text, &idx);
        text = Some(match text {
            None => rows,
            Some(t) => t.add(&rows),
        });
    }
    let text = text.unwrap().scale(1.0 / 16.0);
    let mut id_block: Option<Var<S>> = None;
    let mut add_ns = |ns: IdNamespace, get: &dyn Fn(&ItemFeatures) -> Option<u64>| {
        let mut h1 = Vec::with_capacity(m);
        let mut h2 = Vec::with_capacity(m);
        for f in items {
            match get(f) {
                Some(id) => {
                    let (a, b) = hash.indices(ns, id);
                    h1.push(a as i64);
                    h2.push(b as i64);
                }
                None => {
                    h1.push(-1);
                    h2.push(-1);
                }
            }
        }
        let v = g.gather_param(store, ids.muve, &h1).add(&g.gather_param(store, ids.muve, &h2));
        id_block = Some(match id_block.take() {
            None => v,
            Some(t) => t.add(&v),
        });
    };
    add_ns(IdNamespace::Sku, &|f| f.sku);
    add_ns(IdNamespace::Category, &|f| f.category);
    add_ns(IdNamespace::Url, &|f| f.url);
    let idv = id_block.unwrap();
    let cat = concat_cols(&[price, text, idv]);
    cat.matmul(&g.param(store, ids.proj_w)).add_row(&g.param(store, ids.proj_b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwhinStepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Trains TwHIN over shuffled edge batches with a constant learning rate.
/// Returns the model, store and per-step metrics. Users without edges keep
/// their initialized embeddings.
#[allow(clippy::too_many_arguments)]
pub fn train_twhin<S: Scalar>(
    edges: &EdgeSet,
    histories: &BTreeMap<u64, UserHistory>,
    cfg: &TwhinConfig,
    catalog: &ItemCatalog,
    seq_cfg: Option<&SeqModelConfig>,
    hash: &TwoHash,
    param_seed: u64,
    train_seed: u64,
) -> Result<(TwhinModel, ParamStore<S>, Vec<TwhinStepMetrics>)> {
    let users = select_users(histories, cfg.max_users);
    let mut store: ParamStore<S> = ParamStore::new(param_seed);
    let model = TwhinModel::register(&mut store, cfg, &users, edges, catalog, seq_cfg)?;
    let metrics = train_twhin_prepared(&model, &mut store, edges, cfg, hash, train_seed)?;
    Ok((model, store, metrics))
}

/// Training loop over an already-registered (possibly checkpoint-warmed)
/// model.
pub fn train_twhin_prepared<S: Scalar>(
    model: &TwhinModel,
    store: &mut ParamStore<S>,
    edges: &EdgeSet,
    cfg: &TwhinConfig,
    hash: &TwoHash,
    train_seed: u64,
) -> Result<Vec<TwhinStepMetrics>> {
    if edges.edges.is_empty() {
        return Err(Error::invalid("train_twhin: empty edge set"));
    }
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed);
    let mut order: Vec<usize> = (0..edges.edges.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut metrics = Vec::with_capacity(cfg.steps as usize);

    for step in 1..=cfg.steps {
        let take = cfg.batch_size.min(edges.edges.len()).max(2);
        let mut batch = Vec::with_capacity(take);
        while batch.len() < take {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(edges.edges[order[cursor]]);
            cursor += 1;
        }
        let g: Graph<S> = Graph::new();
        let loss = model.batch_loss(&g, store, &batch, hash, Some(&mut rng))?;
        let mut grads: Gradients<S> = backward(&loss)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(store, &grads, |_| cfg.lr);
        metrics.push(TwhinStepMetrics { step, loss: loss.scalar().as_f64(), grad_norm });
        if step % 100 == 0 || step == 1 {
            log::info!("twhin step {step}: loss {:.4}", loss.scalar().as_f64());
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests;
