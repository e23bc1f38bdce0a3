//! Parameter registration, forward pass, graph losses and the training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{IdNamespace, TwoHash, TEXT_BINS};
use crate::error::{Error, Result};
use crate::event::{day_of_week, hour_of_day, Event, UserHistory, NUM_EVENT_TYPES};
use crate::nn::{
    backward, causal_self_attention, clip_global_norm, concat_cols, dropout_mask, warmup_lr,
    AdamState, Graph, Init, ParamStore, Var,
};
use crate::scalar::Scalar;
use crate::seq::{inference_chunk, Chunk, ItemCatalog, ItemFeatures, SeqBatch, SeqModelConfig};

const POSITION_VOCAB: usize = 256;
const PRICE_VOCAB: usize = 100;
const MASK_NEG: f64 = -1e9;

/// Parameter ids of the shared content pathway (also reused as the TwHIN
/// item encoder).
#[derive(Debug, Clone)]
pub struct ContentIds {
    pub price: usize,
    pub text: usize,
    pub muve: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

impl ContentIds {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, cfg: &SeqModelConfig) -> Self {
        let e = cfg.embedding_dim;
        let emb = Init::Normal(0.02);
        ContentIds {
            price: store.add_tagged(&format!("{prefix}content.price"), PRICE_VOCAB, e, emb, 0, true),
            text: store.add_tagged(&format!("{prefix}content.text"), TEXT_BINS, e, emb, 0, true),
            muve: store.add_tagged(&format!("{prefix}content.muve"), cfg.muve_vocab, e, emb, 0, true),
            proj_w: store.add(&format!("{prefix}content.proj.w"), 3 * e, e, Init::UniformFanIn),
            proj_b: store.add(&format!("{prefix}content.proj.b"), 1, e, Init::Zeros),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1g: usize,
    ln1b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2g: usize,
    ln2b: usize,
}

#[derive(Debug, Clone)]
pub struct SeqIds {
    pub content: ContentIds,
    ty: usize,
    pos: usize,
    dow: usize,
    hour: usize,
    w_hours: usize,
    w_days: usize,
    in_w: usize,
    in_b: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    netp_w: usize,
    netp_b: usize,
    tdp_w: usize,
    tdp_b: usize,
    query_w: usize,
    query_b: usize,
    pub item_w: usize,
    pub item_b: usize,
    url_w: usize,
    url_b: usize,
    log_tau_nip: usize,
    log_tau_nup: usize,
}

/// The sequential encoder: owns parameter ids and the hash config; the
/// parameter values live in a caller-owned [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SeqModel {
    pub cfg: SeqModelConfig,
    pub ids: SeqIds,
    pub hash: TwoHash,
}

/// Per-step training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub netp: f64,
    pub tdp: f64,
    pub nip: f64,
    pub nup: f64,
    pub grad_norm: f64,
}

impl SeqModel {
    /// Registers all parameters under `prefix` (usually "seq.").
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, cfg: &SeqModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (e, h) = (cfg.embedding_dim, cfg.hidden_dim);
        let emb = Init::Normal(0.02);
        let content = ContentIds::register(store, prefix, cfg);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("{prefix}block{l}.");
            layers.push(LayerIds {
                wq: store.add(&format!("{p}attn.wq"), h, h, Init::UniformFanIn),
                bq: store.add(&format!("{p}attn.bq"), 1, h, Init::Zeros),
                wk: store.add(&format!("{p}attn.wk"), h, h, Init::UniformFanIn),
                bk: store.add(&format!("{p}attn.bk"), 1, h, Init::Zeros),
                wv: store.add(&format!("{p}attn.wv"), h, h, Init::UniformFanIn),
                bv: store.add(&format!("{p}attn.bv"), 1, h, Init::Zeros),
                wo: store.add(&format!("{p}attn.wo"), h, h, Init::UniformFanIn),
                bo: store.add(&format!("{p}attn.bo"), 1, h, Init::Zeros),
                ln1g: store.add(&format!("{p}ln1.g"), 1, h, Init::Const(1.0)),
                ln1b: store.add(&format!("{p}ln1.b"), 1, h, Init::Zeros),
                w1: store.add(&format!("{p}ffn.w1"), h, 4 * h, Init::UniformFanIn),
                b1: store.add(&format!("{p}ffn.b1"), 1, 4 * h, Init::Zeros),
                w2: store.add(&format!("{p}ffn.w2"), 4 * h, h, Init::UniformFanIn),
                b2: store.add(&format!("{p}ffn.b2"), 1, h, Init::Zeros),
                ln2g: store.add(&format!("{p}ln2.g"), 1, h, Init::Const(1.0)),
                ln2b: store.add(&format!("{p}ln2.b"), 1, h, Init::Zeros),
            });
        }
        let ids = SeqIds {
            content,
            ty: store.add_tagged(&format!("{prefix}ctx.type"), NUM_EVENT_TYPES, e, emb, 0, true),
            pos: store.add_tagged(&format!("{prefix}ctx.pos"), POSITION_VOCAB, e, emb, 0, true),
            dow: store.add_tagged(&format!("{prefix}ctx.dow"), 7, e, emb, 0, true),
            hour: store.add_tagged(&format!("{prefix}ctx.hour"), 24, e, emb, 0, true),
            w_hours: store.add(&format!("{prefix}ctx.w_hours"), 1, e, Init::UniformFanIn),
            w_days: store.add(&format!("{prefix}ctx.w_days"), 1, e, Init::UniformFanIn),
            in_w: store.add(&format!("{prefix}input.w"), e, h, Init::UniformFanIn),
            in_b: store.add(&format!("{prefix}input.b"), 1, h, Init::Zeros),
            layers,
            lnf_g: store.add(&format!("{prefix}lnf.g"), 1, h, Init::Const(1.0)),
            lnf_b: store.add(&format!("{prefix}lnf.b"), 1, h, Init::Zeros),
            netp_w: store.add(&format!("{prefix}head.netp.w"), h, NUM_EVENT_TYPES, Init::UniformFanIn),
            netp_b: store.add(&format!("{prefix}head.netp.b"), 1, NUM_EVENT_TYPES, Init::Zeros),
            tdp_w: store.add(&format!("{prefix}head.tdp.w"), h, 1, Init::UniformFanIn),
            tdp_b: store.add(&format!("{prefix}head.tdp.b"), 1, 1, Init::Zeros),
            query_w: store.add(&format!("{prefix}head.query.w"), h, e, Init::UniformFanIn),
            query_b: store.add(&format!("{prefix}head.query.b"), 1, e, Init::Zeros),
            item_w: store.add(&format!("{prefix}head.item.w"), e, e, Init::UniformFanIn),
            item_b: store.add(&format!("{prefix}head.item.b"), 1, e, Init::Zeros),
            url_w: store.add(&format!("{prefix}head.url.w"), e, e, Init::UniformFanIn),
            url_b: store.add(&format!("{prefix}head.url.b"), 1, e, Init::Zeros),
            log_tau_nip: store.add(&format!("{prefix}loss.log_tau_nip"), 1, 1, Init::Const((0.1f64).ln())),
            log_tau_nup: store.add(&format!("{prefix}loss.log_tau_nup"), 1, 1, Init::Const((0.1f64).ln())),
        };
        Ok(SeqModel {
            cfg: cfg.clone(),
            ids,
            hash: TwoHash::new(cfg.hash_seed1, cfg.hash_seed2, cfg.muve_vocab),
        })
    }

    /// Content embedding of a list of item-feature rows → [m, E].
    pub fn embed_content<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        items: &[ItemFeatures],
    ) -> Var<S> {
        let m = items.len();
        let price_idx: Vec<i64> =
            items.iter().map(|f| f.price_bucket.map(|p| p as i64).unwrap_or(-1)).collect();
        let price = g.gather_param(store, self.ids.content.price, &price_idx);

        // text bag: mean of the 16 per-position rows (missing text → zeros)
        let mut text: Option<Var<S>> = None;
        for p in 0..16 {
            let idx: Vec<i64> = items
                .iter()
                .map(|f| f.text_embedding.map(|e| e[p] as i64).unwrap_or(-1))
                .collect();
            let rows = g.gather_param(store, self.ids.content.text, &idx);
            text = Some(match text {
                None => rows,
                Some(t) => t.add(&rows),
            });
        }
        let text = text.unwrap().scale(1.0 / 16.0);

        // hashed id block: two lookups per applicable namespace, summed
        let mut id_block: Option<Var<S>> = None;
        let mut add_ns = |ns: IdNamespace, get: &dyn Fn(&ItemFeatures) -> Option<u64>| {
            let mut h1 = Vec::with_capacity(m);
            let mut h2 = Vec::with_capacity(m);
            for f in items {
                match get(f) {
                    Some(id) => {
                        let (a, b) = self.hash.indices(ns, id);
                        h1.push(a as i64);
                        h2.push(b as i64);
                    }
                    None => {
                        h1.push(-1);
                        h2.push(-1);
                    }
                }
            }
            let v = g
                .gather_param(store, self.ids.content.muve, &h1)
                .add(&g.gather_param(store, self.ids.content.muve, &h2));
            id_block = Some(match id_block.take() {
                None => v,
                Some(t) => t.add(&v),
            });
        };
        add_ns(IdNamespace::Sku, &|f| f.sku);
        add_ns(IdNamespace::Category, &|f| f.category);
        add_ns(IdNamespace::Url, &|f| f.url);
        let ids = id_block.unwrap();

        let cat = concat_cols(&[price, text, ids]);
        let w = g.param(store, self.ids.content.proj_w);
        let b = g.param(store, self.ids.content.proj_b);
        cat.matmul(&w).add_row(&b)
    }

    /// Event embedding = content + context, for every position of the batch
    /// (padding → zero feature rows) → [b·n, E].
    fn embed_events<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, batch: &SeqBatch) -> Var<S> {
        let bn = batch.b * batch.n;
        let mut items = Vec::with_capacity(bn);
        let mut ty = Vec::with_capacity(bn);
        let mut pos = Vec::with_capacity(bn);
        let mut dow = Vec::with_capacity(bn);
        let mut hour = Vec::with_capacity(bn);
        let mut hours_col = Vec::with_capacity(bn);
        let mut days_col = Vec::with_capacity(bn);
        for (flat, slot) in batch.positions.iter().enumerate() {
            match slot {
                Some(ev) => {
                    items.push(ev.item.clone());
                    ty.push(ev.etype.code() as i64);
                    pos.push((flat % batch.n) as i64);
                    dow.push(day_of_week(ev.ts) as i64);
                    hour.push(hour_of_day(ev.ts) as i64);
                    hours_col.push(S::of(ev.log_hours_since_prev));
                    days_col.push(S::of(ev.log_days_since_first));
                }
                None => {
                    items.push(ItemFeatures::default());
                    ty.push(-1);
                    pos.push(-1);
                    dow.push(-1);
                    hour.push(-1);
                    hours_col.push(S::zero());
                    days_col.push(S::zero());
                }
            }
        }
        let content = self.embed_content(g, store, &items);
        let ctx = g
            .gather_param(store, self.ids.ty, &ty)
            .add(&g.gather_param(store, self.ids.pos, &pos))
            .add(&g.gather_param(store, self.ids.dow, &dow))
            .add(&g.gather_param(store, self.ids.hour, &hour));
        let hours = g.constant(bn, 1, hours_col).matmul(&g.param(store, self.ids.w_hours));
        let days = g.constant(bn, 1, days_col).matmul(&g.param(store, self.ids.w_days));
        content.add(&ctx).add(&hours).add(&days)
    }

    /// Transformer encoding → hidden states [b·n, H].
    fn encode_batch<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        batch: &SeqBatch,
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<S>> {
        let bn = batch.b * batch.n;
        let heads = self.cfg.heads();
        let emb = self.embed_events(g, store, batch);
        let mut x = emb
            .matmul(&g.param(store, self.ids.in_w))
            .add_row(&g.param(store, self.ids.in_b));
        for l in &self.ids.layers {
            let a = x.layer_norm(&g.param(store, l.ln1g), &g.param(store, l.ln1b));
            let q = a.matmul(&g.param(store, l.wq)).add_row(&g.param(store, l.bq));
            let k = a.matmul(&g.param(store, l.wk)).add_row(&g.param(store, l.bk));
            let v = a.matmul(&g.param(store, l.wv)).add_row(&g.param(store, l.bv));
            let attn_mask = match train_rng.as_deref_mut() {
                Some(rng) if self.cfg.attn_dropout > 0.0 => Some(dropout_mask::<S>(
                    batch.b * heads * batch.n * batch.n,
                    self.cfg.attn_dropout,
                    rng,
                )),
                _ => None,
            };
            let att = causal_self_attention(&q, &k, &v, batch.b, batch.n, heads, attn_mask)?;
            let mut att = att.matmul(&g.param(store, l.wo)).add_row(&g.param(store, l.bo));
            if let Some(rng) = train_rng.as_deref_mut() {
                if self.cfg.dropout > 0.0 {
                    att = att.dropout(&dropout_mask(bn * self.cfg.hidden_dim, self.cfg.dropout, rng));
                }
            }
            x = x.add(&att);
            let f = x.layer_norm(&g.param(store, l.ln2g), &g.param(store, l.ln2b));
            let mut f = f
                .matmul(&g.param(store, l.w1))
                .add_row(&g.param(store, l.b1))
                .gelu()
                .matmul(&g.param(store, l.w2))
                .add_row(&g.param(store, l.b2));
            if let Some(rng) = train_rng.as_deref_mut() {
                if self.cfg.dropout > 0.0 {
                    f = f.dropout(&dropout_mask(bn * self.cfg.hidden_dim, self.cfg.dropout, rng));
                }
            }
            x = x.add(&f);
        }
        Ok(x.layer_norm(&g.param(store, self.ids.lnf_g), &g.param(store, self.ids.lnf_b)))
    }

    fn query_embeddings<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        hidden: &Var<S>,
        rows: &[usize],
    ) -> Var<S> {
        hidden
            .gather_rows(rows)
            .matmul(&g.param(store, self.ids.query_w))
            .add_row(&g.param(store, self.ids.query_b))
    }

    fn item_embeddings<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        items: &[ItemFeatures],
    ) -> Var<S> {
        self.embed_content(g, store, items)
            .matmul(&g.param(store, self.ids.item_w))
            .add_row(&g.param(store, self.ids.item_b))
    }

    fn url_embeddings<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        urls: &[u64],
    ) -> Var<S> {
        let items: Vec<ItemFeatures> =
            urls.iter().map(|&u| ItemFeatures { url: Some(u), ..Default::default() }).collect();
        self.embed_content(g, store, &items)
            .matmul(&g.param(store, self.ids.url_w))
            .add_row(&g.param(store, self.ids.url_b))
    }

    /// Builds the four objectives on the tape. Returns the total loss and
    /// the individual term values.
    #[allow(clippy::type_complexity)]
    pub fn forward_losses<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        batch: &SeqBatch,
        catalog: &ItemCatalog,
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<(Var<S>, [f64; 4])> {
        let hidden =
            self.encode_batch(g, store, batch, if train { Some(&mut *rng) } else { None })?;
        let mut rng = if train { Some(rng) } else { None };

        let mut parts = [0.0f64; 4];
        let mut total: Option<Var<S>> = None;
        let mut accumulate = |term: Var<S>, slot: &mut f64| {
            *slot = term.scalar().as_f64();
            total = Some(match total.take() {
                None => term,
                Some(t) => t.add(&term),
            });
        };

        if !batch.next_rows.is_empty() {
            let hs = hidden.gather_rows(&batch.next_rows);
            let m = batch.next_rows.len();
            // NETP: mean cross-entropy against the one-hot next type
            let logits = hs
                .matmul(&g.param(store, self.ids.netp_w))
                .add_row(&g.param(store, self.ids.netp_b));
            let logsm = logits.log_softmax_rows();
            let mut onehot = vec![S::zero(); m * NUM_EVENT_TYPES];
            for (i, &c) in batch.next_type.iter().enumerate() {
                onehot[i * NUM_EVENT_TYPES + c] = S::one();
            }
            let netp = logsm.mul_const(&onehot).sum().scale(-1.0 / m as f64);
            accumulate(netp, &mut parts[0]);

            // TDP: mean squared error on log(1+hours)
            let preds = hs
                .matmul(&g.param(store, self.ids.tdp_w))
                .add_row(&g.param(store, self.ids.tdp_b));
            let neg_target: Vec<S> = batch.next_delta.iter().map(|&d| S::of(-d)).collect();
            let diff = preds.add_const(&neg_target);
            let tdp = diff.mul(&diff).mean();
            accumulate(tdp, &mut parts[1]);
        }

        // NIP over item targets
        if !batch.item_rows.is_empty() && !catalog.is_empty() {
            let mi = batch.item_rows.len();
            let qn = self
                .query_embeddings(g, store, &hidden, &batch.item_rows)
                .l2_normalize_rows();
            let pn = self.item_embeddings(g, store, &batch.item_targets).l2_normalize_rows();
            let inv_tau = g.param(store, self.ids.log_tau_nip).neg().exp();
            let sp = qn.row_dot(&pn).mul_scalar(&inv_tau);

            // shared in-batch negative columns
            let k_in = self.cfg.n_inbatch_neg.min(mi);
            let mut cols: Vec<usize> = (0..mi).collect();
            if let Some(r) = rng.as_deref_mut() {
                cols.shuffle(r);
            }
            cols.truncate(k_in);
            // uniform catalog negatives
            let k_un = self.cfg.n_uniform_neg.min(catalog.len());
            let uni: Vec<usize> = match rng.as_deref_mut() {
                Some(r) => (0..k_un).map(|_| r.gen_range(0..catalog.len())).collect(),
                None => (0..k_un).collect(),
            };

            // mixture proposal logQ over both negative pools
            let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
            for t in &batch.item_targets {
                *counts.entry(t.sku.unwrap_or(0)).or_insert(0) += 1;
            }
            let log_q = |sku: u64| -> f64 {
                let p_batch = counts.get(&sku).copied().unwrap_or(0) as f64 / mi as f64;
                let p_uni = 1.0 / catalog.len() as f64;
                let denom = (k_in + k_un) as f64;
                ((k_in as f64 * p_batch + k_un as f64 * p_uni) / denom).ln()
            };

            let mut blocks = vec![sp.clone()];
            if k_in > 0 {
                let s_in = qn.matmul_nt(&pn.gather_rows(&cols)).mul_scalar(&inv_tau);
                let mut c = vec![S::zero(); mi * k_in];
                for i in 0..mi {
                    for (j, &col) in cols.iter().enumerate() {
                        let mut v = -log_q(batch.item_targets[col].sku.unwrap_or(0));
                        if col == i {
                            v += MASK_NEG; // a query is never its own negative
                        }
                        c[i * k_in + j] = S::of(v);
                    }
                }
                blocks.push(s_in.add_const(&c));
            }
            if k_un > 0 {
                let uni_items: Vec<ItemFeatures> =
                    uni.iter().map(|&i| catalog.items[i].clone()).collect();
                let hn = self.item_embeddings(g, store, &uni_items).l2_normalize_rows();
                let s_un = qn.matmul_nt(&hn).mul_scalar(&inv_tau);
                let mut c = vec![S::zero(); mi * k_un];
                for i in 0..mi {
                    for (j, item) in uni_items.iter().enumerate() {
                        c[i * k_un + j] = S::of(-log_q(item.sku.unwrap_or(0)));
                    }
                }
                blocks.push(s_un.add_const(&c));
            }
            let lse = concat_cols(&blocks).logsumexp_rows();
            let log_p = sp.sub(&lse);
            // uncertainty weight w = sg(1 − P): enters as a constant
            let w: Vec<S> = log_p.value().iter().map(|&lp| S::one() - lp.exp()).collect();
            let nip = log_p.mul_const(&w).sum().scale(-1.0 / mi as f64);
            accumulate(nip, &mut parts[2]);
        }

        // NUP over page-visit targets, plain in-batch sampled softmax
        if !batch.url_rows.is_empty() {
            let mu = batch.url_rows.len();
            let qn = self
                .query_embeddings(g, store, &hidden, &batch.url_rows)
                .l2_normalize_rows();
            let pn = self.url_embeddings(g, store, &batch.url_targets).l2_normalize_rows();
            let inv_tau = g.param(store, self.ids.log_tau_nup).neg().exp();
            let sp = qn.row_dot(&pn).mul_scalar(&inv_tau);
            let k_in = self.cfg.n_inbatch_neg.min(mu);
            let mut cols: Vec<usize> = (0..mu).collect();
            if let Some(r) = rng.as_deref_mut() {
                cols.shuffle(r);
            }
            cols.truncate(k_in);
            let s_in = qn.matmul_nt(&pn.gather_rows(&cols)).mul_scalar(&inv_tau);
            let mut c = vec![S::zero(); mu * k_in];
            for i in 0..mu {
                for (j, &col) in cols.iter().enumerate() {
                    if col == i {
                        c[i * k_in + j] = S::of(MASK_NEG);
                    }
                }
            }
            let lse = concat_cols(&[sp.clone(), s_in.add_const(&c)]).logsumexp_rows();
            let nup = lse.sub(&sp).mean();
            accumulate(nup, &mut parts[3]);
        }

        let total = total.ok_or_else(|| Error::invalid("batch produced no loss terms"))?;
        Ok((total, parts))
    }

    /// Hidden states and user embedding (the projected final hidden state)
    /// of one history, truncated to the most recent `max_len` events.
    pub fn encode_history<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        h: &UserHistory,
    ) -> Result<(Vec<S>, Vec<S>)> {
        let chunk = inference_chunk(h, self.cfg.max_len)?;
        let len = chunk.events.len();
        let batch = SeqBatch::from_chunks(&[&chunk], self.cfg.max_len);
        let g: Graph<S> = Graph::new();
        let hidden = self.encode_batch(&g, store, &batch, None)?;
        let user = self.query_embeddings(&g, store, &hidden, &[len - 1]);
        let hdata = hidden.value();
        Ok((hdata[..len * self.cfg.hidden_dim].to_vec(), user.value()))
    }

    /// Batch export of user embeddings (eval mode, deterministic). Users
    /// with empty histories get zero vectors.
    pub fn encode_users<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        histories: &BTreeMap<u64, UserHistory>,
    ) -> Result<Vec<(u64, Vec<f32>)>> {
        let mut out = Vec::with_capacity(histories.len());
        let mut pending: Vec<(u64, Chunk)> = Vec::new();
        let flush = |pending: &mut Vec<(u64, Chunk)>, out: &mut Vec<(u64, Vec<f32>)>| -> Result<()> {
            if pending.is_empty() {
                return Ok(());
            }
            let chunks: Vec<&Chunk> = pending.iter().map(|(_, c)| c).collect();
            let batch = SeqBatch::from_chunks(&chunks, self.cfg.max_len);
            let g: Graph<S> = Graph::new();
            let hidden = self.encode_batch(&g, store, &batch, None)?;
            let users = self.query_embeddings(&g, store, &hidden, &batch.last_valid);
            let data = users.value();
            let e = self.cfg.embedding_dim;
            for (i, (uid, _)) in pending.iter().enumerate() {
                out.push((*uid, data[i * e..(i + 1) * e].iter().map(|v| v.as_f64() as f32).collect()));
            }
            pending.clear();
            Ok(())
        };
        for (&uid, h) in histories {
            if h.events.is_empty() {
                out.push((uid, vec![0.0; self.cfg.embedding_dim]));
                continue;
            }
            pending.push((uid, inference_chunk(h, self.cfg.max_len)?));
            if pending.len() >= 64 {
                flush(&mut pending, &mut out)?;
            }
        }
        flush(&mut pending, &mut out)?;
        out.sort_by_key(|(uid, _)| *uid);
        Ok(out)
    }

    /// Embedding of a single event (content + context), mostly for tests.
    pub fn event_embedding<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        e: &Event,
        position: usize,
        log_hours_since_prev: f64,
        log_days_since_first: f64,
    ) -> Vec<S> {
        let g: Graph<S> = Graph::new();
        let item = ItemFeatures::of_event(e);
        let content = self.embed_content(&g, store, &[item]);
        let ctx = g
            .gather_param(store, self.ids.ty, &[e.event_type.code() as i64])
            .add(&g.gather_param(store, self.ids.pos, &[position as i64]))
            .add(&g.gather_param(store, self.ids.dow, &[day_of_week(e.ts) as i64]))
            .add(&g.gather_param(store, self.ids.hour, &[hour_of_day(e.ts) as i64]));
        let hours = g
            .constant(1, 1, vec![S::of(log_hours_since_prev)])
            .matmul(&g.param(store, self.ids.w_hours));
        let days = g
            .constant(1, 1, vec![S::of(log_days_since_first)])
            .matmul(&g.param(store, self.ids.w_days));
        content.add(&ctx).add(&hours).add(&days).value()
    }
}

/// Training-loop options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl SeqTrainConfig {
    pub fn desk() -> Self {
        SeqTrainConfig {
            steps: 500,
            batch_size: 64,
            lr_start: 1e-5,
            lr_peak: 1e-4,
            warmup_steps: 150,
            clip_norm: 1.0,
            seed: 1,
        }
    }

    pub fn paper() -> Self {
        SeqTrainConfig { steps: 10_000, batch_size: 8192, warmup_steps: 3000, ..Self::desk() }
    }
}

/// Trains a sequential encoder on the given histories. Deterministic for a
/// fixed (config, seed).
pub fn train_seq_encoder<S: Scalar>(
    histories: &BTreeMap<u64, UserHistory>,
    cfg: &SeqModelConfig,
    tcfg: &SeqTrainConfig,
    param_seed: u64,
) -> Result<(SeqModel, ParamStore<S>, Vec<StepMetrics>)> {
    let chunks = crate::seq::build_chunks(histories, cfg.max_len);
    if chunks.is_empty() {
        return Err(Error::invalid("train_seq_encoder: no trainable chunks"));
    }
    let catalog = ItemCatalog::from_histories(histories);
    let mut store: ParamStore<S> = ParamStore::new(param_seed);
    let model = SeqModel::register(&mut store, "seq.", cfg)?;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut metrics = Vec::with_capacity(tcfg.steps as usize);

    for step in 1..=tcfg.steps {
        let mut picked = Vec::with_capacity(tcfg.batch_size);
        while picked.len() < tcfg.batch_size.min(chunks.len()) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&chunks[order[cursor]]);
            cursor += 1;
        }
        let batch = SeqBatch::from_chunks(&picked, cfg.max_len);
        let g: Graph<S> = Graph::new();
        let (loss, parts) = model.forward_losses(&g, &store, &batch, &catalog, &mut rng, true)?;
        let mut grads = backward(&loss)?;
        let grad_norm = clip_global_norm(&mut grads, tcfg.clip_norm);
        let lr = warmup_lr(step, tcfg.lr_start, tcfg.lr_peak, tcfg.warmup_steps);
        adam.step(&mut store, &grads, |_| lr);
        metrics.push(StepMetrics {
            step,
            lr,
            loss: loss.scalar().as_f64(),
            netp: parts[0],
            tdp: parts[1],
            nip: parts[2],
            nup: parts[3],
            grad_norm,
        });
        if step % 100 == 0 || step == 1 {
            log::info!("seq step {step}: loss {:.4} lr {lr:.2e}", loss.scalar().as_f64());
        }
    }
    Ok((model, store, metrics))
}
