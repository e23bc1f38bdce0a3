//! Multi-task causal-transformer sequential encoder.
//!
//! Heterogeneous event sequences are embedded as the sum of a content
//! embedding (price bin, text bag, hashed sku/category/url ids, projected
//! jointly) and a context embedding (event type, position, day-of-week,
//! hour, and two projected time scalars). A causal transformer over the
//! sequence feeds four objectives: next-event-type prediction, time-delta
//! regression, next-item prediction (sampled softmax with logQ correction
//! and uncertainty weighting) and next-URL prediction (sampled softmax).

mod losses;
mod model;

pub use losses::{loss_netp, loss_nip, loss_nup, loss_tdp, SampledSoftmaxBatch};
pub use model::{train_seq_encoder, ContentIds, SeqModel, SeqTrainConfig, StepMetrics};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::MUVE_VOCAB;
use crate::error::{Error, Result};
use crate::event::{Event, EventType, UserHistory};

/// Sequential encoder hyperparameters. Vocabulary sizes are fixed by the
/// data; the desk preset scales only depth, widths, batch and negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    pub max_len: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub n_inbatch_neg: usize,
    pub n_uniform_neg: usize,
    pub muve_vocab: usize,
    pub hash_seed1: u64,
    pub hash_seed2: u64,
}

impl SeqModelConfig {
    pub fn desk() -> Self {
        SeqModelConfig {
            max_len: 32,
            hidden_dim: 64,
            num_layers: 2,
            embedding_dim: 32,
            dropout: 0.1,
            attn_dropout: 0.1,
            n_inbatch_neg: 128,
            n_uniform_neg: 128,
            muve_vocab: MUVE_VOCAB,
            hash_seed1: 0x5eed_0001,
            hash_seed2: 0x5eed_0002,
        }
    }

    pub fn paper() -> Self {
        SeqModelConfig {
            max_len: 256,
            hidden_dim: 1024,
            num_layers: 20,
            embedding_dim: 256,
            n_inbatch_neg: 8192,
            n_uniform_neg: 8192,
            ..Self::desk()
        }
    }

    /// hidden_dim/64, at least 1.
    pub fn heads(&self) -> usize {
        (self.hidden_dim / 64).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.embedding_dim == 0 || self.num_layers == 0 {
            return Err(Error::invalid("seq dims must be positive"));
        }
        if self.hidden_dim % self.heads() != 0 {
            return Err(Error::invalid(format!(
                "heads {} must divide hidden_dim {}",
                self.heads(),
                self.hidden_dim
            )));
        }
        if self.max_len == 0 || self.max_len > 256 {
            return Err(Error::invalid("max_len must be in 1..=256 (position vocab)"));
        }
        Ok(())
    }
}

/// Item-side features of one event (the content pathway input).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemFeatures {
    pub sku: Option<u64>,
    pub category: Option<u64>,
    pub price_bucket: Option<u8>,
    pub url: Option<u64>,
    pub text_embedding: Option<[u8; 16]>,
}

impl ItemFeatures {
    pub fn of_event(e: &Event) -> Self {
        ItemFeatures {
            sku: e.sku,
            category: e.category,
            price_bucket: e.price_bucket,
            url: e.url_id,
            text_embedding: e.text_embedding,
        }
    }
}

/// Distinct items seen in the training period; the uniform-negative pool.
#[derive(Debug, Clone)]
pub struct ItemCatalog {
    pub items: Vec<ItemFeatures>,
}

impl ItemCatalog {
    pub fn from_histories(histories: &BTreeMap<u64, UserHistory>) -> Self {
        let mut by_sku: BTreeMap<u64, ItemFeatures> = BTreeMap::new();
        for h in histories.values() {
            for e in &h.events {
                if let Some(sku) = e.sku {
                    by_sku.entry(sku).or_insert_with(|| {
                        let mut f = ItemFeatures::of_event(e);
                        f.url = None;
                        f
                    });
                }
            }
        }
        ItemCatalog { items: by_sku.into_values().collect() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One event prepared for sequence modeling, with its global time context.
#[derive(Debug, Clone)]
pub struct SeqEvent {
    pub etype: EventType,
    pub ts: i64,
    pub item: ItemFeatures,
    pub log_hours_since_prev: f64,
    pub log_days_since_first: f64,
}

fn log1p_hours(delta_seconds: i64) -> f64 {
    (delta_seconds.max(0) as f64 / 3600.0).ln_1p()
}

fn log1p_days(delta_seconds: i64) -> f64 {
    (delta_seconds.max(0) as f64 / 86_400.0).ln_1p()
}

fn to_seq_events(h: &UserHistory) -> Vec<SeqEvent> {
    let first_ts = h.first_ts().unwrap_or(0);
    let mut prev_ts = None;
    h.events
        .iter()
        .map(|e| {
            let since_prev = prev_ts.map(|p: i64| e.ts - p).unwrap_or(0);
            prev_ts = Some(e.ts);
            SeqEvent {
                etype: e.event_type,
                ts: e.ts,
                item: ItemFeatures::of_event(e),
                log_hours_since_prev: log1p_hours(since_prev),
                log_days_since_first: log1p_days(e.ts - first_ts),
            }
        })
        .collect()
}

/// One training chunk: up to `max_len` consecutive events of one user.
/// Targets never cross chunk edges.
#[derive(Debug, Clone)]
pub struct Chunk {
    pub user_id: u64,
    pub events: Vec<SeqEvent>,
}

/// Splits every history into chunks of `max_len` consecutive events,
/// dropping chunks too short to carry a target.
pub fn build_chunks(histories: &BTreeMap<u64, UserHistory>, max_len: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (&uid, h) in histories {
        let events = to_seq_events(h);
        for chunk in events.chunks(max_len) {
            if chunk.len() >= 2 {
                out.push(Chunk { user_id: uid, events: chunk.to_vec() });
            }
        }
    }
    out
}

/// The suffix chunk used at inference: the `max_len` most recent events.
pub fn inference_chunk(h: &UserHistory, max_len: usize) -> Result<Chunk> {
    if h.events.is_empty() {
        return Err(Error::invalid(format!("user {} has an empty history", h.user_id)));
    }
    let events = to_seq_events(h);
    let start = events.len().saturating_sub(max_len);
    Ok(Chunk { user_id: h.user_id, events: events[start..].to_vec() })
}

/// Padded batch of chunks with shifted next-event targets.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub b: usize,
    pub n: usize,
    /// Per flat position `b*n + i`; `None` marks padding.
    pub positions: Vec<Option<SeqEvent>>,
    /// Index of the last valid position per sequence.
    pub last_valid: Vec<usize>,
    /// Flat positions that have a next event inside the chunk.
    pub next_rows: Vec<usize>,
    pub next_type: Vec<usize>,
    /// log(1+hours) gap to the next event.
    pub next_delta: Vec<f64>,
    /// Flat positions whose next event is item-specific, and the item.
    pub item_rows: Vec<usize>,
    pub item_targets: Vec<ItemFeatures>,
    /// Flat positions whose next event is a page visit, and the url.
    pub url_rows: Vec<usize>,
    pub url_targets: Vec<u64>,
}

impl SeqBatch {
    pub fn from_chunks(chunks: &[&Chunk], n: usize) -> SeqBatch {
        let b = chunks.len();
        let mut batch = SeqBatch {
            b,
            n,
            positions: vec![None; b * n],
            last_valid: vec![0; b],
            next_rows: Vec::new(),
            next_type: Vec::new(),
            next_delta: Vec::new(),
            item_rows: Vec::new(),
            item_targets: Vec::new(),
            url_rows: Vec::new(),
            url_targets: Vec::new(),
        };
        for (ci, chunk) in chunks.iter().enumerate() {
            let len = chunk.events.len().min(n);
            batch.last_valid[ci] = ci * n + len.saturating_sub(1);
            for i in 0..len {
                batch.positions[ci * n + i] = Some(chunk.events[i].clone());
            }
            for i in 0..len.saturating_sub(1) {
                let flat = ci * n + i;
                let next = &chunk.events[i + 1];
                batch.next_rows.push(flat);
                batch.next_type.push(next.etype.code());
                batch.next_delta.push(log1p_hours(next.ts - chunk.events[i].ts));
                match next.etype {
                    t if t.is_item_specific() => {
                        batch.item_rows.push(flat);
                        let mut item = next.item.clone();
                        item.url = None;
                        batch.item_targets.push(item);
                    }
                    EventType::PageVisit => {
                        batch.url_rows.push(flat);
                        batch.url_targets.push(next.item.url.unwrap_or(0));
                    }
                    _ => {} // search queries contribute only NETP/TDP targets
                }
            }
        }
        batch
    }
}
