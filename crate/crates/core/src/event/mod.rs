//! Canonical event types, ingestion, validation and timestamp splitting.
//!
//! An [`Event`] is one timestamped user action of five kinds. Item-specific
//! actions (cart addition, purchase, cart removal) carry SKU, category and a
//! quantized price bucket; page visits carry a URL id; search queries carry a
//! 16-byte quantized text embedding. Per-user chronological sequences
//! ([`UserHistory`]) are the unit of every downstream computation.

mod parse;
mod synth;

pub use parse::{parse_events, write_events_csv, write_events_jsonl, Diagnostic, EventFormat, ParseOutcome};
pub use synth::{generate_synthetic, ArchetypeMix, SynthConfig, SynthManifest};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// The five event kinds, with stable integer codes 0..4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventType {
    AddToCart = 0,
    Purchase = 1,
    RemoveFromCart = 2,
    PageVisit = 3,
    SearchQuery = 4,
}

/// Number of event types.
pub const NUM_EVENT_TYPES: usize = 5;

impl EventType {
    pub const ALL: [EventType; NUM_EVENT_TYPES] = [
        EventType::AddToCart,
        EventType::Purchase,
        EventType::RemoveFromCart,
        EventType::PageVisit,
        EventType::SearchQuery,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::AddToCart => "add_to_cart",
            EventType::Purchase => "purchase",
            EventType::RemoveFromCart => "remove_from_cart",
            EventType::PageVisit => "page_visit",
            EventType::SearchQuery => "search_query",
        }
    }

    pub fn from_str_code(s: &str) -> Option<Self> {
        match s {
            "add_to_cart" => Some(EventType::AddToCart),
            "purchase" => Some(EventType::Purchase),
            "remove_from_cart" => Some(EventType::RemoveFromCart),
            "page_visit" => Some(EventType::PageVisit),
            "search_query" => Some(EventType::SearchQuery),
            _ => None,
        }
    }

    /// Cart additions, purchases and removals reference an item.
    pub fn is_item_specific(self) -> bool {
        matches!(
            self,
            EventType::AddToCart | EventType::Purchase | EventType::RemoveFromCart
        )
    }
}

/// One timestamped user action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: u64,
    pub event_type: EventType,
    /// Epoch seconds.
    pub ts: i64,
    pub sku: Option<u64>,
    pub category: Option<u64>,
    /// Quantized price, one of 100 bins.
    pub price_bucket: Option<u8>,
    pub url_id: Option<u64>,
    /// Quantized 16-dim text embedding (item name or search query).
    pub text_embedding: Option<[u8; 16]>,
}

impl Event {
    /// Checks the per-type field invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidEvent(format!("{msg} (user {})", self.user_id)));
        if self.event_type.is_item_specific() {
            if self.sku.is_none() || self.category.is_none() || self.price_bucket.is_none() {
                return fail("item event requires sku, category and price_bucket");
            }
            if self.url_id.is_some() {
                return fail("item event must not carry url_id");
            }
        }
        match self.event_type {
            EventType::PageVisit => {
                if self.url_id.is_none() {
                    return fail("page_visit requires url_id");
                }
                if self.sku.is_some() || self.category.is_some() || self.price_bucket.is_some() {
                    return fail("page_visit must not carry item fields");
                }
            }
            EventType::SearchQuery => {
                if self.text_embedding.is_none() {
                    return fail("search_query requires text embedding");
                }
            }
            _ => {}
        }
        if let Some(p) = self.price_bucket {
            if p > 99 {
                return fail("price_bucket out of [0,99]");
            }
        }
        Ok(())
    }
}

/// Chronologically sorted per-user event sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: u64,
    pub events: Vec<Event>,
}

impl UserHistory {
    pub fn last_ts(&self) -> Option<i64> {
        self.events.last().map(|e| e.ts)
    }

    pub fn first_ts(&self) -> Option<i64> {
        self.events.first().map(|e| e.ts)
    }
}

/// Timestamp split: input period ends at `train_end` (inclusive), the target
/// window is `(train_end, target_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train_end: i64,
    pub target_end: i64,
}

impl DataSplit {
    pub fn new(train_end: i64, target_end: i64) -> Result<Self> {
        if train_end >= target_end {
            return Err(Error::invalid(format!(
                "train_end ({train_end}) must precede target_end ({target_end})"
            )));
        }
        Ok(DataSplit { train_end, target_end })
    }

    /// Split ending `target_days` before the last event, the default four-week
    /// reservation.
    pub fn from_horizon(last_ts: i64, target_days: i64) -> Result<Self> {
        Self::new(last_ts - target_days * SECONDS_PER_DAY, last_ts)
    }
}

/// Groups events per user, stably sorted by timestamp (original order kept
/// for ties). Total event count is preserved.
pub fn build_user_histories(events: &[Event]) -> BTreeMap<u64, UserHistory> {
    let mut map: BTreeMap<u64, UserHistory> = BTreeMap::new();
    for e in events {
        map.entry(e.user_id)
            .or_insert_with(|| UserHistory { user_id: e.user_id, events: Vec::new() })
            .events
            .push(e.clone());
    }
    for h in map.values_mut() {
        h.events.sort_by_key(|e| e.ts); // stable: ties keep file order
    }
    map
}

/// Partitions histories at the split boundary. Events with `ts <= train_end`
/// form the input histories, events in `(train_end, target_end]` the target
/// histories; later events are dropped. Users with an empty part keep an
/// empty history so the two maps cover the same user set.
pub fn split_by_timestamp(
    histories: &BTreeMap<u64, UserHistory>,
    split: DataSplit,
) -> (BTreeMap<u64, UserHistory>, BTreeMap<u64, UserHistory>) {
    let mut input = BTreeMap::new();
    let mut target = BTreeMap::new();
    for (&uid, h) in histories {
        let mut hin = UserHistory { user_id: uid, events: Vec::new() };
        let mut htg = UserHistory { user_id: uid, events: Vec::new() };
        for e in &h.events {
            if e.ts <= split.train_end {
                hin.events.push(e.clone());
            } else if e.ts <= split.target_end {
                htg.events.push(e.clone());
            }
        }
        input.insert(uid, hin);
        target.insert(uid, htg);
    }
    (input, target)
}

/// Day-of-week in 0..7 with 0 = Sunday (epoch day 0 was a Thursday).
pub fn day_of_week(ts: i64) -> usize {
    ((ts.div_euclid(SECONDS_PER_DAY) + 4).rem_euclid(7)) as usize
}

/// Hour-of-day in 0..24.
pub fn hour_of_day(ts: i64) -> usize {
    (ts.rem_euclid(SECONDS_PER_DAY) / 3600) as usize
}
