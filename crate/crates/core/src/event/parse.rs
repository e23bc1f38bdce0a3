//! Event file ingestion (JSONL and CSV) and the matching writers.
//!
//! JSONL: one object per line,
//! `{"user_id":u64,"event_type":"purchase",...,"ts":i64,"sku":u64?,"category":u64?,
//!   "price_bucket":u8?,"url_id":u64?,"emb":[u8;16]?}`.
//! CSV: header row with the same field names; `emb` is 16 colon-separated
//! integers; absent optionals are empty strings.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Event, EventType};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Jsonl,
    Csv,
}

impl EventFormat {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "jsonl" => Some(EventFormat::Jsonl),
            "csv" => Some(EventFormat::Csv),
            _ => None,
        }
    }
}

/// A rejected input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// 1-based line number.
    pub line: usize,
    pub msg: String,
}

/// Parsed events plus per-line diagnostics for rejected records.
#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub events: Vec<Event>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    user_id: u64,
    event_type: String,
    ts: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sku: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    price_bucket: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    url_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emb: Option<Vec<u8>>,
}

fn record_to_event(rec: JsonRecord) -> std::result::Result<Event, String> {
    let event_type = EventType::from_str_code(&rec.event_type)
        .ok_or_else(|| format!("unknown event_type `{}`", rec.event_type))?;
    let text_embedding = match rec.emb {
        None => None,
        Some(v) => {
            let arr: [u8; 16] =
                v.try_into().map_err(|v: Vec<u8>| format!("emb has {} values, want 16", v.len()))?;
            Some(arr)
        }
    };
    let ev = Event {
        user_id: rec.user_id,
        event_type,
        ts: rec.ts,
        sku: rec.sku,
        category: rec.category,
        price_bucket: rec.price_bucket,
        url_id: rec.url_id,
        text_embedding,
    };
    ev.validate().map_err(|e| e.to_string())?;
    Ok(ev)
}

const CSV_HEADER: &str = "user_id,event_type,ts,sku,category,price_bucket,url_id,emb";

fn parse_csv_line(line: &str) -> std::result::Result<Event, String> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 8 {
        return Err(format!("expected 8 columns, got {}", cols.len()));
    }
    fn opt_num<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<Option<T>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<T>().map(Some).map_err(|_| format!("non-integer {name} `{s}`"))
        }
    }
    let user_id: u64 = cols[0].parse().map_err(|_| format!("bad user_id `{}`", cols[0]))?;
    let ts: i64 = cols[2].parse().map_err(|_| format!("bad ts `{}`", cols[2]))?;
    let emb = if cols[7].is_empty() {
        None
    } else {
        let vals: std::result::Result<Vec<u8>, _> =
            cols[7].split(':').map(|p| p.parse::<u8>()).collect();
        let vals = vals.map_err(|_| "bad emb value".to_string())?;
        Some(vals)
    };
    record_to_event(JsonRecord {
        user_id,
        event_type: cols[1].to_string(),
        ts,
        sku: opt_num(cols[3], "sku")?,
        category: opt_num(cols[4], "category")?,
        price_bucket: opt_num(cols[5], "price_bucket")?,
        url_id: opt_num(cols[6], "url_id")?,
        emb,
    })
}

/// Parses newline-delimited events in the declared format. Events come back
/// in file order; malformed records are reported with their line numbers.
pub fn parse_events<R: BufRead>(reader: R, format: EventFormat) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        if format == EventFormat::Csv && idx == 0 {
            if trimmed != CSV_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("bad CSV header, want `{CSV_HEADER}`"),
                });
            }
            continue;
        }
        let parsed = match format {
            EventFormat::Jsonl => serde_json::from_str::<JsonRecord>(trimmed)
                .map_err(|e| e.to_string())
                .and_then(record_to_event),
            EventFormat::Csv => parse_csv_line(trimmed),
        };
        match parsed {
            Ok(ev) => out.events.push(ev),
            Err(msg) => out.diagnostics.push(Diagnostic { line: lineno, msg }),
        }
    }
    Ok(out)
}

fn event_to_record(e: &Event) -> JsonRecord {
    JsonRecord {
        user_id: e.user_id,
        event_type: e.event_type.as_str().to_string(),
        ts: e.ts,
        sku: e.sku,
        category: e.category,
        price_bucket: e.price_bucket,
        url_id: e.url_id,
        emb: e.text_embedding.map(|a| a.to_vec()),
    }
}

pub fn write_events_jsonl<W: Write>(mut w: W, events: &[Event]) -> Result<()> {
    for e in events {
        let rec = event_to_record(e);
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_events_csv<W: Write>(mut w: W, events: &[Event]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
        v.as_ref().map(|x| x.to_string()).unwrap_or_default()
    }
    for e in events {
        let emb = e
            .text_embedding
            .map(|a| a.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(":"))
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            e.user_id,
            e.event_type.as_str(),
            e.ts,
            opt(&e.sku),
            opt(&e.category),
            opt(&e.price_bucket),
            opt(&e.url_id),
            emb
        )?;
    }
    Ok(())
}
