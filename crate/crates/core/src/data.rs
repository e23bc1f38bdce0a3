//! Period-tagged data containers shared across pipeline stages.
//!
//! The `period_end` tag records the newest event timestamp that may have
//! influenced the values; downstream consumers assert it against their
//! label windows, which is what catches accidental label leakage.

use crate::error::{Error, Result};

/// Per-user float-feature matrix (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub user_ids: Vec<u64>,
    pub names: Vec<String>,
    pub data: Vec<f64>,
    pub period_end: i64,
}

impl FeatureMatrix {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim())
    }
}

/// Per-user embedding matrix (row-major f32, the export precision).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub user_ids: Vec<u64>,
    pub dim: usize,
    pub data: Vec<f32>,
    pub period_end: i64,
}

impl EmbeddingSet {
    pub fn from_rows(rows: Vec<(u64, Vec<f32>)>, dim: usize, period_end: i64) -> Result<Self> {
        let mut user_ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (uid, v) in rows {
            if v.len() != dim {
                return Err(Error::shape(format!(
                    "embedding for user {uid} has dim {}, want {dim}",
                    v.len()
                )));
            }
            user_ids.push(uid);
            data.extend(v);
        }
        Ok(EmbeddingSet { user_ids, dim, data, period_end })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row index per user id, erroring on missing users.
    pub fn index_of(&self, user_id: u64) -> Result<usize> {
        // user_ids are written sorted; fall back to scan if not
        match self.user_ids.binary_search(&user_id) {
            Ok(i) => Ok(i),
            Err(_) => self
                .user_ids
                .iter()
                .position(|&u| u == user_id)
                .ok_or_else(|| Error::invalid(format!("user {user_id} missing from embedding set"))),
        }
    }
}
