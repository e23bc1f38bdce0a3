//! Profile embedding binary format.
//!
//! Layout: magic `UBPE`, version u32, n_users u32, dim u32, then per user:
//! user_id u64, dim × f32 — all little-endian. A trailing `UBPH` footer
//! (config-hash u64, period_end i64) ties the artifact to its run config
//! and data period; readers treat the footer as optional.

use std::io::{Read, Write};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UBPE";
const FOOTER_MAGIC: &[u8; 4] = b"UBPH";
const VERSION: u32 = 1;

pub fn write_embeddings<W: Write>(mut w: W, set: &EmbeddingSet, config_hash: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(set.user_ids.len() as u32).to_le_bytes())?;
    w.write_all(&(set.dim as u32).to_le_bytes())?;
    for (i, &uid) in set.user_ids.iter().enumerate() {
        w.write_all(&uid.to_le_bytes())?;
        for &v in set.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(FOOTER_MAGIC)?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&set.period_end.to_le_bytes())?;
    Ok(())
}

/// Reads an embedding file. Returns the set and the footer config hash when
/// present.
pub fn read_embeddings<R: Read>(mut r: R, path_for_errors: &str) -> Result<(EmbeddingSet, Option<u64>)> {
    let corrupt = |msg: &str| Error::CorruptFile { path: path_for_errors.into(), msg: msg.into() };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4)?;
    let n_users = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut user_ids = Vec::with_capacity(n_users);
    let mut data = Vec::with_capacity(n_users * dim);
    let mut b8 = [0u8; 8];
    for _ in 0..n_users {
        r.read_exact(&mut b8).map_err(|_| corrupt("truncated user record"))?;
        user_ids.push(u64::from_le_bytes(b8));
        for _ in 0..dim {
            r.read_exact(&mut b4).map_err(|_| corrupt("truncated embedding row"))?;
            data.push(f32::from_le_bytes(b4));
        }
    }
    let mut footer = [0u8; 4];
    let (hash, period_end) = match r.read_exact(&mut footer) {
        Ok(()) if &footer == FOOTER_MAGIC => {
            r.read_exact(&mut b8)?;
            let hash = u64::from_le_bytes(b8);
            r.read_exact(&mut b8)?;
            (Some(hash), i64::from_le_bytes(b8))
        }
        _ => (None, 0),
    };
    Ok((EmbeddingSet { user_ids, dim, data, period_end }, hash))
}
