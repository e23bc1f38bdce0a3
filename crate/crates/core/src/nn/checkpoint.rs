//! Checkpoint file format.
//!
//! Layout: magic `UBPC`, version u32, tensor count u32, then per tensor:
//! name length u32 + UTF-8 bytes, rank u32, dims (u32 each), f32 data —
//! all little-endian. A trailing `UBPH` + config-hash u64 footer ties the
//! artifact to the run configuration.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"UBPC";
const FOOTER_MAGIC: &[u8; 4] = b"UBPH";
const VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(
    mut w: W,
    store: &ParamStore<S>,
    config_hash: u64,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.params.len() as u32).to_le_bytes())?;
    for p in &store.params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&2u32.to_le_bytes())?; // rank
        w.write_all(&(p.rows as u32).to_le_bytes())?;
        w.write_all(&(p.cols as u32).to_le_bytes())?;
        for &v in &p.data {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.write_all(FOOTER_MAGIC)?;
    w.write_all(&config_hash.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Loads checkpoint values into a store with matching names and shapes.
/// With `strict` off, tensors unknown to the store are skipped (used when a
/// sub-model reloads weights from a bigger model's checkpoint). Returns the
/// footer config hash when present.
pub fn load_checkpoint<S: Scalar, R: Read>(
    mut r: R,
    store: &mut ParamStore<S>,
    path_for_errors: &str,
    strict: bool,
) -> Result<Option<u64>> {
    let corrupt = |msg: &str| Error::CorruptFile { path: path_for_errors.into(), msg: msg.into() };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("non-utf8 tensor name"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let pid = match store.id(&name) {
            Some(pid) => pid,
            None if !strict => continue,
            None => {
                return Err(corrupt(&format!("checkpoint tensor {name} unknown to this model")))
            }
        };
        let p = store.get_mut(pid);
        if p.len() != n {
            return Err(corrupt(&format!("tensor {name} has {n} values, model wants {}", p.len())));
        }
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            p.data[i] = S::of(v as f64);
        }
    }
    let mut footer = [0u8; 4];
    match r.read_exact(&mut footer) {
        Ok(()) if &footer == FOOTER_MAGIC => {
            let mut h = [0u8; 8];
            r.read_exact(&mut h)?;
            Ok(Some(u64::from_le_bytes(h)))
        }
        _ => Ok(None),
    }
}
