//! Deterministic input encoders shared by the neural models: piecewise
//! linear encoding of numeric features, double-hashed shared-vocabulary
//! embedding lookups for high-cardinality ids, and the 16-position text
//! embedding bag.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::nearest_rank;
use crate::scalar::Scalar;

/// Coarse intervals per feature.
pub const PLE_INTERVALS: usize = 64;
/// Uniform sub-intervals per coarse interval.
pub const PLE_SUB_INTERVALS: usize = 32;
/// Interval ids per feature.
pub const PLE_IDS_PER_FEATURE: usize = PLE_INTERVALS * PLE_SUB_INTERVALS;

/// Shared hashed-embedding vocabulary size.
pub const MUVE_VOCAB: usize = 524_288;

/// Quantization bins of the text embeddings (one row each in the bag table).
pub const TEXT_BINS: usize = 256;

/// Per-feature quantile edges: 63 ascending values splitting the range into
/// 64 intervals, each sub-divided into 32 uniform sub-intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PleBins {
    /// `edges[f]` holds the 63 quantile edges of feature `f`.
    pub edges: Vec<Vec<f64>>,
}

impl PleBins {
    pub fn n_features(&self) -> usize {
        self.edges.len()
    }
}

/// Fits the 63 nearest-rank quantiles (1/64 .. 63/64) per feature. Duplicate
/// edges are allowed and produce degenerate intervals.
pub fn fit_ple(train_values: &[Vec<f64>]) -> Result<PleBins> {
    let mut edges = Vec::with_capacity(train_values.len());
    for (f, samples) in train_values.iter().enumerate() {
        if samples.is_empty() {
            return Err(Error::invalid(format!("fit_ple: feature {f} has no samples")));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let e: Vec<f64> = (1..PLE_INTERVALS)
            .map(|k| nearest_rank(&sorted, k as f64 / PLE_INTERVALS as f64))
            .collect();
        debug_assert!(e.windows(2).all(|w| w[0] <= w[1]));
        edges.push(e);
    }
    Ok(PleBins { edges })
}

/// Maps a value to its interval id in `[0, 2048)`: the coarse interval is the
/// number of edges strictly below the value; the sub-interval is the value's
/// 32-way position inside the coarse interval. Values below the first edge
/// map to sub-interval 0, values above the last edge to sub-interval 31.
pub fn encode_ple(value: f64, edges: &[f64]) -> usize {
    let coarse = edges.iter().filter(|&&e| e < value).count().min(PLE_INTERVALS - 1);
    let sub = if coarse == 0 {
        0
    } else if coarse == PLE_INTERVALS - 1 {
        PLE_SUB_INTERVALS - 1
    } else {
        let lo = edges[coarse - 1];
        let hi = edges[coarse];
        if hi <= lo {
            0
        } else {
            let frac = (value - lo) / (hi - lo);
            ((frac * PLE_SUB_INTERVALS as f64).floor() as usize).min(PLE_SUB_INTERVALS - 1)
        }
    };
    coarse * PLE_SUB_INTERVALS + sub
}

fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 33)).wrapping_mul(0xff51afd7ed558ccd);
    x = (x ^ (x >> 33)).wrapping_mul(0xc4ceb9fe1a85ec53);
    x ^ (x >> 33)
}

/// Feature namespaces of the shared hashed table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdNamespace {
    Sku = 1,
    Category = 2,
    Url = 3,
}

/// Two independently seeded hash functions over (namespace, id), both landing
/// in `[0, vocab)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoHash {
    pub seed1: u64,
    pub seed2: u64,
    pub vocab: usize,
}

impl TwoHash {
    pub fn new(seed1: u64, seed2: u64, vocab: usize) -> Self {
        TwoHash { seed1, seed2, vocab }
    }

    pub fn indices(&self, ns: IdNamespace, id: u64) -> (usize, usize) {
        let key = mix64((ns as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ mix64(id));
        let h1 = mix64(key ^ self.seed1) % self.vocab as u64;
        let h2 = mix64(key.wrapping_add(0xda94_2042_e4dd_58b5) ^ self.seed2) % self.vocab as u64;
        (h1 as usize, h2 as usize)
    }
}

/// Sum of the two hashed rows of the shared table (`table` is row-major
/// `vocab × dim`).
pub fn muve_lookup<S: Scalar>(
    hash: &TwoHash,
    ns: IdNamespace,
    id: u64,
    table: &[S],
    dim: usize,
) -> Vec<S> {
    let (i1, i2) = hash.indices(ns, id);
    let r1 = &table[i1 * dim..(i1 + 1) * dim];
    let r2 = &table[i2 * dim..(i2 + 1) * dim];
    r1.iter().zip(r2).map(|(&a, &b)| a + b).collect()
}

/// Mean of the 16 rows selected by the quantized text embedding (`table` is
/// row-major `256 × dim`, shared between item names and queries).
pub fn text_bag<S: Scalar>(emb: &[u8; 16], table: &[S], dim: usize) -> Vec<S> {
    let mut out = vec![S::zero(); dim];
    for &bin in emb {
        let row = &table[bin as usize * dim..(bin as usize + 1) * dim];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = S::of(1.0 / 16.0);
    for o in &mut out {
        *o *= inv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fit_ple_on_0_to_63() {
        // Oracle: sort and index; with samples 0..=63, edge k is sample k.
        let samples: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let bins = fit_ple(&[samples]).unwrap();
        let expect: Vec<f64> = (1..64).map(|k| k as f64).collect();
        assert_eq!(bins.edges[0], expect);
    }

    #[test]
    fn fit_ple_constant_samples() {
        let bins = fit_ple(&[vec![3.5; 100]]).unwrap();
        assert!(bins.edges[0].iter().all(|&e| e == 3.5));
        // every value maps into a single interval id
        assert_eq!(encode_ple(3.5, &bins.edges[0]), 0);
        assert_eq!(encode_ple(2.0, &bins.edges[0]), 0);
        assert_eq!(encode_ple(9.0, &bins.edges[0]), PLE_IDS_PER_FEATURE - 1);
    }

    #[test]
    fn fit_ple_uniform_empirical_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<f64> = (0..64_000).map(|_| rng.gen::<f64>()).collect();
        let bins = fit_ple(&[samples]).unwrap();
        for (i, &e) in bins.edges[0].iter().enumerate() {
            let q = (i + 1) as f64 / 64.0;
            assert!((e - q).abs() < 0.01, "edge {i}: {e} vs {q}");
        }
    }

    #[test]
    fn fit_ple_rejects_empty() {
        assert!(fit_ple(&[vec![]]).is_err());
    }

    #[test]
    fn encode_ple_clamps_and_interpolates() {
        let edges: Vec<f64> = (1..64).map(|k| (k * 10) as f64).collect(); // 10,20,...,630
        assert_eq!(encode_ple(-5.0, &edges), 0);
        assert_eq!(encode_ple(1e9, &edges), PLE_IDS_PER_FEATURE - 1);
        // value 15 inside [10,20): coarse 1, sub 16, id 48
        assert_eq!(encode_ple(15.0, &edges), 48);
    }

    #[test]
    fn encode_ple_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..512).map(|_| rng.gen::<f64>() * 7.0).collect();
        let bins = fit_ple(&[samples]).unwrap();
        for _ in 0..2000 {
            let a = rng.gen::<f64>() * 9.0 - 1.0;
            let b = rng.gen::<f64>() * 9.0 - 1.0;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            assert!(encode_ple(lo, &bins.edges[0]) <= encode_ple(hi, &bins.edges[0]));
        }
    }

    #[test]
    fn coarse_interval_occupancy_on_fit_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 16_384;
        let samples: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let bins = fit_ple(&[samples.clone()]).unwrap();
        let mut counts = vec![0usize; PLE_INTERVALS];
        for &v in &samples {
            counts[encode_ple(v, &bins.edges[0]) / PLE_SUB_INTERVALS] += 1;
        }
        let eps = 2.0 / (n as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let frac = c as f64 / n as f64;
            assert!(
                (frac - 1.0 / 64.0).abs() <= eps,
                "interval {i} holds {frac} of samples (eps {eps})"
            );
        }
    }

    #[test]
    fn muve_zero_table_gives_zero_vector() {
        let hash = TwoHash::new(1, 2, 64);
        let table = vec![0.0f32; 64 * 4];
        let v = muve_lookup(&hash, IdNamespace::Sku, 123, &table, 4);
        assert_eq!(v, vec![0.0; 4]);
    }

    #[test]
    fn muve_is_deterministic() {
        let hash = TwoHash::new(7, 8, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table: Vec<f32> = (0..128 * 3).map(|_| rng.gen::<f32>()).collect();
        let a = muve_lookup(&hash, IdNamespace::Url, 42, &table, 3);
        let b = muve_lookup(&hash, IdNamespace::Url, 42, &table, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn muve_partial_collision_still_distinguishes() {
        // Search for two ids that collide on h1 but not on h2; the second
        // lookup keeps their vectors apart.
        let hash = TwoHash::new(3, 4, 32);
        let (base1, _) = hash.indices(IdNamespace::Sku, 0);
        let mut found = None;
        for id in 1..100_000u64 {
            let (h1, h2) = hash.indices(IdNamespace::Sku, id);
            if h1 == base1 && h2 != hash.indices(IdNamespace::Sku, 0).1 {
                found = Some(id);
                break;
            }
        }
        let other = found.expect("no partial collision found in range");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table: Vec<f64> = (0..32 * 5).map(|_| rng.gen::<f64>()).collect();
        let a = muve_lookup(&hash, IdNamespace::Sku, 0, &table, 5);
        let b = muve_lookup(&hash, IdNamespace::Sku, other, &table, 5);
        assert_ne!(a, b);
    }

    #[test]
    fn text_bag_uniform_bins_returns_that_row() {
        let dim = 3;
        let mut table = vec![0.0f64; TEXT_BINS * dim];
        for bin in 0..TEXT_BINS {
            for d in 0..dim {
                table[bin * dim + d] = (bin * 10 + d) as f64;
            }
        }
        let emb = [9u8; 16];
        let v = text_bag(&emb, &table, dim);
        assert_eq!(v, vec![90.0, 91.0, 92.0]);
    }

    #[test]
    fn text_bag_one_hot_rows_count_bins() {
        // one-hot rows: output d equals (count of bin d among positions)/16
        let dim = TEXT_BINS;
        let mut table = vec![0.0f64; TEXT_BINS * dim];
        for bin in 0..TEXT_BINS {
            table[bin * dim + bin] = 1.0;
        }
        let mut emb = [0u8; 16];
        emb[0] = 3;
        emb[1] = 3;
        emb[2] = 200;
        let v = text_bag(&emb, &table, dim);
        assert_eq!(v[3], 2.0 / 16.0);
        assert_eq!(v[200], 1.0 / 16.0);
        assert_eq!(v[0], 13.0 / 16.0);
    }

    #[test]
    fn text_bag_zero_table_is_zero() {
        let table = vec![0.0f32; TEXT_BINS * 2];
        assert_eq!(text_bag(&[1u8; 16], &table, 2), vec![0.0, 0.0]);
    }
}
