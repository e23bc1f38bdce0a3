//! Handcrafted features over user event histories.
//!
//! Two blocks per user: 205 basic features (41 aggregates over five time
//! windows) and 141 cluster/price-segment features built from k-means topic
//! clusters of item name embeddings, a seven-way price segmentation, and
//! exponentially weighted (EW) aggregates at decay scales of 28, 50 and 100
//! days. All price arithmetic uses the quantized bucket index as the price
//! unit, which is the only price information in the data.

mod kmeans;
mod names;

pub use kmeans::{assign_cluster, fit_kmeans, inertia};
pub use names::{basic_feature_names, cluster_feature_names, feature_names, BASIC_NAMES, MONOTONE_BASIC_IDX, N_BASIC, N_CLUSTER, N_TOTAL};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{EventType, UserHistory, SECONDS_PER_DAY};

/// The five aggregation windows, ordered as emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowSpec {
    All,
    Days60,
    Days28,
    Days14,
    Days7,
}

impl WindowSpec {
    pub const ALL: [WindowSpec; 5] = [
        WindowSpec::All,
        WindowSpec::Days60,
        WindowSpec::Days28,
        WindowSpec::Days14,
        WindowSpec::Days7,
    ];

    pub fn days(self) -> Option<i64> {
        match self {
            WindowSpec::All => None,
            WindowSpec::Days60 => Some(60),
            WindowSpec::Days28 => Some(28),
            WindowSpec::Days14 => Some(14),
            WindowSpec::Days7 => Some(7),
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            WindowSpec::All => "all",
            WindowSpec::Days60 => "60d",
            WindowSpec::Days28 => "28d",
            WindowSpec::Days14 => "14d",
            WindowSpec::Days7 => "7d",
        }
    }
}

/// Exponential-decay window configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EwConfig {
    pub tau_days: u32,
}

impl EwConfig {
    pub const TAUS: [EwConfig; 3] =
        [EwConfig { tau_days: 28 }, EwConfig { tau_days: 50 }, EwConfig { tau_days: 100 }];

    pub fn suffix(&self) -> String {
        format!("{}d", self.tau_days)
    }
}

/// Exponential decay weight for an event Δt seconds before the anchor:
/// `exp(-Δt / (τ·86400))`.
pub fn ew_weight(delta_t_seconds: i64, cfg: EwConfig) -> Result<f64> {
    if cfg.tau_days == 0 {
        return Err(Error::invalid("ew_weight: tau must be positive"));
    }
    if delta_t_seconds < 0 {
        return Err(Error::invalid(format!("ew_weight: negative delta {delta_t_seconds}")));
    }
    Ok((-(delta_t_seconds as f64) / (cfg.tau_days as f64 * SECONDS_PER_DAY as f64)).exp())
}

/// Corpus-level statistics fitted on the input period, reused leakage-safe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub p20_price: f64,
    pub p80_price: f64,
    /// Ascending 1/7..6/7 quantile thresholds of the price segmentation.
    pub price7_bounds: [f64; 6],
    /// (id, raw purchase count), most popular first; at most 100 entries.
    pub top100_skus: Vec<(u64, f64)>,
    pub top100_categories: Vec<(u64, f64)>,
    /// 5 topical centroids over 16-dim item name embeddings.
    pub kmeans_c5: Vec<Vec<f64>>,
    /// 10 topical centroids.
    pub kmeans_c10: Vec<Vec<f64>>,
    /// Per-feature standardization stats, filled by `standardize`.
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
}

/// Nearest-rank quantile on a sorted slice: the value at 0-based index
/// `floor(q·n)`, clamped to the last element. With `q=k/n` on n distinct
/// values this picks the (k+1)-th smallest.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Linearly interpolated quantile on a sorted slice (used for per-user
/// median/q25/q75 aggregates).
fn interp_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// PRICE7 segment of a price: the number of bounds strictly below it, in
/// 0..=6 (super_lo, lo, mid_lo, mid, mid_hi, hi, super_hi). Degenerate
/// (equal) bounds collapse mass into one segment.
pub fn price7_segment(price: f64, bounds: &[f64; 6]) -> usize {
    bounds.iter().filter(|&&b| b < price).count()
}

pub const PRICE7_NAMES: [&str; 7] =
    ["super_lo_price", "lo_price", "mid_lo_price", "mid_price", "mid_hi_price", "hi_price", "super_hi_price"];

const SEG_MID_LO: usize = 2;
const SEG_MID: usize = 3;
const SEG_MID_HI: usize = 4;

/// Fits corpus statistics over input-period histories: purchase price
/// percentiles (nearest-rank over the global multiset), PRICE7 bounds,
/// top-100 SKU/category lists ranked by raw purchase count, and the c5/c10
/// k-means centroids over item name embeddings (one embedding per distinct
/// purchased SKU). `k_seeds` seeds the two k-means fits.
pub fn fit_corpus_stats(
    histories: &BTreeMap<u64, UserHistory>,
    k_seeds: u64,
) -> Result<CorpusStats> {
    let mut prices: Vec<f64> = Vec::new();
    let mut sku_counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut cat_counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut sku_embeddings: BTreeMap<u64, [u8; 16]> = BTreeMap::new();

    for h in histories.values() {
        for e in &h.events {
            if e.event_type != EventType::Purchase {
                continue;
            }
            if let Some(p) = e.price_bucket {
                prices.push(p as f64);
            }
            if let Some(s) = e.sku {
                *sku_counts.entry(s).or_insert(0) += 1;
                if let Some(emb) = e.text_embedding {
                    sku_embeddings.entry(s).or_insert(emb);
                }
            }
            if let Some(c) = e.category {
                *cat_counts.entry(c).or_insert(0) += 1;
            }
        }
    }
    if prices.is_empty() {
        return Err(Error::invalid("fit_corpus_stats: no purchases in corpus"));
    }
    prices.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut price7_bounds = [0.0f64; 6];
    for (i, b) in price7_bounds.iter_mut().enumerate() {
        *b = nearest_rank(&prices, (i + 1) as f64 / 7.0);
    }

    fn top100(counts: &BTreeMap<u64, u64>) -> Vec<(u64, f64)> {
        let mut v: Vec<(u64, u64)> = counts.iter().map(|(&id, &c)| (id, c)).collect();
        // by count desc, then id asc for determinism
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(100);
        v.into_iter().map(|(id, c)| (id, c as f64)).collect()
    }

    let points: Vec<Vec<f64>> = sku_embeddings
        .values()
        .map(|emb| emb.iter().map(|&b| b as f64).collect())
        .collect();
    let fit_padded = |k: usize, seed: u64| -> Result<Vec<Vec<f64>>> {
        if points.is_empty() {
            return Ok(vec![vec![0.0; 16]; k]);
        }
        if points.len() < k {
            // tiny corpora: cycle points so the centroid count contract holds
            let padded: Vec<Vec<f64>> =
                (0..k).map(|i| points[i % points.len()].clone()).collect();
            return fit_kmeans(&padded, k, seed);
        }
        fit_kmeans(&points, k, seed)
    };

    Ok(CorpusStats {
        p20_price: nearest_rank(&prices, 0.2),
        p80_price: nearest_rank(&prices, 0.8),
        price7_bounds,
        top100_skus: top100(&sku_counts),
        top100_categories: top100(&cat_counts),
        kmeans_c5: fit_padded(5, k_seeds)?,
        kmeans_c10: fit_padded(10, k_seeds.wrapping_add(1))?,
        feature_means: Vec::new(),
        feature_stds: Vec::new(),
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// The 41 basic aggregates of one window, anchored at the user's last
/// input-period event (see [`basic_feature_names`] for the order).
pub fn compute_basic_features(
    h: &UserHistory,
    window: WindowSpec,
    stats: &CorpusStats,
) -> Vec<f64> {
    let anchor = h.last_ts().unwrap_or(0);
    compute_basic_features_anchored(h, window, stats, anchor)
}

/// Same as [`compute_basic_features`] with an explicit window anchor (the
/// global-train-end anchoring mode).
pub fn compute_basic_features_anchored(
    h: &UserHistory,
    window: WindowSpec,
    stats: &CorpusStats,
    anchor: i64,
) -> Vec<f64> {
    let in_window = |ts: i64| -> bool {
        if ts > anchor {
            return false;
        }
        match window.days() {
            None => true,
            Some(d) => anchor - ts <= d * SECONDS_PER_DAY,
        }
    };

    let mut add = 0.0;
    let mut rem = 0.0;
    let mut buy = 0.0;
    let mut search = 0.0;
    let mut page = 0.0;
    let mut add_price_sum = 0.0;
    let mut rem_price_sum = 0.0;
    let mut buy_price_sum = 0.0;
    let mut buy_vol_hi = 0.0;
    let mut buy_vol_lo = 0.0;
    let mut hi_cnt = 0.0;
    let mut lo_cnt = 0.0;
    let mut max_buy = f64::NEG_INFINITY;
    let mut min_buy = f64::INFINITY;
    let mut buy_days: BTreeSet<i64> = BTreeSet::new();
    let mut urls: BTreeSet<u64> = BTreeSet::new();
    let mut skus: BTreeSet<u64> = BTreeSet::new();
    let mut cats: BTreeSet<u64> = BTreeSet::new();
    let mut first_buy: Option<i64> = None;
    let mut last_buy: Option<i64> = None;

    for e in &h.events {
        if !in_window(e.ts) {
            continue;
        }
        let price = e.price_bucket.map(|p| p as f64).unwrap_or(0.0);
        match e.event_type {
            EventType::AddToCart => {
                add += 1.0;
                add_price_sum += price;
            }
            EventType::RemoveFromCart => {
                rem += 1.0;
                rem_price_sum += price;
            }
            EventType::Purchase => {
                buy += 1.0;
                buy_price_sum += price;
                max_buy = max_buy.max(price);
                min_buy = min_buy.min(price);
                if price >= stats.p80_price {
                    hi_cnt += 1.0;
                    buy_vol_hi += price;
                }
                if price <= stats.p20_price {
                    lo_cnt += 1.0;
                    buy_vol_lo += price;
                }
                buy_days.insert(e.ts.div_euclid(SECONDS_PER_DAY));
                if let Some(s) = e.sku {
                    skus.insert(s);
                }
                if let Some(c) = e.category {
                    cats.insert(c);
                }
                first_buy = Some(first_buy.map_or(e.ts, |t: i64| t.min(e.ts)));
                last_buy = Some(last_buy.map_or(e.ts, |t: i64| t.max(e.ts)));
            }
            EventType::PageVisit => {
                page += 1.0;
                if let Some(u) = e.url_id {
                    urls.insert(u);
                }
            }
            EventType::SearchQuery => {
                search += 1.0;
            }
        }
    }

    let total = add + rem + buy;
    let (max_buy, min_buy) = if buy > 0.0 { (max_buy, min_buy) } else { (0.0, 0.0) };
    let duration_days = match (first_buy, last_buy) {
        (Some(f), Some(l)) => (l - f) as f64 / SECONDS_PER_DAY as f64,
        _ => 0.0,
    };
    let uniq_buy_days = buy_days.len() as f64;

    vec![
        add,
        rem,
        buy,
        total,
        search,
        uniq_buy_days,
        ratio(add_price_sum, add),
        ratio(rem_price_sum, rem),
        ratio(buy_price_sum, buy),
        max_buy,
        min_buy,
        max_buy - min_buy,
        add_price_sum,
        buy_price_sum,
        buy_vol_hi,
        buy_vol_lo,
        rem_price_sum,
        page,
        ratio(page, buy),
        urls.len() as f64,
        duration_days,
        ratio(buy, duration_days + 1.0),
        ratio(add + rem, duration_days + 1.0),
        ratio(add, total),
        ratio(rem, add),
        ratio(buy, add),
        ratio(add - rem, add),
        ratio(rem, add),
        ratio(add, search),
        ratio(buy, search),
        hi_cnt,
        lo_cnt,
        ratio(hi_cnt, buy),
        ratio(lo_cnt, buy),
        ratio(buy_vol_hi, buy_price_sum),
        ratio(buy_vol_lo, buy_price_sum),
        ratio(lo_cnt, hi_cnt),
        ratio(skus.len() as f64, buy),
        ratio(skus.len() as f64, uniq_buy_days),
        ratio(cats.len() as f64, buy),
        ratio(cats.len() as f64, uniq_buy_days),
    ]
}

/// The 205-value basic block: the 41 aggregates over the five windows in
/// the fixed order All, 60d, 28d, 14d, 7d.
pub fn assemble_basic_205(h: &UserHistory, stats: &CorpusStats) -> Vec<f64> {
    assemble_basic_205_anchored(h, stats, h.last_ts().unwrap_or(0))
}

pub fn assemble_basic_205_anchored(h: &UserHistory, stats: &CorpusStats, anchor: i64) -> Vec<f64> {
    let mut out = Vec::with_capacity(N_BASIC);
    for w in WindowSpec::ALL {
        out.extend(compute_basic_features_anchored(h, w, stats, anchor));
    }
    debug_assert_eq!(out.len(), N_BASIC);
    out
}

/// One purchase prepared for the cluster block.
struct Buy {
    ts: i64,
    price: f64,
    seg: usize,
    c5: Option<usize>,
    c10: Option<usize>,
    sku_top: bool,
    cat_top: bool,
}

/// The 141-value cluster block (see [`cluster_feature_names`]).
pub fn compute_cluster_features_141(
    h: &UserHistory,
    stats: &CorpusStats,
    ew_cfgs: &[EwConfig; 3],
) -> Vec<f64> {
    compute_cluster_features_141_anchored(h, stats, ew_cfgs, h.last_ts().unwrap_or(0))
}

pub fn compute_cluster_features_141_anchored(
    h: &UserHistory,
    stats: &CorpusStats,
    ew_cfgs: &[EwConfig; 3],
    anchor: i64,
) -> Vec<f64> {
    let top_skus: BTreeSet<u64> = stats.top100_skus.iter().map(|&(id, _)| id).collect();
    let top_cats: BTreeSet<u64> = stats.top100_categories.iter().map(|&(id, _)| id).collect();

    let buys: Vec<Buy> = h
        .events
        .iter()
        .filter(|e| e.event_type == EventType::Purchase && e.ts <= anchor)
        .map(|e| {
            let price = e.price_bucket.map(|p| p as f64).unwrap_or(0.0);
            let (c5, c10) = match e.text_embedding {
                Some(emb) => {
                    let p: Vec<f64> = emb.iter().map(|&b| b as f64).collect();
                    (
                        assign_cluster(&p, &stats.kmeans_c5).ok(),
                        assign_cluster(&p, &stats.kmeans_c10).ok(),
                    )
                }
                None => (None, None),
            };
            Buy {
                ts: e.ts,
                price,
                seg: price7_segment(price, &stats.price7_bounds),
                c5,
                c10,
                sku_top: e.sku.map(|s| top_skus.contains(&s)).unwrap_or(false),
                cat_top: e.category.map(|c| top_cats.contains(&c)).unwrap_or(false),
            }
        })
        .collect();

    let mut out = Vec::with_capacity(N_CLUSTER);

    // Per-τ EW aggregates over the hard window Δt ≤ τ·86400 with weight
    // exp(-Δt/(τ·86400)).
    struct EwAgg {
        rows: f64,
        c5: [f64; 5],
        c10: [f64; 10],
        seg_mid: [f64; 3], // mid_hi, mid, mid_lo
        wprice: f64,
        max_p: f64,
        min_p: f64,
        wvar_acc: Vec<(f64, f64)>, // (w, price) for the weighted variance
        sku_cnt: f64,
        sku_score: f64,
        cat_cnt: f64,
        cat_score: f64,
        gap: f64,
        gap_w: f64,
    }

    let aggs: Vec<EwAgg> = ew_cfgs
        .iter()
        .map(|cfg| {
            let horizon = cfg.tau_days as i64 * SECONDS_PER_DAY;
            let mut a = EwAgg {
                rows: 0.0,
                c5: [0.0; 5],
                c10: [0.0; 10],
                seg_mid: [0.0; 3],
                wprice: 0.0,
                max_p: f64::NEG_INFINITY,
                min_p: f64::INFINITY,
                wvar_acc: Vec::new(),
                sku_cnt: 0.0,
                sku_score: 0.0,
                cat_cnt: 0.0,
                cat_score: 0.0,
                gap: 0.0,
                gap_w: 0.0,
            };
            let mut prev_ts: Option<i64> = None;
            for b in &buys {
                let dt = anchor - b.ts;
                if dt > horizon {
                    continue;
                }
                let w = ew_weight(dt, *cfg).unwrap_or(0.0);
                a.rows += w;
                if let Some(k) = b.c5 {
                    a.c5[k] += w;
                }
                if let Some(k) = b.c10 {
                    a.c10[k] += w;
                }
                match b.seg {
                    SEG_MID_HI => a.seg_mid[0] += w,
                    SEG_MID => a.seg_mid[1] += w,
                    SEG_MID_LO => a.seg_mid[2] += w,
                    _ => {}
                }
                a.wprice += w * b.price;
                a.max_p = a.max_p.max(b.price);
                a.min_p = a.min_p.min(b.price);
                a.wvar_acc.push((w, b.price));
                if b.sku_top {
                    a.sku_cnt += 1.0;
                    a.sku_score += w;
                }
                if b.cat_top {
                    a.cat_cnt += 1.0;
                    a.cat_score += w;
                }
                if let Some(p) = prev_ts {
                    a.gap += w * (b.ts - p) as f64 / SECONDS_PER_DAY as f64;
                    a.gap_w += w;
                }
                prev_ts = Some(b.ts);
            }
            a
        })
        .collect();

    // group 1: EW sums
    for a in &aggs {
        out.push(a.rows);
    }
    for k in 0..5 {
        for a in &aggs {
            out.push(a.c5[k]);
        }
    }
    for s in 0..3 {
        for a in &aggs {
            out.push(a.seg_mid[s]);
        }
    }
    // group 2: shares and the hi/lo ratio
    for k in 0..5 {
        for a in &aggs {
            out.push(ratio(a.c5[k], a.rows));
        }
    }
    for s in 0..3 {
        for a in &aggs {
            out.push(ratio(a.seg_mid[s], a.rows));
        }
    }
    for a in &aggs {
        out.push(ratio(a.seg_mid[0], a.seg_mid[2]));
    }
    // group 3: EW price statistics
    for a in &aggs {
        out.push(ratio(a.wprice, a.rows));
    }
    for a in &aggs {
        out.push(if a.rows > 0.0 { a.max_p } else { 0.0 });
    }
    for a in &aggs {
        out.push(if a.rows > 0.0 { a.min_p } else { 0.0 });
    }
    for a in &aggs {
        out.push(if a.rows > 0.0 { a.max_p - a.min_p } else { 0.0 });
    }
    for a in &aggs {
        let mean = ratio(a.wprice, a.rows);
        let var = if a.rows > 0.0 {
            a.wvar_acc.iter().map(|&(w, p)| w * (p - mean) * (p - mean)).sum::<f64>() / a.rows
        } else {
            0.0
        };
        out.push(ratio(var.sqrt(), mean));
    }
    // group 4: top-100 SKU/category aggregates
    for a in &aggs {
        out.push(a.sku_cnt);
    }
    for a in &aggs {
        out.push(a.sku_score);
    }
    for a in &aggs {
        out.push(a.cat_cnt);
    }
    for a in &aggs {
        out.push(a.cat_score);
    }

    // group 5: whole-history purchase aggregates
    let rows_total = buys.len() as f64;
    let mut prices: Vec<f64> = buys.iter().map(|b| b.price).collect();
    prices.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sum_price: f64 = prices.iter().sum();
    let mean_price = ratio(sum_price, rows_total);
    let (median, q25, q75, max_p, min_p, std_p) = if prices.is_empty() {
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    } else {
        let var =
            prices.iter().map(|p| (p - mean_price) * (p - mean_price)).sum::<f64>() / rows_total;
        (
            interp_quantile(&prices, 0.5),
            interp_quantile(&prices, 0.25),
            interp_quantile(&prices, 0.75),
            prices[prices.len() - 1],
            prices[0],
            var.sqrt(),
        )
    };
    let active_days = buys
        .iter()
        .map(|b| b.ts.div_euclid(SECONDS_PER_DAY))
        .collect::<BTreeSet<i64>>()
        .len() as f64;
    let mid_hi_cnt = buys.iter().filter(|b| b.seg == SEG_MID_HI).count() as f64;
    let mid_lo_cnt = buys.iter().filter(|b| b.seg == SEG_MID_LO).count() as f64;
    let mid_hi_share = ratio(mid_hi_cnt, rows_total);
    let mid_lo_share = ratio(mid_lo_cnt, rows_total);
    let iqr = q75 - q25;
    out.push(rows_total);
    out.push(sum_price);
    out.push(mean_price);
    out.push(median);
    out.push(q25);
    out.push(q75);
    out.push(max_p);
    out.push(min_p);
    out.push(std_p);
    out.push(active_days);
    out.push(max_p - min_p);
    out.push(iqr);
    out.push(ratio(std_p, mean_price));
    out.push(ratio(mean_price, median));
    out.push(mid_hi_share);
    out.push(mid_lo_share);
    out.push(ratio(mid_hi_share, mid_lo_share));
    out.push(ratio(rows_total, active_days));
    out.push(ratio(mid_hi_share, mean_price));
    out.push(ratio(mid_hi_share, iqr));

    // group 6: PRICE7 segment value sums over the whole history
    let mut seg_sums = [0.0f64; 7];
    for b in &buys {
        seg_sums[b.seg] += b.price;
    }
    out.extend(seg_sums);

    // group 7: c5 and c10 cluster value sums over the whole history
    let mut c5_sums = [0.0f64; 5];
    let mut c10_sums = [0.0f64; 10];
    for b in &buys {
        if let Some(k) = b.c5 {
            c5_sums[k] += b.price;
        }
        if let Some(k) = b.c10 {
            c10_sums[k] += b.price;
        }
    }
    out.extend(c5_sums);
    out.extend(c10_sums);

    // group 8: EW-average purchase gap per τ
    for a in &aggs {
        out.push(ratio(a.gap, a.gap_w));
    }

    // group 9: c10 EW sums at τ=50 and c5 count shares over the whole history
    for k in 0..10 {
        out.push(aggs[1].c10[k]);
    }
    for k in 0..5 {
        let cnt = buys.iter().filter(|b| b.c5 == Some(k)).count() as f64;
        out.push(ratio(cnt, rows_total));
    }

    debug_assert_eq!(out.len(), N_CLUSTER);
    out
}

/// Full 346-value feature row for one user.
pub fn compute_user_features(
    h: &UserHistory,
    stats: &CorpusStats,
    anchor: Option<i64>,
) -> Vec<f64> {
    let anchor = anchor.or(h.last_ts()).unwrap_or(0);
    let mut row = assemble_basic_205_anchored(h, stats, anchor);
    row.extend(compute_cluster_features_141_anchored(h, stats, &EwConfig::TAUS, anchor));
    row
}

/// Per-column z-scoring with stats fitted on `fit_rows` (population std).
/// Constant columns map to 0. Returns (standardized matrix, means, stds).
pub fn standardize(
    matrix: &[Vec<f64>],
    fit_rows: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    if fit_rows.is_empty() {
        return Err(Error::invalid("standardize: empty fit set"));
    }
    let dim = matrix.first().map(|r| r.len()).unwrap_or(0);
    let n = fit_rows.len() as f64;
    let mut means = vec![0.0f64; dim];
    for &r in fit_rows {
        for (m, v) in means.iter_mut().zip(&matrix[r]) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut stds = vec![0.0f64; dim];
    for &r in fit_rows {
        for (s, (v, m)) in stds.iter_mut().zip(matrix[r].iter().zip(&means)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut stds {
        *s = (*s / n).sqrt();
    }
    let out = matrix
        .iter()
        .map(|row| {
            row.iter()
                .zip(means.iter().zip(&stds))
                .map(|(v, (m, s))| if *s == 0.0 { 0.0 } else { (v - m) / s })
                .collect()
        })
        .collect();
    Ok((out, means, stds))
}
