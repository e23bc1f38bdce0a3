//! Canonical feature names and ordering.

use super::{EwConfig, WindowSpec, PRICE7_NAMES};

pub const N_BASIC: usize = 205;
pub const N_CLUSTER: usize = 141;
pub const N_TOTAL: usize = N_BASIC + N_CLUSTER;

/// The 41 per-window aggregates, in emission order.
pub const BASIC_NAMES: [&str; 41] = [
    "add_all",
    "rem_all",
    "buy_all",
    "total_event_cnt",
    "search_cnt",
    "uniq_buy_days",
    "avg_price_add",
    "avg_price_rem",
    "avg_price_bucket_buy",
    "max_price_buy",
    "min_price_buy",
    "price_spread_buy",
    "add_price_sum",
    "buy_price_sum",
    "buy_volume_hi",
    "buy_volume_lo",
    "rem_price_sum",
    "page_visit_cnt",
    "page_per_buy",
    "uniq_url_cnt",
    "duration_days",
    "buy_freq_per_day",
    "cart_action_freq_per_day",
    "cart_ctr",
    "remove_rate",
    "conv_rate",
    "net_cart_ratio",
    "cart_repeat_rate",
    "search_to_add",
    "search_to_buy",
    "hi_price_buy_cnt",
    "lo_price_buy_cnt",
    "hi_price_share",
    "lo_price_share",
    "buy_volume_hi_share",
    "buy_volume_lo_share",
    "lo_hi_buy_ratio",
    "uniq_sku_per_buy",
    "uniq_sku_per_day",
    "uniq_cat_per_buy",
    "uniq_cat_per_day",
];

/// Indices (within the 41) of aggregates that can only grow with the window;
/// used by the window-nesting property check.
pub const MONOTONE_BASIC_IDX: [usize; 16] = [
    0, 1, 2, 3, 4, 5, // counters
    12, 13, 14, 15, 16, // price sums
    17, 19, // page count, unique urls
    20, // duration
    30, 31, // hi/lo purchase counts
];

/// Names of the 205 basic features: each aggregate suffixed with its window
/// (`__all`, `__60d`, `__28d`, `__14d`, `__7d`).
pub fn basic_feature_names() -> Vec<String> {
    let mut out = Vec::with_capacity(N_BASIC);
    for w in WindowSpec::ALL {
        for name in BASIC_NAMES {
            out.push(format!("{name}__{}", w.suffix()));
        }
    }
    out
}

/// Names of the 141 cluster features, matching
/// `compute_cluster_features_141`'s emission order.
pub fn cluster_feature_names() -> Vec<String> {
    let taus: Vec<String> = EwConfig::TAUS.iter().map(|c| c.suffix()).collect();
    let mut out = Vec::with_capacity(N_CLUSTER);
    // group 1
    for t in &taus {
        out.push(format!("ew_rows_{t}"));
    }
    for k in 0..5 {
        for t in &taus {
            out.push(format!("ew_c5_{k}_{t}"));
        }
    }
    for seg in ["mid_hi", "mid", "mid_lo"] {
        for t in &taus {
            out.push(format!("ew_{seg}_price_{t}"));
        }
    }
    // group 2
    for k in 0..5 {
        for t in &taus {
            out.push(format!("share_c5_{k}_{t}"));
        }
    }
    for seg in ["mid_hi", "mid", "mid_lo"] {
        for t in &taus {
            out.push(format!("share_{seg}_price_{t}"));
        }
    }
    for t in &taus {
        out.push(format!("mid_hi_lo_ratio_{t}"));
    }
    // group 3
    for stat in ["ew_mean_price", "ew_max_price", "ew_min_price", "price_range", "cv_price"] {
        for t in &taus {
            out.push(format!("{stat}_{t}"));
        }
    }
    // group 4
    for stat in ["sku_cnt_sum", "sku_score_sum", "cat_cnt_sum", "cat_score_sum"] {
        for t in &taus {
            out.push(format!("{stat}_{t}"));
        }
    }
    // group 5
    for name in [
        "rows_total",
        "sum_price_total",
        "mean_price_total",
        "median_price_total",
        "q25_price_total",
        "q75_price_total",
        "max_price_total",
        "min_price_total",
        "std_price_total",
        "active_days_total",
        "price_range_total",
        "iqr_price_total",
        "cv_price_total",
        "mean_median_ratio_total",
        "mid_hi_share_total",
        "mid_lo_share_total",
        "mid_hi_lo_ratio_total",
        "avg_tx_per_active_day_total",
        "mid_hi_mean_ratio_total",
        "mid_hi_iqr_ratio_total",
    ] {
        out.push(name.to_string());
    }
    // group 6
    for seg in PRICE7_NAMES {
        out.push(format!("{seg}_total"));
    }
    // group 7
    for k in 0..5 {
        out.push(format!("c5_{k}_total"));
    }
    for k in 0..10 {
        out.push(format!("c10_{k}_total"));
    }
    // group 8
    for t in &taus {
        out.push(format!("gap_ew_{t}"));
    }
    // group 9
    for k in 0..10 {
        out.push(format!("ew_c10_{k}_50d"));
    }
    for k in 0..5 {
        out.push(format!("share_c5_{k}_total"));
    }
    out
}

/// All 346 feature names in emission order.
pub fn feature_names() -> Vec<String> {
    let mut out = basic_feature_names();
    out.extend(cluster_feature_names());
    out
}
