//! Profile assembly, AUC-ROC, linear probes and the ablation protocol.
//!
//! The profile is the row-wise concatenation of four per-user components in
//! fixed order: sequential embedding, graph embedding, cross-network
//! embedding, standardized numeric features. Downstream quality is measured
//! with logistic-regression probes (AUC-ROC), the standard frozen-embedding
//! protocol; the ablation runner evaluates the full profile and every
//! leave-one-out mask over several seeds.

mod binfmt;

pub use binfmt::{read_embeddings, write_embeddings};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::features::standardize;
use crate::nn::{backward, AdamState, Graph, Init, ParamStore};

/// Which profile components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub seq: bool,
    pub twhin: bool,
    pub dcn: bool,
    pub features: bool,
}

impl AblationMask {
    pub const ALL: AblationMask =
        AblationMask { seq: true, twhin: true, dcn: true, features: true };

    pub fn none_of(component: &str) -> AblationMask {
        let mut m = Self::ALL;
        match component {
            "seq" => m.seq = false,
            "twhin" => m.twhin = false,
            "dcn" => m.dcn = false,
            "features" => m.features = false,
            _ => panic!("unknown component {component}"),
        }
        m
    }

    pub fn is_empty(&self) -> bool {
        !(self.seq || self.twhin || self.dcn || self.features)
    }

    pub fn label(&self) -> String {
        if *self == Self::ALL {
            return "all".into();
        }
        let mut missing = Vec::new();
        if !self.seq {
            missing.push("seq");
        }
        if !self.twhin {
            missing.push("twhin");
        }
        if !self.dcn {
            missing.push("dcn");
        }
        if !self.features {
            missing.push("features");
        }
        format!("wo_{}", missing.join("_"))
    }

    /// The ablation protocol's mask set: all components plus each
    /// leave-one-out mask.
    pub fn protocol_set() -> Vec<AblationMask> {
        let mut out = vec![Self::ALL];
        for c in ["seq", "twhin", "dcn", "features"] {
            out.push(Self::none_of(c));
        }
        out
    }
}

/// The four per-user components, in concatenation order.
pub struct ProfileComponents<'a> {
    pub seq: &'a EmbeddingSet,
    pub twhin: &'a EmbeddingSet,
    pub dcn: &'a EmbeddingSet,
    /// Standardized numeric features, converted to f32 rows.
    pub features: &'a EmbeddingSet,
}

/// Assembled profile matrix with per-component column ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub matrix: EmbeddingSet,
    pub slices: Vec<(String, std::ops::Range<usize>)>,
}

/// Row-wise concatenation of the selected components. All selected
/// components must cover the same user set in the same order.
pub fn assemble_profile(parts: &ProfileComponents<'_>, mask: AblationMask) -> Result<Profile> {
    if mask.is_empty() {
        return Err(Error::invalid("assemble_profile: empty component mask"));
    }
    let mut selected: Vec<(&str, &EmbeddingSet)> = Vec::new();
    if mask.seq {
        selected.push(("seq", parts.seq));
    }
    if mask.twhin {
        selected.push(("twhin", parts.twhin));
    }
    if mask.dcn {
        selected.push(("dcn", parts.dcn));
    }
    if mask.features {
        selected.push(("features", parts.features));
    }
    let user_ids = selected[0].1.user_ids.clone();
    for (name, set) in &selected {
        if set.user_ids != user_ids {
            return Err(Error::invalid(format!(
                "component {name} covers a different user set ({} vs {} users)",
                set.user_ids.len(),
                user_ids.len()
            )));
        }
    }
    let dim: usize = selected.iter().map(|(_, s)| s.dim).sum();
    let mut data = Vec::with_capacity(user_ids.len() * dim);
    for i in 0..user_ids.len() {
        for (_, set) in &selected {
            data.extend_from_slice(set.row(i));
        }
    }
    let mut slices = Vec::new();
    let mut off = 0;
    for (name, set) in &selected {
        slices.push((name.to_string(), off..off + set.dim));
        off += set.dim;
    }
    let period_end = selected.iter().map(|(_, s)| s.period_end).max().unwrap_or(0);
    Ok(Profile {
        matrix: EmbeddingSet { user_ids, dim, data, period_end },
        slices,
    })
}

/// Rank-statistic AUC-ROC: the probability that a random positive outscores
/// a random negative, ties counted 1/2 (average ranks).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc_roc: scores/labels length mismatch"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc_roc: both classes must be present"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc_roc: NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Probe outcome for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: String,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 200, lr: 1e-2, train_fraction: 0.8 }
    }
}

/// Per-user probe labels: churn plus multi-label SKU/category targets
/// (indices into the respective vocabularies).
#[derive(Debug, Clone, Default)]
pub struct ProbeTargets {
    pub churn: Vec<bool>,
    pub sku: Vec<Vec<usize>>,
    pub sku_k: usize,
    pub cat: Vec<Vec<usize>>,
    pub cat_k: usize,
}

fn standardized_f64(profile: &EmbeddingSet, fit_rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    let matrix: Vec<Vec<f64>> =
        (0..profile.user_ids.len()).map(|i| profile.row(i).iter().map(|&v| v as f64).collect()).collect();
    let (out, _, _) = standardize(&matrix, fit_rows)?;
    Ok(out)
}

/// Trains a K-output logistic regression (full-batch Adam) and returns the
/// per-label eval AUCs (labels with a degenerate eval distribution are
/// skipped). Returned tuple: (aucs, total eval positives, total negatives).
fn fit_probe(
    x: &[Vec<f64>],
    labels: &[Vec<usize>],
    k: usize,
    train_rows: &[usize],
    eval_rows: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(Vec<f64>, usize, usize)> {
    let dim = x[0].len();
    let mut store: ParamStore<f32> = ParamStore::new(seed);
    let w = store.add("probe.w", dim, k, Init::Zeros);
    let b = store.add("probe.b", 1, k, Init::Zeros);
    let mut adam = AdamState::new();

    let xs: Vec<f32> = train_rows
        .iter()
        .flat_map(|&r| x[r].iter().map(|&v| v as f32))
        .collect();
    let mut ys = vec![0.0f32; train_rows.len() * k];
    for (i, &r) in train_rows.iter().enumerate() {
        for &l in &labels[r] {
            ys[i * k + l] = 1.0;
        }
    }
    for _ in 0..cfg.epochs {
        let g: Graph<f32> = Graph::new();
        let xv = g.constant(train_rows.len(), dim, xs.clone());
        let logits = xv.matmul(&g.param(&store, w)).add_row(&g.param(&store, b));
        let loss = logits.softplus().sub(&logits.mul_const(&ys)).mean();
        let grads = backward(&loss)?;
        adam.step(&mut store, &grads, |_| cfg.lr);
    }

    // eval logits
    let xe: Vec<f32> =
        eval_rows.iter().flat_map(|&r| x[r].iter().map(|&v| v as f32)).collect();
    let g: Graph<f32> = Graph::new();
    let xv = g.constant(eval_rows.len(), dim, xe);
    let logits = g.param(&store, w);
    let logits = xv.matmul(&logits).add_row(&g.param(&store, b)).value();

    let mut aucs = Vec::new();
    let mut n_pos = 0;
    let mut n_neg = 0;
    for label in 0..k {
        let scores: Vec<f64> =
            (0..eval_rows.len()).map(|i| logits[i * k + label] as f64).collect();
        let truth: Vec<bool> =
            eval_rows.iter().map(|&r| labels[r].contains(&label)).collect();
        let pos = truth.iter().filter(|&&t| t).count();
        if pos == 0 || pos == truth.len() {
            continue; // degenerate label in the eval split
        }
        n_pos += pos;
        n_neg += truth.len() - pos;
        aucs.push(auc_roc(&scores, &truth)?);
    }
    Ok((aucs, n_pos, n_neg))
}

/// Runs the three downstream probes (churn, category, SKU) on a profile
/// matrix with a seeded 80/20 user split. Multi-label tasks report the
/// macro-averaged AUC.
pub fn train_linear_probe(
    profile: &EmbeddingSet,
    targets: &ProbeTargets,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    let n = profile.user_ids.len();
    if targets.churn.len() != n {
        return Err(Error::shape("probe targets do not cover the profile users"));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    let (train_rows, eval_rows) = rows.split_at(n_train.clamp(1, n - 1));
    let x = standardized_f64(profile, train_rows)?;

    let mut results = Vec::new();

    let churn_labels: Vec<Vec<usize>> =
        targets.churn.iter().map(|&c| if c { vec![0] } else { vec![] }).collect();
    let (aucs, n_pos, n_neg) =
        fit_probe(&x, &churn_labels, 1, train_rows, eval_rows, cfg, seed ^ 0x11)?;
    if aucs.is_empty() {
        return Err(Error::invalid("churn labels are degenerate in the eval split"));
    }
    results.push(ProbeResult { task: "churn".into(), auc: aucs[0], n_pos, n_neg });

    for (task, labels, k, salt) in [
        ("category", &targets.cat, targets.cat_k, 0x22u64),
        ("sku", &targets.sku, targets.sku_k, 0x33),
    ] {
        if k == 0 {
            continue;
        }
        let (aucs, n_pos, n_neg) = fit_probe(&x, labels, k, train_rows, eval_rows, cfg, seed ^ salt)?;
        if aucs.is_empty() {
            return Err(Error::invalid(format!("{task} labels are degenerate in the eval split")));
        }
        let macro_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
        results.push(ProbeResult { task: task.into(), auc: macro_auc, n_pos, n_neg });
    }
    Ok(results)
}

/// One ablation-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub task: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub n_seeds: usize,
}

/// Evaluates all-components plus each leave-one-out mask over the given
/// probe seeds, averaging the AUCs.
pub fn run_ablation(
    parts: &ProfileComponents<'_>,
    targets: &ProbeTargets,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("run_ablation: need at least one seed"));
    }
    let mut rows = Vec::new();
    for mask in AblationMask::protocol_set() {
        let profile = assemble_profile(parts, mask)?;
        let mut per_task: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for &seed in seeds {
            for r in train_linear_probe(&profile.matrix, targets, cfg, seed)? {
                per_task.entry(r.task).or_default().push(r.auc);
            }
        }
        for (task, aucs) in per_task {
            let n = aucs.len() as f64;
            let mean = aucs.iter().sum::<f64>() / n;
            let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            rows.push(AblationRow {
                mask: mask.label(),
                task,
                mean_auc: mean,
                std_auc: var.sqrt(),
                n_seeds: seeds.len(),
            });
        }
    }
    Ok(rows)
}
