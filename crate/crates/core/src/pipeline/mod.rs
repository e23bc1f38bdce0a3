//! Pipeline stages wired through files in the run output directory.
//!
//! Every artifact embeds the run-config hash (a footer in the binary
//! formats, a field in the JSON sidecars); stages verify the hash of every
//! input so artifacts from different configurations fail fast instead of
//! silently mixing. Stage order: gen-synth/ingest → split → features →
//! train-seq → train-twhin → train-dcn → assemble → eval → ablate.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{EmbeddingSet, FeatureMatrix};
use crate::dcn::{self, DcnTrainData};
use crate::encoders::TwoHash;
use crate::error::{Error, Result};
use crate::event::{
    build_user_histories, generate_synthetic, parse_events, write_events_jsonl, Event,
    EventFormat, UserHistory, SECONDS_PER_DAY,
};
use crate::features::{
    compute_user_features, feature_names, fit_corpus_stats, standardize, CorpusStats, N_TOTAL,
};
use crate::profile::{
    assemble_profile, read_embeddings, run_ablation, train_linear_probe, write_embeddings,
    AblationMask, AblationRow, ProbeResult, ProbeTargets, Profile, ProfileComponents,
};
use crate::seq::{train_seq_encoder, ItemCatalog};
use crate::twhin::{build_graph, ItemEncoderMode};

/// File names of the pipeline artifacts.
pub mod artifacts {
    pub const EVENTS: &str = "events.jsonl";
    pub const EVENTS_META: &str = "events_meta.json";
    pub const SYNTH_MANIFEST: &str = "synth_manifest.json";
    pub const SPLIT: &str = "split.json";
    pub const EVENTS_INPUT: &str = "events_input.jsonl";
    pub const EVENTS_TARGET: &str = "events_target.jsonl";
    pub const FEATURES: &str = "features.csv";
    pub const FEATURES_INNER: &str = "features_inner.csv";
    pub const CORPUS_STATS: &str = "corpus_stats.json";
    pub const CORPUS_STATS_INNER: &str = "corpus_stats_inner.json";
    pub const SEQ_FULL_CKPT: &str = "seq_full.ubpc";
    pub const SEQ_SAFE_CKPT: &str = "seq_safe.ubpc";
    pub const SEQ_METRICS: &str = "seq_metrics.csv";
    pub const SEQ_SAFE_METRICS: &str = "seq_safe_metrics.csv";
    pub const SEQ_EMB: &str = "seq_emb.ubpe";
    pub const DCN_TRAIN_EMB: &str = "dcn_train_emb.ubpe";
    pub const DCN_INFER_EMB: &str = "dcn_infer_emb.ubpe";
    pub const AUG0_EMB: &str = "aug0_emb.ubpe";
    pub const AUG1_EMB: &str = "aug1_emb.ubpe";
    pub const TWHIN_EMB: &str = "twhin_emb.ubpe";
    pub const TWHIN_GRAPH: &str = "twhin_graph.csv";
    pub const TWHIN_METRICS: &str = "twhin_metrics.csv";
    pub const DCN_CKPT: &str = "dcn.ubpc";
    pub const DCN_EMB: &str = "dcn_emb.ubpe";
    pub const DCN_METRICS: &str = "dcn_metrics.csv";
    pub const PLE_BINS: &str = "ple_bins.json";
    pub const PROFILE: &str = "profile.ubpe";
    pub const PROFILE_META: &str = "profile_meta.json";
    pub const PROBE_RESULTS: &str = "probe_results.csv";
    pub const ABLATION: &str = "ablation.csv";
    pub const CONFIG_ECHO: &str = "run_config.toml";
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar<T> {
    config_hash: u64,
    #[serde(flatten)]
    payload: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub train_end: i64,
    pub inner_end: i64,
    pub target_end: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StatsPayload {
    period_end: i64,
    stats: CorpusStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EventsMeta {
    n_events: usize,
    source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub dims: Vec<(String, usize)>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: u64,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = PathBuf::from(&cfg.run.out_dir);
        std::fs::create_dir_all(&out)?;
        let hash = cfg.hash();
        let p = Pipeline { cfg, out, hash };
        std::fs::write(p.path(artifacts::CONFIG_ECHO), p.cfg.to_toml())?;
        Ok(p)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p.display().to_string(),
                stage: producer.to_string(),
            });
        }
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, payload: T) -> Result<()> {
        let wrapper = Sidecar { config_hash: self.hash, payload };
        let text = serde_json::to_string_pretty(&wrapper).map_err(std::io::Error::other)?;
        std::fs::write(self.path(name), text)?;
        Ok(())
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str, producer: &str) -> Result<T> {
        let p = self.require(name, producer)?;
        let text = std::fs::read_to_string(&p)?;
        let wrapper: Sidecar<T> = serde_json::from_str(&text).map_err(|e| Error::CorruptFile {
            path: p.display().to_string(),
            msg: e.to_string(),
        })?;
        if wrapper.config_hash != self.hash {
            return Err(Error::ConfigHashMismatch {
                path: p.display().to_string(),
                found: wrapper.config_hash,
                expected: self.hash,
            });
        }
        Ok(wrapper.payload)
    }

    fn write_embedding_file(&self, name: &str, set: &EmbeddingSet) -> Result<()> {
        let f = File::create(self.path(name))?;
        write_embeddings(BufWriter::new(f), set, self.hash)
    }

    fn read_embedding_file(&self, name: &str, producer: &str) -> Result<EmbeddingSet> {
        let p = self.require(name, producer)?;
        let f = File::open(&p)?;
        let (set, hash) = read_embeddings(BufReader::new(f), &p.display().to_string())?;
        match hash {
            Some(h) if h != self.hash => Err(Error::ConfigHashMismatch {
                path: p.display().to_string(),
                found: h,
                expected: self.hash,
            }),
            _ => Ok(set),
        }
    }

    fn load_events(&self, name: &str, producer: &str) -> Result<Vec<Event>> {
        let p = self.require(name, producer)?;
        let f = File::open(&p)?;
        let outcome = parse_events(BufReader::new(f), EventFormat::Jsonl)?;
        if let Some(d) = outcome.diagnostics.first() {
            return Err(Error::CorruptFile {
                path: p.display().to_string(),
                msg: format!("line {}: {}", d.line, d.msg),
            });
        }
        Ok(outcome.events)
    }

    /// Generates the synthetic corpus into `events.jsonl`.
    pub fn gen_synth(&self) -> Result<()> {
        let (events, manifest) = generate_synthetic(&self.cfg.synth_config(), self.cfg.run.seed)?;
        let f = File::create(self.path(artifacts::EVENTS))?;
        write_events_jsonl(BufWriter::new(f), &events)?;
        self.write_json(artifacts::SYNTH_MANIFEST, manifest)?;
        self.write_json(
            artifacts::EVENTS_META,
            EventsMeta { n_events: events.len(), source: "synth".into() },
        )?;
        log::info!("gen-synth: {} events", events.len());
        Ok(())
    }

    /// Validates an external event file and writes the canonical JSONL.
    /// Returns (accepted, rejected) counts.
    pub fn ingest(&self, input: &Path, format: EventFormat) -> Result<(usize, usize)> {
        let f = File::open(input)?;
        let outcome = parse_events(BufReader::new(f), format)?;
        for d in &outcome.diagnostics {
            log::warn!("{}: line {}: {}", input.display(), d.line, d.msg);
        }
        let f = File::create(self.path(artifacts::EVENTS))?;
        write_events_jsonl(BufWriter::new(f), &outcome.events)?;
        self.write_json(
            artifacts::EVENTS_META,
            EventsMeta { n_events: outcome.events.len(), source: "ingest".into() },
        )?;
        Ok((outcome.events.len(), outcome.diagnostics.len()))
    }

    /// Splits the log at `max_ts − target_days`; the inner boundary for DCN
    /// labels sits `dcn_target_days` earlier.
    pub fn split(&self) -> Result<SplitInfo> {
        let _meta: EventsMeta = self.read_json(artifacts::EVENTS_META, "gen-synth")?;
        let events = self.load_events(artifacts::EVENTS, "gen-synth")?;
        if events.is_empty() {
            return Err(Error::invalid("split: no events"));
        }
        let target_end = events.iter().map(|e| e.ts).max().unwrap();
        let train_end = target_end - self.cfg.split.target_days * SECONDS_PER_DAY;
        let inner_end = train_end - self.cfg.split.dcn_target_days * SECONDS_PER_DAY;
        let info = SplitInfo { train_end, inner_end, target_end };

        let mut input = Vec::new();
        let mut target = Vec::new();
        for e in events {
            if e.ts <= train_end {
                input.push(e);
            } else if e.ts <= target_end {
                target.push(e);
            }
        }
        let f = File::create(self.path(artifacts::EVENTS_INPUT))?;
        write_events_jsonl(BufWriter::new(f), &input)?;
        let f = File::create(self.path(artifacts::EVENTS_TARGET))?;
        write_events_jsonl(BufWriter::new(f), &target)?;
        self.write_json(artifacts::SPLIT, info)?;
        log::info!(
            "split: {} input / {} target events (train_end {train_end})",
            input.len(),
            target.len()
        );
        Ok(info)
    }

    fn split_info(&self) -> Result<SplitInfo> {
        self.read_json(artifacts::SPLIT, "split")
    }

    /// Users with at least one input-period interaction, with their input
    /// histories.
    fn input_histories(&self) -> Result<BTreeMap<u64, UserHistory>> {
        let events = self.load_events(artifacts::EVENTS_INPUT, "split")?;
        Ok(build_user_histories(&events))
    }

    fn truncate_histories(
        histories: &BTreeMap<u64, UserHistory>,
        end: i64,
    ) -> BTreeMap<u64, UserHistory> {
        histories
            .iter()
            .map(|(&uid, h)| {
                let events = h.events.iter().filter(|e| e.ts <= end).cloned().collect();
                (uid, UserHistory { user_id: uid, events })
            })
            .collect()
    }

    fn window_anchor(&self, end: i64) -> Option<i64> {
        match self.cfg.features.anchor.as_str() {
            "train_end" => Some(end),
            _ => None,
        }
    }

    fn compute_feature_block(
        &self,
        histories: &BTreeMap<u64, UserHistory>,
        period_end: i64,
    ) -> Result<(FeatureMatrix, CorpusStats)> {
        let mut stats = fit_corpus_stats(histories, self.cfg.features.kmeans_seed)?;
        let names = feature_names();
        let user_ids: Vec<u64> = histories.keys().copied().collect();
        let anchor = self.window_anchor(period_end);
        let rows: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            let hs: Vec<&UserHistory> = histories.values().collect();
            hs.par_iter().map(|h| compute_user_features(h, &stats, anchor)).collect()
        };
        let fit: Vec<usize> = (0..rows.len()).collect();
        let (_, means, stds) = standardize(&rows, &fit)?;
        stats.feature_means = means;
        stats.feature_stds = stds;
        let mut data = Vec::with_capacity(rows.len() * N_TOTAL);
        for r in rows {
            data.extend(r);
        }
        Ok((FeatureMatrix { user_ids, names, data, period_end }, stats))
    }

    fn write_features_csv(&self, name: &str, matrix: &FeatureMatrix) -> Result<()> {
        let f = File::create(self.path(name))?;
        let mut w = BufWriter::new(f);
        write!(w, "user_id")?;
        for n in &matrix.names {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for (i, uid) in matrix.user_ids.iter().enumerate() {
            write!(w, "{uid}")?;
            for v in matrix.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    fn read_features_csv(&self, name: &str, period_end: i64) -> Result<FeatureMatrix> {
        let p = self.require(name, "features")?;
        let text = std::fs::read_to_string(&p)?;
        let corrupt = |msg: String| Error::CorruptFile { path: p.display().to_string(), msg };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| corrupt("empty file".into()))?;
        let names: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
        let mut user_ids = Vec::new();
        let mut data = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let uid: u64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| corrupt(format!("bad user id on data line {}", ln + 1)))?;
            user_ids.push(uid);
            for v in parts {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| corrupt(format!("bad value `{v}` on data line {}", ln + 1)))?,
                );
            }
        }
        if data.len() != user_ids.len() * names.len() {
            return Err(corrupt("ragged feature rows".into()));
        }
        Ok(FeatureMatrix { user_ids, names, data, period_end })
    }

    /// Computes raw features and corpus statistics on the full input period
    /// and on the inner (DCN-training) period.
    pub fn features(&self) -> Result<()> {
        let info = self.split_info()?;
        let histories = self.input_histories()?;
        let (full, full_stats) = self.compute_feature_block(&histories, info.train_end)?;
        self.write_features_csv(artifacts::FEATURES, &full)?;
        self.write_json(
            artifacts::CORPUS_STATS,
            StatsPayload { period_end: info.train_end, stats: full_stats },
        )?;

        let inner_histories = Self::truncate_histories(&histories, info.inner_end);
        let (inner, inner_stats) = self.compute_feature_block(&inner_histories, info.inner_end)?;
        self.write_features_csv(artifacts::FEATURES_INNER, &inner)?;
        self.write_json(
            artifacts::CORPUS_STATS_INNER,
            StatsPayload { period_end: info.inner_end, stats: inner_stats },
        )?;
        log::info!("features: {} users x {} columns", full.user_ids.len(), full.dim());
        Ok(())
    }

    fn standardized(matrix: &FeatureMatrix, stats: &CorpusStats) -> EmbeddingSet {
        let dim = matrix.dim();
        let mut data = Vec::with_capacity(matrix.user_ids.len() * dim);
        for row in matrix.rows() {
            for (j, &v) in row.iter().enumerate() {
                let s = stats.feature_stds[j];
                let z = if s == 0.0 { 0.0 } else { (v - stats.feature_means[j]) / s };
                data.push(z as f32);
            }
        }
        EmbeddingSet {
            user_ids: matrix.user_ids.clone(),
            dim,
            data,
            period_end: matrix.period_end,
        }
    }

    fn write_metrics_csv<T: Serialize>(
        &self,
        name: &str,
        columns: &[&str],
        rows: &[T],
    ) -> Result<()> {
        let f = File::create(self.path(name))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "{}", columns.join(","))?;
        for row in rows {
            let v = serde_json::to_value(row).map_err(std::io::Error::other)?;
            let obj = v.as_object().expect("metrics rows are flat structs");
            let vals: Vec<String> =
                columns.iter().map(|c| obj[*c].to_string()).collect();
            writeln!(w, "{}", vals.join(","))?;
        }
        Ok(())
    }

    /// Trains the full-period and the leakage-safe sequential encoders and
    /// exports every embedding set the later stages need.
    pub fn train_seq(&self) -> Result<()> {
        let info = self.split_info()?;
        let histories = self.input_histories()?;
        let model_cfg = self.cfg.seq_model_config();
        let tcfg = self.cfg.seq_train_config();

        let (model_full, store_full, metrics_full) =
            train_seq_encoder::<f32>(&histories, &model_cfg, &tcfg, self.cfg.run.seed ^ 0xA)?;
        let rows = model_full.encode_users(&store_full, &histories)?;
        let set = EmbeddingSet::from_rows(rows, model_cfg.embedding_dim, info.train_end)?;
        self.write_embedding_file(artifacts::SEQ_EMB, &set)?;
        let f = File::create(self.path(artifacts::SEQ_FULL_CKPT))?;
        crate::nn::write_checkpoint(BufWriter::new(f), &store_full, self.hash)?;
        self.write_metrics_csv(
            artifacts::SEQ_METRICS,
            &["step", "loss", "netp", "tdp", "nip", "nup", "lr", "grad_norm"],
            &metrics_full,
        )?;

        // leakage-safe encoder: trained strictly before the inner boundary
        let inner_histories = Self::truncate_histories(&histories, info.inner_end);
        let mut safe_tcfg = tcfg.clone();
        safe_tcfg.seed ^= 0xB;
        let (model_safe, store_safe, metrics_safe) =
            train_seq_encoder::<f32>(&inner_histories, &model_cfg, &safe_tcfg, self.cfg.run.seed ^ 0xC)?;
        let rows = model_safe.encode_users(&store_safe, &inner_histories)?;
        let set = EmbeddingSet::from_rows(rows, model_cfg.embedding_dim, info.inner_end)?;
        self.write_embedding_file(artifacts::DCN_TRAIN_EMB, &set)?;
        // the safe encoder applied to the full input period (DCN export input)
        let rows = model_safe.encode_users(&store_safe, &histories)?;
        let set = EmbeddingSet::from_rows(rows, model_cfg.embedding_dim, info.train_end)?;
        self.write_embedding_file(artifacts::DCN_INFER_EMB, &set)?;
        // two augmentation views for the contrastive objective
        for (draw, name) in [(0u64, artifacts::AUG0_EMB), (1, artifacts::AUG1_EMB)] {
            let masked: BTreeMap<u64, UserHistory> = inner_histories
                .iter()
                .map(|(&uid, h)| {
                    (uid, dcn::augment_mask(h, self.cfg.dcn.mask_rate, self.cfg.run.seed ^ 0xD, draw))
                })
                .collect();
            let rows = model_safe.encode_users(&store_safe, &masked)?;
            let set = EmbeddingSet::from_rows(rows, model_cfg.embedding_dim, info.inner_end)?;
            self.write_embedding_file(name, &set)?;
        }
        let f = File::create(self.path(artifacts::SEQ_SAFE_CKPT))?;
        crate::nn::write_checkpoint(BufWriter::new(f), &store_safe, self.hash)?;
        self.write_metrics_csv(
            artifacts::SEQ_SAFE_METRICS,
            &["step", "loss", "netp", "tdp", "nip", "nup", "lr", "grad_norm"],
            &metrics_safe,
        )?;
        Ok(())
    }

    /// Trains TwHIN on the input-period interaction graph.
    pub fn train_twhin(&self) -> Result<()> {
        let info = self.split_info()?;
        let histories = self.input_histories()?;
        let edges = build_graph(&histories);
        let catalog = ItemCatalog::from_histories(&histories);
        let cfg = self.cfg.twhin_config();
        let model_cfg = self.cfg.seq_model_config();
        let hash_fns = TwoHash::new(model_cfg.hash_seed1, model_cfg.hash_seed2, model_cfg.muve_vocab);

        // graph dump
        let f = File::create(self.path(artifacts::TWHIN_GRAPH))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "user_id,item_id,edge_type")?;
        for e in &edges.edges {
            let t = match e.kind {
                crate::twhin::EdgeKind::Purchase => "purchase",
                crate::twhin::EdgeKind::AddToCart => "add_to_cart",
            };
            writeln!(w, "{},{},{}", e.user, e.item, t)?;
        }
        drop(w);

        let seq_cfg_opt =
            matches!(cfg.item_mode, ItemEncoderMode::Pretrained).then_some(&model_cfg);
        let users = crate::twhin::select_users(&histories, cfg.max_users);
        let mut store: crate::nn::ParamStore<f32> =
            crate::nn::ParamStore::new(self.cfg.run.seed ^ 0x20);
        let model = crate::twhin::TwhinModel::register(
            &mut store,
            &cfg,
            &users,
            &edges,
            &catalog,
            seq_cfg_opt,
        )?;
        // pretrained mode starts from the full-period encoder weights
        if matches!(cfg.item_mode, ItemEncoderMode::Pretrained) {
            let p = self.require(artifacts::SEQ_FULL_CKPT, "train-seq")?;
            let f = File::open(&p)?;
            crate::nn::load_checkpoint(
                BufReader::new(f),
                &mut store,
                &p.display().to_string(),
                false,
            )?;
        }
        let metrics = crate::twhin::train_twhin_prepared(
            &model,
            &mut store,
            &edges,
            &cfg,
            &hash_fns,
            self.cfg.run.seed ^ 0x21,
        )?;
        let rows = model.export_users(&store);
        let set = EmbeddingSet::from_rows(rows, cfg.dim, info.train_end)?;
        self.write_embedding_file(artifacts::TWHIN_EMB, &set)?;
        self.write_metrics_csv(artifacts::TWHIN_METRICS, &["step", "loss", "grad_norm"], &metrics)?;
        Ok(())
    }

    fn probe_vocabs(&self, stats: &CorpusStats) -> (Vec<u64>, Vec<u64>) {
        let dcn_cfg = self.cfg.dcn_config();
        let skus: Vec<u64> =
            stats.top100_skus.iter().take(dcn_cfg.sku_k).map(|&(id, _)| id).collect();
        let cats: Vec<u64> =
            stats.top100_categories.iter().take(dcn_cfg.cat_k).map(|&(id, _)| id).collect();
        (skus, cats)
    }

    /// Trains the DCN on inner-period inputs with labels from the last
    /// `dcn_target_days` of the input period, then exports embeddings for
    /// the full input period.
    pub fn train_dcn(&self) -> Result<()> {
        let info = self.split_info()?;
        let inner_stats: StatsPayload = self.read_json(artifacts::CORPUS_STATS_INNER, "features")?;
        let raw_inner = self.read_features_csv(artifacts::FEATURES_INNER, info.inner_end)?;
        let std_inner = Self::standardized(&raw_inner, &inner_stats.stats);
        // the model consumes standardized features as f64 rows
        let feat_inner = FeatureMatrix {
            user_ids: std_inner.user_ids.clone(),
            names: raw_inner.names.clone(),
            data: std_inner.data.iter().map(|&v| v as f64).collect(),
            period_end: info.inner_end,
        };
        let seq_embs = self.read_embedding_file(artifacts::DCN_TRAIN_EMB, "train-seq")?;
        let aug0 = self.read_embedding_file(artifacts::AUG0_EMB, "train-seq")?;
        let aug1 = self.read_embedding_file(artifacts::AUG1_EMB, "train-seq")?;

        // labels: purchases in (inner_end, train_end]
        let histories = self.input_histories()?;
        let label_histories: BTreeMap<u64, UserHistory> = histories
            .iter()
            .map(|(&uid, h)| {
                let events = h
                    .events
                    .iter()
                    .filter(|e| e.ts > info.inner_end && e.ts <= info.train_end)
                    .cloned()
                    .collect();
                (uid, UserHistory { user_id: uid, events })
            })
            .collect();
        let cfg = self.cfg.dcn_config();
        let (sku_vocab, cat_vocab) = self.probe_vocabs(&inner_stats.stats);
        let targets = dcn::derive_targets(&label_histories, cfg.churn_rule, &sku_vocab, &cat_vocab);

        let data = DcnTrainData {
            features: &feat_inner,
            seq_embs: &seq_embs,
            aug_embs: cfg.contrastive_enabled.then_some((&aug0, &aug1)),
            targets: &targets,
            target_window_start: info.inner_end,
        };
        let (model, store, metrics) = dcn::train_dcn::<f32>(
            &cfg,
            &data,
            sku_vocab,
            cat_vocab,
            self.cfg.run.seed ^ 0x30,
            self.cfg.run.seed ^ 0x31,
        )?;
        self.write_metrics_csv(
            artifacts::DCN_METRICS,
            &["step", "loss", "churn", "sku", "cat", "contrastive", "grad_norm"],
            &metrics,
        )?;
        self.write_json(artifacts::PLE_BINS, model.ple.clone())?;
        let f = File::create(self.path(artifacts::DCN_CKPT))?;
        crate::nn::write_checkpoint(BufWriter::new(f), &store, self.hash)?;

        // export on full-period inputs, standardized with the training stats
        let raw_full = self.read_features_csv(artifacts::FEATURES, info.train_end)?;
        let std_full = Self::standardized(&raw_full, &inner_stats.stats);
        let feat_full = FeatureMatrix {
            user_ids: std_full.user_ids.clone(),
            names: raw_full.names.clone(),
            data: std_full.data.iter().map(|&v| v as f64).collect(),
            period_end: info.train_end,
        };
        let infer_embs = self.read_embedding_file(artifacts::DCN_INFER_EMB, "train-seq")?;
        let out = dcn::export_embeddings(&model, &store, &feat_full, &infer_embs)?;
        self.write_embedding_file(artifacts::DCN_EMB, &out)?;
        Ok(())
    }

    fn load_components(&self) -> Result<(EmbeddingSet, EmbeddingSet, EmbeddingSet, EmbeddingSet)> {
        let info = self.split_info()?;
        let stats: StatsPayload = self.read_json(artifacts::CORPUS_STATS, "features")?;
        let seq = self.read_embedding_file(artifacts::SEQ_EMB, "train-seq")?;
        let twhin = self.read_embedding_file(artifacts::TWHIN_EMB, "train-twhin")?;
        let dcn_emb = self.read_embedding_file(artifacts::DCN_EMB, "train-dcn")?;
        let raw = self.read_features_csv(artifacts::FEATURES, info.train_end)?;
        let features = Self::standardized(&raw, &stats.stats);
        Ok((seq, twhin, dcn_emb, features))
    }

    /// Concatenates the four components into the profile binary.
    pub fn assemble(&self) -> Result<Profile> {
        let (seq, twhin, dcn_emb, features) = self.load_components()?;
        let parts =
            ProfileComponents { seq: &seq, twhin: &twhin, dcn: &dcn_emb, features: &features };
        let profile = assemble_profile(&parts, AblationMask::ALL)?;
        self.write_embedding_file(artifacts::PROFILE, &profile.matrix)?;
        self.write_json(
            artifacts::PROFILE_META,
            ProfileMeta {
                dims: profile.slices.iter().map(|(n, r)| (n.clone(), r.len())).collect(),
            },
        )?;
        Ok(profile)
    }

    fn probe_targets(&self, user_ids: &[u64]) -> Result<ProbeTargets> {
        let stats: StatsPayload = self.read_json(artifacts::CORPUS_STATS, "features")?;
        let (sku_vocab, cat_vocab) = self.probe_vocabs(&stats.stats);
        let target_events = self.load_events(artifacts::EVENTS_TARGET, "split")?;
        let mut histories = build_user_histories(&target_events);
        let mut map: BTreeMap<u64, UserHistory> = BTreeMap::new();
        for &uid in user_ids {
            map.insert(
                uid,
                histories.remove(&uid).unwrap_or(UserHistory { user_id: uid, events: vec![] }),
            );
        }
        let cfg = self.cfg.dcn_config();
        let derived = dcn::derive_targets(&map, cfg.churn_rule, &sku_vocab, &cat_vocab);
        let mut targets = ProbeTargets {
            churn: Vec::with_capacity(user_ids.len()),
            sku: Vec::with_capacity(user_ids.len()),
            sku_k: sku_vocab.len(),
            cat: Vec::with_capacity(user_ids.len()),
            cat_k: cat_vocab.len(),
        };
        for uid in user_ids {
            let t = &derived[uid];
            targets.churn.push(t.churn);
            targets.sku.push(t.skus.clone());
            targets.cat.push(t.cats.clone());
        }
        Ok(targets)
    }

    /// Names the first pipeline stage whose output is missing.
    fn first_missing_stage(&self) -> Option<&'static str> {
        for (file, stage) in [
            (artifacts::EVENTS, "gen-synth"),
            (artifacts::SPLIT, "split"),
            (artifacts::FEATURES, "features"),
            (artifacts::SEQ_EMB, "train-seq"),
            (artifacts::TWHIN_EMB, "train-twhin"),
            (artifacts::DCN_EMB, "train-dcn"),
            (artifacts::PROFILE, "assemble"),
        ] {
            if !self.path(file).exists() {
                return Some(stage);
            }
        }
        None
    }

    /// Probes the full profile on the reserved target window.
    pub fn eval(&self) -> Result<Vec<ProbeResult>> {
        if !self.path(artifacts::PROFILE).exists() {
            let stage = self.first_missing_stage().unwrap_or("assemble");
            return Err(Error::MissingArtifact {
                path: self.path(artifacts::PROFILE).display().to_string(),
                stage: stage.to_string(),
            });
        }
        let p = self.require(artifacts::PROFILE, "assemble")?;
        let f = File::open(&p)?;
        let (profile, hash) = read_embeddings(BufReader::new(f), &p.display().to_string())?;
        if let Some(h) = hash {
            if h != self.hash {
                return Err(Error::ConfigHashMismatch {
                    path: p.display().to_string(),
                    found: h,
                    expected: self.hash,
                });
            }
        }
        let targets = self.probe_targets(&profile.user_ids)?;
        let results =
            train_linear_probe(&profile, &targets, &self.cfg.probe_config(), self.cfg.run.seed)?;
        let f = File::create(self.path(artifacts::PROBE_RESULTS))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "task,auc,n_pos,n_neg")?;
        for r in &results {
            writeln!(w, "{},{},{},{}", r.task, r.auc, r.n_pos, r.n_neg)?;
        }
        Ok(results)
    }

    /// Full ablation table: all components plus each leave-one-out mask,
    /// averaged over the probe seeds.
    pub fn ablate(&self) -> Result<Vec<AblationRow>> {
        let (seq, twhin, dcn_emb, features) = self.load_components()?;
        let parts =
            ProfileComponents { seq: &seq, twhin: &twhin, dcn: &dcn_emb, features: &features };
        let targets = self.probe_targets(&seq.user_ids)?;
        let seeds: Vec<u64> =
            (0..self.cfg.probe.n_seeds as u64).map(|i| self.cfg.run.seed + i).collect();
        let rows = run_ablation(&parts, &targets, &self.cfg.probe_config(), &seeds)?;
        let f = File::create(self.path(artifacts::ABLATION))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "mask,task,mean_auc,std_auc,n_seeds")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{}", r.mask, r.task, r.mean_auc, r.std_auc, r.n_seeds)?;
        }
        Ok(rows)
    }

    /// The full protocol from an existing event log: split → features →
    /// train-seq → train-twhin → train-dcn → assemble → eval → ablate.
    pub fn all(&self) -> Result<()> {
        self.split()?;
        self.features()?;
        self.train_seq()?;
        self.train_twhin()?;
        self.train_dcn()?;
        self.assemble()?;
        self.eval()?;
        self.ablate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
