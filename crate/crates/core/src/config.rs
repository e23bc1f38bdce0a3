//! Run configuration: one TOML file with a section per stage. Scale-bearing
//! hyperparameters appear twice (desk and paper values side by side); the
//! `scale` field or the CLI preset flag picks which column is active.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dcn::{ChurnRule, DcnConfig};
use crate::encoders::MUVE_VOCAB;
use crate::error::{Error, Result};
use crate::event::{ArchetypeMix, SynthConfig};
use crate::profile::ProbeConfig;
use crate::seq::{SeqModelConfig, SeqTrainConfig};
use crate::twhin::{ItemEncoderMode, TwhinConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Desk and paper values of one hyperparameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaled<T> {
    pub desk: T,
    pub paper: T,
}

impl<T> Scaled<T> {
    pub fn active(&self, scale: Scale) -> &T {
        match scale {
            Scale::Desk => &self.desk,
            Scale::Paper => &self.paper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub out_dir: String,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    pub n_users: u64,
    pub n_skus: u64,
    pub n_categories: u64,
    pub n_urls: u64,
    pub horizon_days: i64,
    pub rate_scale: f64,
    pub mix_loyal: f64,
    pub mix_churner: f64,
    pub mix_bargain: f64,
    pub mix_premium: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    /// Reserved evaluation window at the end of the log.
    pub target_days: i64,
    /// Inner label window (end of the input period) for DCN training.
    pub dcn_target_days: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSection {
    /// `user_last` anchors day windows at each user's last input event;
    /// `train_end` anchors them globally.
    pub anchor: String,
    pub kmeans_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqScale {
    pub max_len: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub embedding_dim: usize,
    pub n_inbatch_neg: usize,
    pub n_uniform_neg: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqSection {
    pub dropout: f64,
    pub attn_dropout: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub clip_norm: f64,
    pub hash_seed1: u64,
    pub hash_seed2: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwhinScale {
    pub dim: usize,
    pub top_k_items: usize,
    pub max_users: usize,
    pub batch_size: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwhinSection {
    pub dropout: f64,
    pub lr: f64,
    pub clip_norm: f64,
    /// `id_table` or `pretrained`.
    pub item_encoder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcnScale {
    pub out_dim: usize,
    pub seq_proj_hidden: usize,
    pub seq_proj_out: usize,
    pub sku_k: usize,
    pub cat_k: usize,
    pub contrastive_negatives: usize,
    pub steps: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcnSection {
    pub cross_rank0: usize,
    pub cross_rank1: usize,
    pub cross_rank2: usize,
    pub densenet_hidden: usize,
    pub mask_rate: f64,
    pub contrastive_enabled: bool,
    pub lr_ple: f64,
    pub lr_cross: f64,
    pub lr_other: f64,
    pub clip_norm: f64,
    /// `no_purchase` or `no_events`.
    pub churn_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    pub epochs: u64,
    pub lr: f64,
    pub train_fraction: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scale: Scale,
    pub run: RunSection,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub features: FeatureSection,
    pub seq: SeqSection,
    pub seq_scale: Scaled<SeqScale>,
    pub twhin: TwhinSection,
    pub twhin_scale: Scaled<TwhinScale>,
    pub dcn: DcnSection,
    pub dcn_scale: Scaled<DcnScale>,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scale: Scale::Desk,
            run: RunSection { out_dir: "out".into(), seed: 1, threads: 0 },
            synth: SynthSection {
                n_users: 2000,
                n_skus: 400,
                n_categories: 20,
                n_urls: 200,
                horizon_days: 112,
                rate_scale: 1.0,
                mix_loyal: 0.3,
                mix_churner: 0.3,
                mix_bargain: 0.2,
                mix_premium: 0.2,
            },
            split: SplitSection { target_days: 28, dcn_target_days: 14 },
            features: FeatureSection { anchor: "user_last".into(), kmeans_seed: 7 },
            seq: SeqSection {
                dropout: 0.1,
                attn_dropout: 0.1,
                lr_start: 1e-5,
                lr_peak: 1e-4,
                clip_norm: 1.0,
                hash_seed1: 0x5eed_0001,
                hash_seed2: 0x5eed_0002,
            },
            seq_scale: Scaled {
                desk: SeqScale {
                    max_len: 32,
                    hidden_dim: 64,
                    num_layers: 2,
                    embedding_dim: 32,
                    n_inbatch_neg: 128,
                    n_uniform_neg: 128,
                    steps: 500,
                    batch_size: 64,
                    warmup_steps: 150,
                },
                paper: SeqScale {
                    max_len: 256,
                    hidden_dim: 1024,
                    num_layers: 20,
                    embedding_dim: 256,
                    n_inbatch_neg: 8192,
                    n_uniform_neg: 8192,
                    steps: 10_000,
                    batch_size: 8192,
                    warmup_steps: 3000,
                },
            },
            twhin: TwhinSection {
                dropout: 0.3,
                lr: 1e-3,
                clip_norm: 1.0,
                item_encoder: "id_table".into(),
            },
            twhin_scale: Scaled {
                desk: TwhinScale {
                    dim: 32,
                    top_k_items: 500,
                    max_users: 1_000_000,
                    batch_size: 256,
                    steps: 500,
                },
                paper: TwhinScale {
                    dim: 256,
                    top_k_items: 1_000_000,
                    max_users: 1_500_000,
                    batch_size: 4096,
                    steps: 10_000,
                },
            },
            dcn: DcnSection {
                cross_rank0: 64,
                cross_rank1: 32,
                cross_rank2: 32,
                densenet_hidden: 64,
                mask_rate: 0.3,
                contrastive_enabled: true,
                lr_ple: 2e-4,
                lr_cross: 5e-4,
                lr_other: 1e-3,
                clip_norm: 1.0,
                churn_rule: "no_purchase".into(),
            },
            dcn_scale: Scaled {
                desk: DcnScale {
                    out_dim: 32,
                    seq_proj_hidden: 32,
                    seq_proj_out: 16,
                    sku_k: 20,
                    cat_k: 10,
                    contrastive_negatives: 64,
                    steps: 1000,
                    batch_size: 128,
                },
                paper: DcnScale {
                    out_dim: 128,
                    seq_proj_hidden: 128,
                    seq_proj_out: 64,
                    sku_k: 100,
                    cat_k: 100,
                    contrastive_negatives: 8192,
                    steps: 25_000,
                    batch_size: 16_384,
                },
            },
            probe: ProbeSection { epochs: 200, lr: 1e-2, train_fraction: 0.8, n_seeds: 5 },
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config {
            field: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the resolved configuration; embedded in artifacts so
    /// outputs of different configs cannot be mixed. The output directory
    /// and thread cap do not affect any computed value, so they are
    /// excluded — the same config in two directories yields identical
    /// artifacts.
    pub fn hash(&self) -> u64 {
        let mut canonical = self.clone();
        canonical.run.out_dir = String::new();
        canonical.run.threads = 0;
        fnv1a(canonical.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, msg: &str| -> Result<()> {
            Err(Error::Config { field: f.to_string(), msg: msg.to_string() })
        };
        if self.split.target_days <= 0 {
            return field("split.target_days", "must be positive");
        }
        if self.split.dcn_target_days <= 0 {
            return field("split.dcn_target_days", "must be positive");
        }
        if self.synth.horizon_days <= self.split.target_days + self.split.dcn_target_days {
            return field("synth.horizon_days", "must exceed target_days + dcn_target_days");
        }
        if !matches!(self.features.anchor.as_str(), "user_last" | "train_end") {
            return field("features.anchor", "must be `user_last` or `train_end`");
        }
        if !matches!(self.twhin.item_encoder.as_str(), "id_table" | "pretrained") {
            return field("twhin.item_encoder", "must be `id_table` or `pretrained`");
        }
        if !matches!(self.dcn.churn_rule.as_str(), "no_purchase" | "no_events") {
            return field("dcn.churn_rule", "must be `no_purchase` or `no_events`");
        }
        if !(0.0..1.0).contains(&self.dcn.mask_rate) {
            return field("dcn.mask_rate", "must be in [0,1)");
        }
        if self.probe.n_seeds == 0 {
            return field("probe.n_seeds", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.probe.train_fraction) || self.probe.train_fraction <= 0.0 {
            return field("probe.train_fraction", "must be in (0,1)");
        }
        self.seq_model_config().validate()?;
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_users: self.synth.n_users,
            n_skus: self.synth.n_skus,
            n_categories: self.synth.n_categories,
            n_urls: self.synth.n_urls,
            horizon_days: self.synth.horizon_days,
            target_days: self.split.target_days,
            decay_days: 28,
            mix: ArchetypeMix {
                loyal: self.synth.mix_loyal,
                churner: self.synth.mix_churner,
                bargain: self.synth.mix_bargain,
                premium: self.synth.mix_premium,
            },
            rate_scale: self.synth.rate_scale,
            start_ts: SynthConfig::default().start_ts,
        }
    }

    pub fn seq_model_config(&self) -> SeqModelConfig {
        let s = self.seq_scale.active(self.scale);
        SeqModelConfig {
            max_len: s.max_len,
            hidden_dim: s.hidden_dim,
            num_layers: s.num_layers,
            embedding_dim: s.embedding_dim,
            dropout: self.seq.dropout,
            attn_dropout: self.seq.attn_dropout,
            n_inbatch_neg: s.n_inbatch_neg,
            n_uniform_neg: s.n_uniform_neg,
            muve_vocab: MUVE_VOCAB,
            hash_seed1: self.seq.hash_seed1,
            hash_seed2: self.seq.hash_seed2,
        }
    }

    pub fn seq_train_config(&self) -> SeqTrainConfig {
        let s = self.seq_scale.active(self.scale);
        SeqTrainConfig {
            steps: s.steps,
            batch_size: s.batch_size,
            lr_start: self.seq.lr_start,
            lr_peak: self.seq.lr_peak,
            warmup_steps: s.warmup_steps,
            clip_norm: self.seq.clip_norm,
            seed: self.run.seed,
        }
    }

    pub fn twhin_config(&self) -> TwhinConfig {
        let s = self.twhin_scale.active(self.scale);
        TwhinConfig {
            dim: s.dim,
            dropout: self.twhin.dropout,
            item_mode: match self.twhin.item_encoder.as_str() {
                "pretrained" => ItemEncoderMode::Pretrained,
                _ => ItemEncoderMode::IdTable { top_k: s.top_k_items },
            },
            max_users: s.max_users,
            batch_size: s.batch_size,
            steps: s.steps,
            lr: self.twhin.lr,
            clip_norm: self.twhin.clip_norm,
        }
    }

    pub fn dcn_config(&self) -> DcnConfig {
        let s = self.dcn_scale.active(self.scale);
        DcnConfig {
            cross_ranks: [self.dcn.cross_rank0, self.dcn.cross_rank1, self.dcn.cross_rank2],
            densenet_hidden: self.dcn.densenet_hidden,
            out_dim: s.out_dim,
            seq_proj_hidden: s.seq_proj_hidden,
            seq_proj_out: s.seq_proj_out,
            sku_k: s.sku_k,
            cat_k: s.cat_k,
            churn_rule: match self.dcn.churn_rule.as_str() {
                "no_events" => ChurnRule::NoEvents,
                _ => ChurnRule::NoPurchase,
            },
            mask_rate: self.dcn.mask_rate,
            contrastive_enabled: self.dcn.contrastive_enabled,
            contrastive_negatives: s.contrastive_negatives,
            steps: s.steps,
            batch_size: s.batch_size,
            lr_ple: self.dcn.lr_ple,
            lr_cross: self.dcn.lr_cross,
            lr_other: self.dcn.lr_other,
            clip_norm: self.dcn.clip_norm,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe.epochs,
            lr: self.probe.lr,
            train_fraction: self.probe.train_fraction,
        }
    }
}
