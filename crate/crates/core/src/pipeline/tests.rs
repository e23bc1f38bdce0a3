use super::*;
use crate::config::RunConfig;

/// A configuration small enough for unit tests (seconds, not minutes).
fn mini_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.out_dir = dir.display().to_string();
    cfg.run.seed = 3;
    cfg.synth.n_users = 50;
    cfg.synth.n_skus = 60;
    cfg.synth.n_categories = 12;
    cfg.synth.n_urls = 40;
    cfg.synth.horizon_days = 70;
    cfg.seq_scale.desk.steps = 8;
    cfg.seq_scale.desk.batch_size = 8;
    cfg.seq_scale.desk.max_len = 16;
    cfg.seq_scale.desk.hidden_dim = 32;
    cfg.seq_scale.desk.embedding_dim = 16;
    cfg.seq_scale.desk.num_layers = 1;
    cfg.seq_scale.desk.n_inbatch_neg = 8;
    cfg.seq_scale.desk.n_uniform_neg = 8;
    cfg.twhin_scale.desk.steps = 8;
    cfg.twhin_scale.desk.batch_size = 16;
    cfg.twhin_scale.desk.dim = 8;
    cfg.twhin_scale.desk.top_k_items = 30;
    cfg.dcn_scale.desk.steps = 8;
    cfg.dcn_scale.desk.batch_size = 16;
    cfg.dcn_scale.desk.out_dim = 8;
    cfg.dcn_scale.desk.seq_proj_hidden = 8;
    cfg.dcn_scale.desk.seq_proj_out = 4;
    cfg.dcn_scale.desk.sku_k = 6;
    cfg.dcn_scale.desk.cat_k = 4;
    cfg.dcn_scale.desk.contrastive_negatives = 8;
    cfg.probe.epochs = 30;
    cfg.probe.n_seeds = 2;
    cfg
}

#[test]
fn full_pipeline_smoke_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(mini_config(dir.path())).unwrap();
    pipe.gen_synth().unwrap();
    pipe.all().unwrap();
    for name in [
        artifacts::EVENTS,
        artifacts::SPLIT,
        artifacts::FEATURES,
        artifacts::FEATURES_INNER,
        artifacts::CORPUS_STATS,
        artifacts::SEQ_EMB,
        artifacts::SEQ_FULL_CKPT,
        artifacts::SEQ_SAFE_CKPT,
        artifacts::DCN_TRAIN_EMB,
        artifacts::DCN_INFER_EMB,
        artifacts::AUG0_EMB,
        artifacts::AUG1_EMB,
        artifacts::TWHIN_EMB,
        artifacts::TWHIN_GRAPH,
        artifacts::DCN_EMB,
        artifacts::DCN_METRICS,
        artifacts::PLE_BINS,
        artifacts::PROFILE,
        artifacts::PROBE_RESULTS,
        artifacts::ABLATION,
    ] {
        assert!(pipe.path(name).exists(), "missing artifact {name}");
    }

    // ablation table covers 5 masks x 3 tasks
    let text = std::fs::read_to_string(pipe.path(artifacts::ABLATION)).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 15, "{text}");

    // profile dims add up: seq + twhin + dcn + features
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pipe.path(artifacts::PROFILE_META)).unwrap())
            .unwrap();
    let dims: Vec<usize> = meta["dims"].as_array().unwrap().iter().map(|d| d[1].as_u64().unwrap() as usize).collect();
    assert_eq!(dims, vec![16, 8, 8, 346]);
}

#[test]
fn eval_without_upstream_names_train_seq() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(mini_config(dir.path())).unwrap();
    pipe.gen_synth().unwrap();
    pipe.split().unwrap();
    pipe.features().unwrap();
    let err = pipe.eval().unwrap_err();
    match err {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "train-seq"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn split_requires_events() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(mini_config(dir.path())).unwrap();
    let err = pipe.split().unwrap_err();
    match err {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "gen-synth"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn config_hash_mismatch_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(mini_config(dir.path())).unwrap();
    pipe.gen_synth().unwrap();
    let mut other_cfg = mini_config(dir.path());
    other_cfg.run.seed = 99;
    let other = Pipeline::new(other_cfg).unwrap();
    let err = other.split().unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }), "{err}");
}

#[test]
fn features_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(mini_config(dir.path())).unwrap();
    pipe.gen_synth().unwrap();
    let info = pipe.split().unwrap();
    pipe.features().unwrap();
    let m = pipe.read_features_csv(artifacts::FEATURES, info.train_end).unwrap();
    assert_eq!(m.dim(), crate::features::N_TOTAL);
    assert!(!m.user_ids.is_empty());
    assert!(m.data.iter().all(|v| v.is_finite()));
    // header carries the canonical names
    assert_eq!(m.names, crate::features::feature_names());
}

#[test]
fn ingest_reports_bad_lines_and_writes_canonical_file() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(mini_config(dir.path())).unwrap();
    let raw = dir.path().join("raw.jsonl");
    std::fs::write(
        &raw,
        concat!(
            r#"{"user_id":1,"event_type":"purchase","ts":10,"sku":1,"category":1,"price_bucket":5}"#,
            "\n",
            r#"{"user_id":1,"event_type":"page_visit","ts":11}"#,
            "\n",
        ),
    )
    .unwrap();
    let (ok, bad) = pipe.ingest(&raw, EventFormat::Jsonl).unwrap();
    assert_eq!((ok, bad), (1, 1));
    let events = pipe.load_events(artifacts::EVENTS, "gen-synth").unwrap();
    assert_eq!(events.len(), 1);
}
