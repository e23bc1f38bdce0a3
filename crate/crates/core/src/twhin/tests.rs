use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::event::Event;
use crate::nn::gradcheck::{check_gradient, GRAD_TOL};

fn item_event(user: u64, ts: i64, et: EventType, sku: u64) -> Event {
    Event {
        user_id: user,
        event_type: et,
        ts,
        sku: Some(sku),
        category: Some(sku % 3),
        price_bucket: Some((sku % 100) as u8),
        url_id: None,
        text_embedding: Some([(sku % 256) as u8; 16]),
    }
}

fn page_event(user: u64, ts: i64, url: u64) -> Event {
    Event {
        user_id: user,
        event_type: EventType::PageVisit,
        ts,
        sku: None,
        category: None,
        price_bucket: None,
        url_id: Some(url),
        text_embedding: None,
    }
}

fn tiny_cfg() -> TwhinConfig {
    TwhinConfig {
        dim: 8,
        dropout: 0.3,
        item_mode: ItemEncoderMode::IdTable { top_k: 16 },
        max_users: usize::MAX,
        batch_size: 8,
        steps: 5,
        lr: 1e-3,
        clip_norm: 1.0,
    }
}

fn hash() -> TwoHash {
    TwoHash::new(1, 2, 512)
}

#[test]
fn build_graph_one_edge_per_add_or_buy() {
    let mut histories = BTreeMap::new();
    histories.insert(
        1,
        UserHistory {
            user_id: 1,
            events: vec![
                item_event(1, 0, EventType::Purchase, 10),
                item_event(1, 1, EventType::Purchase, 11),
                item_event(1, 2, EventType::AddToCart, 12),
                item_event(1, 3, EventType::RemoveFromCart, 12),
            ],
        },
    );
    let set = build_graph(&histories);
    assert_eq!(set.edges.len(), 3);
    assert_eq!(set.edges.iter().filter(|e| e.kind == EdgeKind::Purchase).count(), 2);
}

#[test]
fn build_graph_page_only_user_has_no_edges() {
    let mut histories = BTreeMap::new();
    histories.insert(
        7,
        UserHistory { user_id: 7, events: vec![page_event(7, 0, 1), page_event(7, 1, 2)] },
    );
    assert!(build_graph(&histories).edges.is_empty());
}

#[test]
fn build_graph_matches_event_filter_oracle() {
    let cfg = crate::event::SynthConfig {
        n_users: 20,
        n_skus: 30,
        n_categories: 6,
        n_urls: 10,
        ..Default::default()
    };
    let (events, _) = crate::event::generate_synthetic(&cfg, 3).unwrap();
    let histories = crate::event::build_user_histories(&events);
    let set = build_graph(&histories);
    let expected = events
        .iter()
        .filter(|e| {
            matches!(e.event_type, EventType::Purchase | EventType::AddToCart) && e.sku.is_some()
        })
        .count();
    assert_eq!(set.edges.len(), expected);
}

#[test]
fn score_aligned_and_opposed_vectors() {
    let item = vec![0.3, -0.4, 0.5];
    let edge = vec![0.1, 0.1, -0.2];
    let sum: Vec<f64> = item.iter().zip(&edge).map(|(a, b)| a + b).collect();
    assert!((twhin_score(&sum, &item, &edge) - 1.0).abs() < 1e-12);
    let opposite: Vec<f64> = sum.iter().map(|v| -v).collect();
    assert!((twhin_score(&opposite, &item, &edge) + 1.0).abs() < 1e-12);
}

#[test]
fn score_matches_hand_computed_cosine() {
    let user = vec![1.0, 2.0, -1.0];
    let item = vec![0.5, 0.0, 0.25];
    let edge = vec![-0.5, 1.0, 0.25];
    // cosine of (1,2,-1) and (0,1,0.5)
    let expect = 1.5 / ((6.0f64).sqrt() * (1.25f64).sqrt());
    assert!((twhin_score(&user, &item, &edge) - expect).abs() < 1e-12);
}

#[test]
fn score_is_scale_invariant_in_the_user_embedding() {
    let user = vec![0.2, -0.7, 1.1, 0.4];
    let item = vec![1.0, 0.3, -0.2, 0.8];
    let edge = vec![0.0, 0.1, 0.2, -0.1];
    let base = twhin_score(&user, &item, &edge);
    // power-of-two rescaling is exactly invariant in IEEE arithmetic
    let scaled: Vec<f64> = user.iter().map(|v| v * 4.0).collect();
    assert_eq!(twhin_score(&scaled, &item, &edge), base);
    let scaled3: Vec<f64> = user.iter().map(|v| v * 3.0).collect();
    assert!((twhin_score(&scaled3, &item, &edge) - base).abs() < 1e-12);
}

#[test]
fn loss_two_zero_logits_is_2ln2() {
    let logits = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    let got = twhin_loss(&logits).unwrap();
    assert!((got - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn loss_saturated_logits_vanish() {
    let logits = vec![vec![30.0, -30.0], vec![-30.0, 30.0]];
    assert!(twhin_loss(&logits).unwrap() < 1e-9);
}

#[test]
fn loss_random_matrix_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<Vec<f64>> =
        (0..3).map(|_| (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()).collect();
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut expect = 0.0;
    for i in 0..3 {
        expect -= sigmoid(logits[i][i]).ln();
        for j in 0..3 {
            if j != i {
                expect -= (1.0 - sigmoid(logits[i][j])).ln();
            }
        }
    }
    expect /= 3.0;
    assert!((twhin_loss(&logits).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn loss_rejects_batch_of_one() {
    assert!(twhin_loss(&[vec![0.0]]).is_err());
}

fn toy_histories() -> BTreeMap<u64, UserHistory> {
    let mut histories = BTreeMap::new();
    for u in 0..6u64 {
        let events = (0..6)
            .map(|i| {
                let sku = (u % 2) * 8 + i % 4; // two item blocks
                let et = if i % 2 == 0 { EventType::Purchase } else { EventType::AddToCart };
                item_event(u, i as i64 * 100, et, sku)
            })
            .collect();
        histories.insert(u, UserHistory { user_id: u, events });
    }
    histories
}

#[test]
fn graph_batch_loss_matches_plain_loss_without_dropout() {
    let histories = toy_histories();
    let edges = build_graph(&histories);
    let catalog = ItemCatalog::from_histories(&histories);
    let cfg = tiny_cfg();
    let users = select_users(&histories, cfg.max_users);
    let mut store: crate::nn::ParamStore<f64> = crate::nn::ParamStore::new(9);
    let model = TwhinModel::register(&mut store, &cfg, &users, &edges, &catalog, None).unwrap();

    let batch: Vec<Edge> = edges.edges[..4].to_vec();
    let g = Graph::new();
    let loss = model.batch_loss(&g, &store, &batch, &hash(), None).unwrap();

    // oracle: build the logit matrix from plain scoring and evaluate the
    // plain loss
    let mut logits = vec![vec![0.0f64; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let e = Edge { user: batch[i].user, item: batch[j].item, kind: batch[i].kind };
            logits[i][j] = model.score_edge::<f64>(&store, &e, &hash()).unwrap();
        }
    }
    let expect = twhin_loss(&logits).unwrap();
    assert!(
        (loss.scalar() - expect).abs() < 1e-10,
        "graph {} vs plain {expect}",
        loss.scalar()
    );
}

#[test]
fn graph_batch_loss_gradient_matches_finite_differences() {
    let histories = toy_histories();
    let edges = build_graph(&histories);
    let catalog = ItemCatalog::from_histories(&histories);
    let mut cfg = tiny_cfg();
    cfg.dropout = 0.0;
    let users = select_users(&histories, cfg.max_users);
    let mut store: crate::nn::ParamStore<f64> = crate::nn::ParamStore::new(10);
    let model = TwhinModel::register(&mut store, &cfg, &users, &edges, &catalog, None).unwrap();
    let batch: Vec<Edge> = edges.edges[..5].to_vec();

    let flat: Vec<f64> = store.params.iter().flat_map(|p| p.data.clone()).collect();
    let f = |x: &[f64]| -> f64 {
        let mut s = store.clone();
        let mut off = 0;
        for p in &mut s.params {
            let n = p.len();
            p.data.copy_from_slice(&x[off..off + n]);
            off += n;
        }
        let g = Graph::new();
        model.batch_loss(&g, &s, &batch, &hash(), None).unwrap().scalar()
    };
    let g = Graph::new();
    let loss = model.batch_loss(&g, &store, &batch, &hash(), None).unwrap();
    let grads = crate::nn::backward(&loss).unwrap();
    let mut analytic = vec![0.0; flat.len()];
    let mut off = 0;
    for (pid, p) in store.params.iter().enumerate() {
        if let Some(gd) = grads.dense.get(&pid) {
            analytic[off..off + p.len()].copy_from_slice(gd);
        }
        if let Some(rows) = grads.sparse.get(&pid) {
            for (&r, row) in rows {
                analytic[off + r * p.cols..off + (r + 1) * p.cols].copy_from_slice(row);
            }
        }
        off += p.len();
    }
    let worst = check_gradient(&f, &flat, &analytic, 10, 6);
    assert!(worst < GRAD_TOL, "twhin gradient: {worst}");
}

#[test]
fn zero_steps_keeps_initialized_embeddings() {
    let histories = toy_histories();
    let edges = build_graph(&histories);
    let catalog = ItemCatalog::from_histories(&histories);
    let mut cfg = tiny_cfg();
    cfg.steps = 0;
    let (model, store, _) =
        train_twhin::<f32>(&edges, &histories, &cfg, &catalog, None, &hash(), 21, 22).unwrap();
    let exported = model.export_users(&store);
    let mut fresh: crate::nn::ParamStore<f32> = crate::nn::ParamStore::new(21);
    let users = select_users(&histories, cfg.max_users);
    let fresh_model =
        TwhinModel::register(&mut fresh, &cfg, &users, &edges, &catalog, None).unwrap();
    assert_eq!(exported, fresh_model.export_users(&fresh));
}

#[test]
fn training_is_seed_deterministic() {
    let histories = toy_histories();
    let edges = build_graph(&histories);
    let catalog = ItemCatalog::from_histories(&histories);
    let cfg = tiny_cfg();
    let run = || {
        let (model, store, metrics) =
            train_twhin::<f32>(&edges, &histories, &cfg, &catalog, None, &hash(), 4, 5).unwrap();
        (model.export_users(&store), metrics.last().unwrap().loss)
    };
    let (e1, l1) = run();
    let (e2, l2) = run();
    assert_eq!(e1, e2);
    assert_eq!(l1, l2);
}

#[test]
fn training_rejects_empty_edges() {
    let histories = toy_histories();
    let catalog = ItemCatalog::from_histories(&histories);
    let cfg = tiny_cfg();
    let empty = EdgeSet::default();
    assert!(
        train_twhin::<f32>(&empty, &histories, &cfg, &catalog, None, &hash(), 1, 2).is_err()
    );
}

#[test]
fn pretrained_item_encoder_mode_trains() {
    let histories = toy_histories();
    let edges = build_graph(&histories);
    let catalog = ItemCatalog::from_histories(&histories);
    let seq_cfg = crate::seq::SeqModelConfig {
        max_len: 8,
        hidden_dim: 16,
        num_layers: 1,
        embedding_dim: 8,
        dropout: 0.0,
        attn_dropout: 0.0,
        n_inbatch_neg: 4,
        n_uniform_neg: 4,
        muve_vocab: 512,
        hash_seed1: 1,
        hash_seed2: 2,
    };
    let mut cfg = tiny_cfg();
    cfg.item_mode = ItemEncoderMode::Pretrained;
    cfg.steps = 3;
    let (model, store, metrics) = train_twhin::<f32>(
        &edges,
        &histories,
        &cfg,
        &catalog,
        Some(&seq_cfg),
        &hash(),
        31,
        32,
    )
    .unwrap();
    assert!(metrics.iter().all(|m| m.loss.is_finite()));
    assert_eq!(model.export_users(&store).len(), 6);
}

#[test]
fn row_dropout_never_zeroes_a_full_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mask = super::row_dropout_mask::<f64>(200, 2, 0.9, &mut rng);
    for row in mask.chunks(2) {
        assert!(row.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn select_users_caps_by_activity() {
    let histories = toy_histories(); // 6 users, equal activity
    let all = select_users(&histories, 100);
    assert_eq!(all.len(), 6);
    let top = select_users(&histories, 3);
    assert_eq!(top.len(), 3);
    assert_eq!(top, vec![0, 1, 2]); // ties break by id
}
