use std::rc::Rc;

use super::params::{self, RightNames};
use super::*;
use crate::numerics::{finite_diff_grad, ParamStore, SeqLayout, Tensor};
use crate::querydata::{build_vocab, QueryRecord};
use crate::taggraph::TagGraph;

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

fn rec(src: &str, tags: &str, labels: &[u8]) -> QueryRecord {
    QueryRecord::from_labels(words(src), words(tags), labels.to_vec()).unwrap()
}

fn corpus() -> Vec<QueryRecord> {
    vec![
        rec(
            "2010 subaru sti catless downpipe",
            "year make model feature type",
            &[2, 2, 2, 3, 2],
        ),
        rec("nike air max shoes", "brand model size type", &[2, 3, 2, 2]),
        rec("used iphone case", "condition model type", &[3, 2, 2]),
    ]
}

fn graph() -> TagGraph {
    TagGraph::from_edges(
        1,
        [
            ("feature".to_string(), "model".to_string(), 3),
            ("feature".to_string(), "type".to_string(), 2),
        ],
    )
}

fn tiny(graph_mode: GraphMode, fusion: Fusion) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 12,
        tag_dim: 6,
        max_len: 10,
        graph: graph_mode,
        fusion,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn model(graph_mode: GraphMode, fusion: Fusion, seed: u64) -> Model<f64> {
    let vocab = build_vocab(&corpus()).unwrap();
    Model::new(tiny(graph_mode, fusion), vocab, Some(graph()), seed).unwrap()
}

fn store_with(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone());
    }
    s
}

fn mat(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn right_params(d: usize, w: [Tensor<f64>; 4]) -> Vec<(&'static str, Tensor<f64>)> {
    let [w1, w2, w3, w4] = w;
    vec![
        ("W1", w1),
        ("W2", w2),
        ("W3", w3),
        ("W4", w4),
        ("gamma", Tensor::from_vec(vec![1.0]).unwrap()),
        ("beta", Tensor::from_vec(vec![0.0]).unwrap()),
        ("W5", Tensor::zeros(&[d, d])),
        ("b", Tensor::zeros(&[d])),
        ("gamma2", Tensor::from_vec(vec![1.0]).unwrap()),
        ("beta2", Tensor::from_vec(vec![0.0]).unwrap()),
    ]
}

#[test]
fn zero_embedding_tables_give_zero_inputs() {
    let store = store_with(&[
        (params::TOKEN_EMB, Tensor::zeros(&[5, 4])),
        (params::TYPE_EMB, Tensor::zeros(&[2, 4])),
        (params::POS_EMB, Tensor::zeros(&[6, 4])),
    ]);
    let mut tape = GradientTape::new(&store);
    let v = embed_inputs(&mut tape, &[1, 4, 2], &[0, 0, 0], &[0, 1, 2]).unwrap();
    assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    assert!(matches!(
        embed_inputs(&mut tape, &[9], &[0], &[0]),
        Err(ModelError::IdOutOfRange { .. })
    ));
}

#[test]
fn singleton_neighborhood_passes_own_value() {
    let w3 = mat(&[&[1.0, 2.0], &[0.5, -1.0]]);
    let w4 = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
    let p = right_params(
        2,
        [
            mat(&[&[1.0, 0.0], &[0.0, 1.0]]),
            mat(&[&[3.0, 1.0], &[1.0, 2.0]]),
            w3,
            w4,
        ],
    );
    let store = store_with(&p);
    let mut tape = GradientTape::new(&store);
    let v = tape.constant(mat(&[&[0.7, -0.2]]));
    let w = tape.constant(Tensor::from_vec(vec![1.0]).unwrap());
    let layout = Rc::new(SeqLayout::single(1));
    let (_, o) = graph_masked_attention(&mut tape, v, Some(w), &layout, &RightNames::new(0), 1).unwrap();
    // v W3 = [0.6, 1.6]; (v W3) W4 = [1.6, 0.6]
    let got = tape.value(o).data();
    assert!((got[0] - 1.6).abs() < 1e-12 && (got[1] - 0.6).abs() < 1e-12);
}

#[test]
fn identical_keys_attend_uniformly() {
    let eye = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let p = right_params(2, [eye.clone(), Tensor::zeros(&[2, 2]), eye.clone(), eye]);
    let store = store_with(&p);
    let mut tape = GradientTape::new(&store);
    let v = tape.constant(mat(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]));
    let w = tape.constant(Tensor::filled(&[9], 1.0));
    let layout = Rc::new(SeqLayout::single(3));
    let (att, o) = graph_masked_attention(&mut tape, v, Some(w), &layout, &RightNames::new(0), 1).unwrap();
    let (_, _, alpha) = tape.attention_blocks(att).unwrap();
    assert!(alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    for r in 0..3 {
        assert!((tape.value(o).get(r, 0) - 1.5).abs() < 1e-12);
        assert!((tape.value(o).get(r, 1) - 0.5).abs() < 1e-12);
    }
}

#[test]
fn three_token_path_matches_scalar_arithmetic() {
    let w1 = mat(&[&[0.5, -0.3], &[0.2, 0.8]]);
    let w2 = mat(&[&[0.1, 0.4], &[-0.6, 0.3]]);
    let w3 = mat(&[&[1.0, 0.5], &[-0.5, 2.0]]);
    let w4 = mat(&[&[0.3, 0.0], &[0.1, -1.0]]);
    let v = [[1.0, 0.0], [0.5, -1.0], [-0.2, 0.7]];
    let adj = [[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];

    let lin = |x: [f64; 2], w: &Tensor<f64>| {
        [
            x[0] * w.get(0, 0) + x[1] * w.get(1, 0),
            x[0] * w.get(0, 1) + x[1] * w.get(1, 1),
        ]
    };
    let mut expected = [[0.0; 2]; 3];
    for i in 0..3 {
        let q = lin(v[i], &w1);
        let mut num = [0.0; 2];
        let mut den = 0.0;
        for k in 0..3 {
            if adj[i][k] == 0.0 {
                continue;
            }
            let key = lin(v[k], &w2);
            let e = (q[0] * key[0] + q[1] * key[1]).exp();
            let val = lin(v[k], &w3);
            num[0] += e * val[0];
            num[1] += e * val[1];
            den += e;
        }
        expected[i] = lin([num[0] / den, num[1] / den], &w4);
    }

    let store = store_with(&right_params(2, [w1, w2, w3, w4]));
    let mut tape = GradientTape::new(&store);
    let vv = tape.constant(mat(&[&v[0], &v[1], &v[2]]));
    let w = tape.constant(Tensor::from_vec(adj.concat()).unwrap());
    let layout = Rc::new(SeqLayout::single(3));
    let (att, o) = graph_masked_attention(&mut tape, vv, Some(w), &layout, &RightNames::new(0), 1).unwrap();
    for i in 0..3 {
        for c in 0..2 {
            assert!((tape.value(o).get(i, c) - expected[i][c]).abs() < 1e-12);
        }
    }
    let (_, _, alpha) = tape.attention_blocks(att).unwrap();
    assert_eq!(alpha[2], 0.0);
    assert_eq!(alpha[6], 0.0);
}

#[test]
fn add_norm_edge_cases() {
    let u = mat(&[&[0.3, -1.2, 2.0], &[1.0, 0.0, -0.5]]);
    let layout = Rc::new(SeqLayout::single(2));
    let w = Tensor::filled(&[4], 1.0);
    let eye = mat(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);

    // o = 0 everywhere, so norm(o) = 0 and o_bar = u + beta.
    let mut p = right_params(3, [eye.clone(), eye.clone(), eye.clone(), Tensor::zeros(&[3, 3])]);
    p[5].1 = Tensor::from_vec(vec![0.25]).unwrap();
    let store = store_with(&p);
    let mut tape = GradientTape::new(&store);
    let uv = tape.constant(u.clone());
    let wv = tape.constant(w.clone());
    let nodes = right_tower_layer(&mut tape, uv, Some(wv), &layout, &RightNames::new(0), 1, 1e-5).unwrap();
    let expected = u.map(|x| x + 0.25);
    assert!(tape.value(nodes.o_bar).max_abs_diff(&expected) < 1e-15);

    // gamma = beta = 0 makes o_bar = u whatever o is.
    let mut p = right_params(3, [eye.clone(), eye.clone(), eye.clone(), eye]);
    p[4].1 = Tensor::from_vec(vec![0.0]).unwrap();
    let store = store_with(&p);
    let mut tape = GradientTape::new(&store);
    let uv = tape.constant(u.clone());
    let wv = tape.constant(w);
    let nodes = right_tower_layer(&mut tape, uv, Some(wv), &layout, &RightNames::new(0), 1, 1e-5).unwrap();
    assert_eq!(tape.value(nodes.o_bar), &u);
}

fn dynamic_store(tag_emb: Tensor<f64>, w7: Tensor<f64>, w8: Tensor<f64>) -> ParamStore<f64> {
    let t = tag_emb.cols();
    store_with(&[
        (params::TAG_EMB, tag_emb),
        (params::TAG_POS_EMB, Tensor::zeros(&[8, t])),
        (params::W7, w7),
        (params::W8, w8),
    ])
}

#[test]
fn dynamic_graph_single_tag_and_uniform() {
    let eye = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let store = dynamic_store(mat(&[&[0.4, 0.9], &[0.4, 0.9]]), eye.clone(), eye);
    let mut tape = GradientTape::new(&store);
    let one = Rc::new(SeqLayout::single(1));
    let d = dynamic_tag_graph(&mut tape, &[0], &[0], &one).unwrap();
    assert_eq!(tape.value(d.probs).data(), &[1.0]);

    let mut tape = GradientTape::new(&store);
    let four = Rc::new(SeqLayout::single(4));
    let d = dynamic_tag_graph(&mut tape, &[0, 1, 1, 0], &[0, 0, 0, 0], &four).unwrap();
    assert!(tape.value(d.probs).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn dynamic_graph_two_tags_scalar_oracle() {
    let store = dynamic_store(mat(&[&[1.0], &[-0.5]]), mat(&[&[2.0]]), mat(&[&[0.7]]));
    let mut tape = GradientTape::new(&store);
    let layout = Rc::new(SeqLayout::single(2));
    let d = dynamic_tag_graph(&mut tape, &[0, 1], &[0, 0], &layout).unwrap();
    let t = [1.0, -0.5];
    let mut expected = Vec::new();
    for i in 0..2 {
        let a: Vec<f64> = (0..2).map(|k| (t[i] * 2.0) * (t[k] * 0.7)).collect();
        let z: f64 = a.iter().map(|x| x.exp()).sum();
        expected.extend(a.iter().map(|x| x.exp() / z));
    }
    for (g, e) in tape.value(d.probs).data().iter().zip(&expected) {
        assert!((g - e).abs() < 1e-15);
    }
}

#[test]
fn fusion_modes() {
    let eb = mat(&[&[1.0, -2.0], &[0.5, 4.0]]);
    let et = mat(&[&[3.0, 0.0], &[-0.5, 2.0]]);
    let mean = mat(&[&[2.0, -1.0], &[0.0, 3.0]]);

    let store = store_with(&[(params::W6, Tensor::zeros(&[2, 2])), (params::C, Tensor::zeros(&[2]))]);
    let mut tape = GradientTape::new(&store);
    let (b, t) = (tape.constant(eb.clone()), tape.constant(et.clone()));
    let (e, gate) = fuse(&mut tape, b, t, Fusion::Gated, None).unwrap();
    assert!(tape.value(gate.unwrap()).data().iter().all(|&s| s == 0.5));
    assert!(tape.value(e).max_abs_diff(&mean) < 1e-15);

    let (e, _) = fuse(&mut tape, b, t, Fusion::Gated, Some(1.0)).unwrap();
    assert_eq!(tape.value(e), &eb);
    let (e, _) = fuse(&mut tape, b, t, Fusion::Mean, None).unwrap();
    assert_eq!(tape.value(e), &mean);
    let (e, _) = fuse(&mut tape, b, t, Fusion::Min, None).unwrap();
    assert_eq!(tape.value(e), &mat(&[&[1.0, -2.0], &[-0.5, 2.0]]));

    let short = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        fuse(&mut tape, b, short, Fusion::Mean, None),
        Err(ModelError::ShapeMismatch { .. })
    ));
}

#[test]
fn classifier_head() {
    let store = store_with(&[
        (params::HEAD_W, Tensor::zeros(&[2, 3])),
        (params::HEAD_B, Tensor::zeros(&[3])),
    ]);
    let mut tape = GradientTape::new(&store);
    let e = tape.constant(mat(&[&[1.0, 2.0], &[-3.0, 0.5]]));
    let logits = classify(&mut tape, e).unwrap();
    let p = softmax_rows(tape.value(logits));
    assert!(p.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

    let store = store_with(&[
        (params::HEAD_W, Tensor::zeros(&[2, 3])),
        (params::HEAD_B, Tensor::from_vec(vec![0.0, 5.0, 0.0]).unwrap()),
    ]);
    let mut tape = GradientTape::new(&store);
    let e = tape.constant(mat(&[&[1.0, 2.0]]));
    let logits = classify(&mut tape, e).unwrap();
    let p = softmax_rows(tape.value(logits));
    assert!(p.get(0, 1) > 0.98);
}

#[test]
fn rows_are_distributions() {
    for mode in [GraphMode::Static, GraphMode::Dynamic, GraphMode::None] {
        let m = model(mode, Fusion::Gated, 1);
        let encoded: Vec<EncodedQuery> = corpus().iter().map(|r| m.encode(r).unwrap()).collect();
        let batch = m.batch(&encoded.iter().collect::<Vec<_>>()).unwrap();
        let t = m.forward_batch(&batch, ForwardOptions::default()).unwrap();
        for r in 0..t.probs.rows() {
            assert!((t.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for right in &t.right {
            for q in 0..t.num_queries() {
                let a = t.alpha(0, 0, q).unwrap();
                for i in 0..a.rows() {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
            assert_eq!(right.heads, 1);
        }
        if let Some(g) = &t.gate {
            assert!(g.data().iter().all(|&s| s > 0.0 && s < 1.0));
        }
    }
}

#[test]
fn static_attention_is_zero_off_the_graph() {
    let m = model(GraphMode::Static, Fusion::Gated, 2);
    let r = &corpus()[0];
    let t = m.forward(r).unwrap();
    let adj = crate::taggraph::query_adjacency(
        &[
            &["[NONE]"][..],
            &r.tags.iter().map(String::as_str).collect::<Vec<_>>(),
            &["[NONE]"],
        ]
        .concat(),
        m.graph().unwrap(),
    );
    let a = t.alpha(0, 0, 0).unwrap();
    for i in 0..a.rows() {
        for k in 0..a.cols() {
            assert_eq!(a.get(i, k) == 0.0, !adj.get(i, k), "({i},{k})");
        }
    }
    // catless (feature) reaches sti (model) and downpipe (type)
    assert!(a.get(4, 3) > 0.0 && a.get(4, 5) > 0.0);
    assert_eq!(a.get(1, 4), 0.0);
}

#[test]
fn gate_forced_open_reproduces_left_tower_model() {
    let two = model(GraphMode::Static, Fusion::Gated, 5);
    let mut left = ParamStore::new();
    let none_cfg = ModelConfig {
        graph: GraphMode::None,
        ..two.config.clone()
    };
    for (name, _) in params::expected_shapes(&none_cfg, two.vocab.num_tokens(), two.vocab.num_tags()) {
        left.insert(name.clone(), two.params.get(&name).unwrap().clone());
    }
    let base = Model::from_params(none_cfg, two.vocab.clone(), None, left).unwrap();
    for r in corpus() {
        let q = two.encode(&r).unwrap();
        let forced = two
            .forward_batch(
                &two.batch(&[&q]).unwrap(),
                ForwardOptions {
                    gate_override: Some(1.0),
                    dropout_rng: None,
                },
            )
            .unwrap();
        let plain = base.forward(&r).unwrap();
        assert!(forced.probs.max_abs_diff(&plain.probs) < 1e-12);
    }
}

#[test]
fn batched_forward_matches_single_and_is_order_free() {
    for mode in [GraphMode::Static, GraphMode::Dynamic] {
        let m = model(mode, Fusion::Gated, 3);
        let records = corpus();
        let enc: Vec<EncodedQuery> = records.iter().map(|r| m.encode(r).unwrap()).collect();
        let fwd = m
            .forward_batch(
                &m.batch(&[&enc[0], &enc[1], &enc[2]]).unwrap(),
                ForwardOptions::default(),
            )
            .unwrap();
        let rev = m
            .forward_batch(
                &m.batch(&[&enc[2], &enc[1], &enc[0]]).unwrap(),
                ForwardOptions::default(),
            )
            .unwrap();
        for (q, r) in records.iter().enumerate() {
            let single = m.forward(r).unwrap();
            let a = fwd.query_rows(&fwd.probs, q);
            let b = rev.query_rows(&rev.probs, 2 - q);
            assert!(a.max_abs_diff(&single.probs) < 1e-12);
            assert!(b.max_abs_diff(&single.probs) < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let a = model(GraphMode::Dynamic, Fusion::Gated, 9);
    let b = model(GraphMode::Dynamic, Fusion::Gated, 9);
    let r = &corpus()[1];
    assert_eq!(a.forward(r).unwrap().logits, b.forward(r).unwrap().logits);
    let c = model(GraphMode::Dynamic, Fusion::Gated, 10);
    assert_ne!(a.forward(r).unwrap().logits, c.forward(r).unwrap().logits);
}

#[test]
fn uniform_logits_cost_log_three() {
    let mut m = model(GraphMode::Static, Fusion::Gated, 0);
    for x in m.params.get_mut(params::HEAD_W).unwrap().data_mut() {
        *x = 0.0;
    }
    let enc: Vec<EncodedQuery> = corpus().iter().map(|r| m.encode(r).unwrap()).collect();
    let batch = m.batch(&enc.iter().collect::<Vec<_>>()).unwrap();
    assert!((m.loss(&batch).unwrap() - 3f64.ln()).abs() < 1e-12);
    let trace = m.forward_batch(&batch, ForwardOptions::default()).unwrap();
    let labels: Vec<Vec<u8>> = enc.iter().map(|q| q.labels.clone()).collect();
    assert!((loss_from_trace(&trace, &labels).unwrap() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_matches_trace_loss() {
    let m = model(GraphMode::Dynamic, Fusion::Mean, 4);
    let enc: Vec<EncodedQuery> = corpus().iter().map(|r| m.encode(r).unwrap()).collect();
    let batch = m.batch(&enc.iter().collect::<Vec<_>>()).unwrap();
    let trace = m.forward_batch(&batch, ForwardOptions::default()).unwrap();
    let labels: Vec<Vec<u8>> = enc.iter().map(|q| q.labels.clone()).collect();
    let a = m.loss(&batch).unwrap();
    let b = loss_from_trace(&trace, &labels).unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

fn gradient_check(mode: GraphMode, fusion: Fusion) {
    let m = model(mode, fusion, 11);
    let r = rec("nike air max shoes", "brand model size type", &[2, 3, 2, 2]);
    let q = m.encode(&r).unwrap();
    let batch = m.batch(&[&q]).unwrap();
    let (_, grads) = m.loss_and_gradients(&batch, ForwardOptions::default()).unwrap();
    for (i, name) in m.params.names().iter().enumerate() {
        let x = m.params.tensors()[i].clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut probe = m.clone();
                *probe.params.get_mut(name).unwrap() = p.clone();
                probe.loss(&batch).unwrap()
            },
            &x,
            1e-5,
        )
        .unwrap();
        let diff = numeric
            .data()
            .iter()
            .zip(grads[i].data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = numeric.norm().max(grads[i].norm()).max(1e-6);
        assert!(diff / scale < 1e-4, "{mode:?} {name}: relative error {}", diff / scale);
    }
}

#[test]
fn full_model_gradients_static_gated() {
    gradient_check(GraphMode::Static, Fusion::Gated);
}

#[test]
fn full_model_gradients_dynamic_gated() {
    gradient_check(GraphMode::Dynamic, Fusion::Gated);
}

#[test]
fn full_model_gradients_baseline_and_mean() {
    gradient_check(GraphMode::None, Fusion::Gated);
    gradient_check(GraphMode::Static, Fusion::Mean);
}

#[test]
fn predictions_cover_real_tokens_only() {
    let m = model(GraphMode::Static, Fusion::Gated, 0);
    let preds = m.predict(&corpus(), 2).unwrap();
    for (p, r) in preds.iter().zip(corpus()) {
        assert_eq!(p.len(), r.len());
        assert!(p.iter().all(|&l| l == 2 || l == 3));
    }
}

#[test]
fn static_mode_requires_graph() {
    let vocab = build_vocab(&corpus()).unwrap();
    let cfg = tiny(GraphMode::Static, Fusion::Gated);
    assert!(Model::<f64>::new(cfg.clone(), vocab.clone(), None, 0).is_err());
    let dynamic = Model::<f64>::new(tiny(GraphMode::Dynamic, Fusion::Gated), vocab, Some(graph()), 0).unwrap();
    assert!(dynamic.graph().is_none());
}

#[test]
fn too_long_input_is_rejected() {
    let m = model(GraphMode::Static, Fusion::Gated, 0);
    let long = rec("a b c d e f g h i", "x x x x x x x x x", &[2; 9]);
    assert!(matches!(m.encode(&long), Err(ModelError::TooLong { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    for mode in [GraphMode::Static, GraphMode::Dynamic, GraphMode::None] {
        let m = model(mode, Fusion::Gated, 6);
        save_checkpoint(&m, &path).unwrap();
        let back: Model<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.tensors(), m.params.tensors());
        assert_eq!(back.config, m.config);
        assert_eq!(back.graph(), m.graph());
        let r = &corpus()[0];
        assert_eq!(back.forward(r).unwrap().logits, m.forward(r).unwrap().logits);
    }
}

#[test]
fn checkpoint_version_and_scalar_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let m = model(GraphMode::Static, Fusion::Gated, 6);
    save_checkpoint(&m, &path).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
    assert!(err.contains("f64"), "{err}");

    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["format_version"] = serde_json::json!(99);
    std::fs::write(&path, json.to_string()).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err().to_string();
    assert!(err.contains("version 99"), "{err}");
}
