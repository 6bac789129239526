use super::forward::encoder_layer;
use super::*;
use crate::data::BOS;
use crate::tensor::{Graph, Rng, Tensor, TensorId};

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "index {i}: got {g}, want {w} (tol {tol})"
        );
    }
}

fn tiny(stacking: StackingMode, depth: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        depth,
        stacking,
        dropout_p: 0.0,
        label_smoothing: 0.1,
        src_vocab_size: 12,
        tgt_vocab_size: 12,
        embedding_sharing: EmbeddingSharing::Separate,
        max_len: 32,
    }
}

fn rand_const(g: &mut Graph<f64>, shape: Vec<usize>, rng: &mut Rng) -> TensorId {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
    g.constant(Tensor::new(shape, data).unwrap())
}

fn proj_leaves(g: &mut Graph<f64>, d: usize, rng: &mut Rng) -> AttnProj {
    AttnProj {
        wq: rand_const(g, vec![d, d], rng),
        wk: rand_const(g, vec![d, d], rng),
        wv: rand_const(g, vec![d, d], rng),
        wo: rand_const(g, vec![d, d], rng),
    }
}

#[test]
fn sinusoid_position_zero_alternates_zero_one() {
    let pe = sinusoidal_positions::<f64>(4, 6).unwrap();
    for i in 0..6 {
        let want = if i % 2 == 0 { 0.0 } else { 1.0 };
        assert_eq!(pe.data()[i], want, "dim {i}");
    }
}

#[test]
fn sinusoid_position_one_dim_zero_is_sin_one() {
    let pe = sinusoidal_positions::<f64>(4, 6).unwrap();
    let got = pe.data()[6]; // row 1, dim 0
    assert!((got - 1f64.sin()).abs() < 1e-12, "got {got}");
    assert!((got - 0.84147).abs() < 1e-5);
}

#[test]
fn sinusoid_pairs_share_angle() {
    let pe = sinusoidal_positions::<f64>(8, 10).unwrap();
    for pos in 0..8 {
        for i in (0..10).step_by(2) {
            let s = pe.data()[pos * 10 + i];
            let c = pe.data()[pos * 10 + i + 1];
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn sinusoid_rejects_odd_width() {
    assert!(matches!(
        sinusoidal_positions::<f64>(4, 7),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn single_position_attention_is_value_through_projections() {
    let mut rng = Rng::new(5);
    let mut g = Graph::<f64>::new();
    let d = 8;
    let x = rand_const(&mut g, vec![1, 1, d], &mut rng);
    let proj = proj_leaves(&mut g, d, &mut rng);
    let out =
        multi_head_attention(&mut g, x, x, x, None, proj, 2, 0.0, false, &mut rng).unwrap();
    let xv = g.matmul(x, proj.wv).unwrap();
    let want = g.matmul(xv, proj.wo).unwrap();
    assert_close(g.value(out).data(), g.value(want).data(), 1e-12);
}

#[test]
fn two_identical_keys_average_the_values() {
    let mut rng = Rng::new(6);
    let d = 8;
    let mut g = Graph::<f64>::new();
    let q = rand_const(&mut g, vec![1, 1, d], &mut rng);
    let proj = proj_leaves(&mut g, d, &mut rng);
    let key_row: Vec<f64> = (0..d).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
    let v1: Vec<f64> = (0..d).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
    let v2: Vec<f64> = (0..d).map(|_| rng.uniform_in(-0.5, 0.5)).collect();

    let mut kk = key_row.clone();
    kk.extend_from_slice(&key_row);
    let k2 = g.constant(Tensor::new(vec![1, 2, d], kk).unwrap());
    let mut vv = v1.clone();
    vv.extend_from_slice(&v2);
    let v_pair = g.constant(Tensor::new(vec![1, 2, d], vv).unwrap());
    let got =
        multi_head_attention(&mut g, q, k2, v_pair, None, proj, 2, 0.0, false, &mut rng)
            .unwrap();

    let k1 = g.constant(Tensor::new(vec![1, 1, d], key_row).unwrap());
    let avg: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| 0.5 * (a + b)).collect();
    let v_avg = g.constant(Tensor::new(vec![1, 1, d], avg).unwrap());
    let want =
        multi_head_attention(&mut g, q, k1, v_avg, None, proj, 2, 0.0, false, &mut rng)
            .unwrap();
    assert_close(g.value(got).data(), g.value(want).data(), 1e-12);
}

#[test]
fn causal_mask_makes_first_position_ignore_the_future() {
    let d = 8;
    let causal: Vec<f64> = (0..9)
        .map(|i| if i % 3 > i / 3 { -1e9 } else { 0.0 })
        .collect();

    let run = |tail_seed: u64| -> Vec<f64> {
        let mut rng_w = Rng::new(9);
        let mut g = Graph::<f64>::new();
        let mut data: Vec<f64> = (0..d).map(|_| rng_w.uniform_in(-0.5, 0.5)).collect();
        let mut tail = Rng::new(tail_seed);
        data.extend((0..2 * d).map(|_| tail.uniform_in(-0.5, 0.5)));
        let x = g.constant(Tensor::new(vec![1, 3, d], data).unwrap());
        let proj = proj_leaves(&mut g, d, &mut rng_w);
        let mask = g.constant(Tensor::new(vec![1, 1, 3, 3], causal.clone()).unwrap());
        let out = multi_head_attention(
            &mut g,
            x,
            x,
            x,
            Some(mask),
            proj,
            2,
            0.0,
            false,
            &mut Rng::new(0),
        )
        .unwrap();
        g.value(out).data().to_vec()
    };

    let a = run(21);
    let b = run(22);
    assert_eq!(a[..d], b[..d], "first position must not see the future");
    assert_ne!(a[d..], b[d..]);
}

#[test]
fn fully_masked_query_is_an_error() {
    let mut rng = Rng::new(8);
    let d = 8;
    let mut g = Graph::<f64>::new();
    let x = rand_const(&mut g, vec![1, 2, d], &mut rng);
    let proj = proj_leaves(&mut g, d, &mut rng);
    let mask = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, -1e9, -1e9, -1e9]).unwrap());
    let err = multi_head_attention(&mut g, x, x, x, Some(mask), proj, 2, 0.0, false, &mut rng)
        .unwrap_err();
    assert!(matches!(err, ModelError::AllKeysMasked { query: 1 }));
}

#[test]
fn recurrent_depth_one_is_a_single_layer_application() {
    let config = tiny(StackingMode::Recurrent, 1);
    let params = ModelParams::<f64>::init(&config, 11).unwrap();
    let mut rng = Rng::new(3);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = rand_const(&mut g, vec![1, 4, config.d_model], &mut rng);
    let side = StackSide::Encoder { key_bias: None };
    let stacked = layer_stack(&mut g, &params, &bound, x, &side, 1, false, &mut rng).unwrap();
    let single = encoder_layer(
        &mut g,
        &bound,
        &params.layout().enc_layers[0],
        x,
        None,
        &config,
        false,
        &mut rng,
    )
    .unwrap();
    assert_eq!(g.value(stacked).data(), g.value(single).data());
}

#[test]
fn recurrent_depth_three_equals_explicit_composition() {
    let config = tiny(StackingMode::Recurrent, 3);
    let params = ModelParams::<f64>::init(&config, 12).unwrap();
    let mut rng = Rng::new(4);
    let x0 = {
        let mut r = Rng::new(40);
        let n = 2 * 5 * config.d_model;
        (0..n).map(|_| r.uniform_in(-0.5, 0.5)).collect::<Vec<f64>>()
    };
    let side = StackSide::Encoder { key_bias: None };

    let mut g1 = Graph::new();
    let b1 = params.bind(&mut g1, false);
    let x = g1.constant(Tensor::new(vec![2, 5, config.d_model], x0.clone()).unwrap());
    let deep = layer_stack(&mut g1, &params, &b1, x, &side, 3, false, &mut rng).unwrap();

    let mut g2 = Graph::new();
    let b2 = params.bind(&mut g2, false);
    let mut h = g2.constant(Tensor::new(vec![2, 5, config.d_model], x0).unwrap());
    for _ in 0..3 {
        h = layer_stack(&mut g2, &params, &b2, h, &side, 1, false, &mut rng).unwrap();
    }
    assert_close(g1.value(deep).data(), g2.value(h).data(), 1e-6);
}

fn copy_to_vanilla(params: &ModelParams<f64>, vanilla: &ModelConfig) -> ModelParams<f64> {
    let tensors = super::params::tensor_inventory(vanilla)
        .into_iter()
        .map(|(name, _)| {
            let mut parts: Vec<&str> = name.split('.').collect();
            if (parts[0] == "enc" || parts[0] == "dec")
                && parts[1].chars().all(|c| c.is_ascii_digit())
            {
                parts[1] = "shared";
            }
            let src_name = parts.join(".");
            let idx = params.index_of(&src_name).unwrap();
            (name, params.tensor(idx).clone())
        })
        .collect();
    ModelParams::from_tensors(vanilla, tensors).unwrap()
}

#[test]
fn vanilla_with_copied_layers_matches_recurrent_forward() {
    let recurrent = tiny(StackingMode::Recurrent, 2);
    let vanilla = ModelConfig {
        stacking: StackingMode::Vanilla,
        ..recurrent.clone()
    };
    let params_r = ModelParams::<f64>::init(&recurrent, 13).unwrap();
    let params_v = copy_to_vanilla(&params_r, &vanilla);

    let src = IdMatrix::from_rows(&[vec![4, 5, 6], vec![7, 8]]);
    let tgt = IdMatrix::from_rows(&[vec![BOS, 9, 10], vec![BOS, 11]]);

    let logits = |params: &ModelParams<f64>| -> Vec<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let mut rng = Rng::new(0);
        let enc = encode(&mut g, params, &bound, &src, None, false, &mut rng).unwrap();
        let out = decode_forward(
            &mut g, params, &bound, &tgt, enc, &src, None, false, &mut rng,
        )
        .unwrap();
        g.value(out).data().to_vec()
    };
    assert_close(&logits(&params_v), &logits(&params_r), 1e-6);
}

#[test]
fn vanilla_rejects_mismatched_depth() {
    let config = tiny(StackingMode::Vanilla, 2);
    let params = ModelParams::<f64>::init(&config, 14).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut rng = Rng::new(0);
    let x = rand_const(&mut g, vec![1, 3, config.d_model], &mut rng);
    let side = StackSide::Encoder { key_bias: None };
    let err = layer_stack(&mut g, &params, &bound, x, &side, 3, false, &mut rng).unwrap_err();
    assert!(matches!(err, ModelError::Config(_)));
}

#[test]
fn vanilla_rejects_depth_override() {
    let config = tiny(StackingMode::Vanilla, 2);
    let params = ModelParams::<f64>::init(&config, 15).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut rng = Rng::new(0);
    let src = IdMatrix::from_rows(&[vec![4, 5]]);
    let err = encode(&mut g, &params, &bound, &src, Some(2), false, &mut rng).unwrap_err();
    assert!(matches!(err, ModelError::Config(_)));
}

#[test]
fn override_equal_to_depth_matches_no_override() {
    let config = tiny(StackingMode::Recurrent, 3);
    let params = ModelParams::<f64>::init(&config, 16).unwrap();
    let src = IdMatrix::from_rows(&[vec![4, 5, 6, 7]]);
    let run = |ov: Option<usize>| -> Vec<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let mut rng = Rng::new(0);
        let enc = encode(&mut g, &params, &bound, &src, ov, false, &mut rng).unwrap();
        g.value(enc).data().to_vec()
    };
    assert_eq!(run(None), run(Some(3)));
    assert_ne!(run(None), run(Some(2)));
}

#[test]
fn shallow_override_on_deep_model_keeps_shapes() {
    let config = tiny(StackingMode::Recurrent, 6);
    let params = ModelParams::<f64>::init(&config, 17).unwrap();
    let src = IdMatrix::from_rows(&[vec![4, 5, 6], vec![7, 8, 9]]);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut rng = Rng::new(0);
    let enc = encode(&mut g, &params, &bound, &src, Some(1), false, &mut rng).unwrap();
    assert_eq!(g.shape(enc), &[2, 3, config.d_model]);
}

#[test]
fn decoder_logits_do_not_depend_on_future_tokens() {
    let config = tiny(StackingMode::Recurrent, 2);
    let params = ModelParams::<f64>::init(&config, 18).unwrap();
    let src = IdMatrix::from_rows(&[vec![4, 5, 6]]);
    let run = |tgt_ids: Vec<usize>| -> Vec<f64> {
        let tgt = IdMatrix::from_rows(&[tgt_ids]);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let mut rng = Rng::new(0);
        let enc = encode(&mut g, &params, &bound, &src, None, false, &mut rng).unwrap();
        let out = decode_forward(
            &mut g, &params, &bound, &tgt, enc, &src, None, false, &mut rng,
        )
        .unwrap();
        g.value(out).data().to_vec()
    };
    let v = config.tgt_vocab_size;
    let a = run(vec![BOS, 9, 10, 5]);
    let b = run(vec![BOS, 9, 10, 11]);
    assert_eq!(a[..3 * v], b[..3 * v], "prefix logits must match exactly");
    assert_ne!(a[3 * v..], b[3 * v..]);
}

#[test]
fn bos_only_prefix_yields_one_distribution_row() {
    let config = tiny(StackingMode::Recurrent, 2);
    let params = ModelParams::<f64>::init(&config, 19).unwrap();
    let src = IdMatrix::from_rows(&[vec![4, 5]]);
    let tgt = IdMatrix::from_rows(&[vec![BOS]]);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut rng = Rng::new(0);
    let enc = encode(&mut g, &params, &bound, &src, None, false, &mut rng).unwrap();
    let out = decode_forward(
        &mut g, &params, &bound, &tgt, enc, &src, None, false, &mut rng,
    )
    .unwrap();
    assert_eq!(g.shape(out), &[1, 1, config.tgt_vocab_size]);
}

#[test]
fn tied_softmax_column_tracks_embedding_row() {
    let mut config = tiny(StackingMode::Recurrent, 2);
    config.embedding_sharing = EmbeddingSharing::TgtSoftmaxTied;
    let mut params = ModelParams::<f64>::init(&config, 20).unwrap();
    let src = IdMatrix::from_rows(&[vec![4, 5]]);
    let tgt = IdMatrix::from_rows(&[vec![BOS, 6]]);
    let run = |params: &ModelParams<f64>| -> Vec<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let mut rng = Rng::new(0);
        let enc = encode(&mut g, params, &bound, &src, None, false, &mut rng).unwrap();
        let out = decode_forward(
            &mut g, params, &bound, &tgt, enc, &src, None, false, &mut rng,
        )
        .unwrap();
        g.value(out).data().to_vec()
    };
    let before = run(&params);

    let row = 7; // appears in neither src nor tgt
    let tgt_idx = params.layout().tgt_embed;
    assert!(params.layout().out_proj.is_none());
    let d = config.d_model;
    params.tensor_mut(tgt_idx).data_mut()[row * d] += 0.25;
    let after = run(&params);

    let v = config.tgt_vocab_size;
    let mut moved = false;
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        if i % v == row {
            moved |= b != a;
        } else {
            assert_eq!(b, a, "column {} should be unaffected", i % v);
        }
    }
    assert!(moved, "tied column must move");
}

#[test]
fn recurrent_param_count_is_depth_invariant() {
    for sharing in [
        EmbeddingSharing::Separate,
        EmbeddingSharing::TgtSoftmaxTied,
        EmbeddingSharing::JointAllTied,
    ] {
        let mut base = tiny(StackingMode::Recurrent, 1);
        base.embedding_sharing = sharing;
        let reference = param_count(&base, false);
        for depth in 1..=8 {
            let config = ModelConfig {
                depth,
                ..base.clone()
            };
            assert_eq!(param_count(&config, false), reference, "depth {depth}");
            assert_eq!(
                param_count(&config, true),
                3 * reference,
                "optimizer slots at depth {depth}"
            );
        }
    }
}

#[test]
fn base_scale_layer_pair_arithmetic() {
    let (d, f) = (512, 2048);
    let pair = encoder_layer_param_count(d, f) + decoder_layer_param_count(d, f);
    assert_eq!(pair, 7_350_272);
    assert_eq!(pair, 12 * d * d + 4 * d * f + 2 * (f + d) + 10 * d);

    let base = ModelConfig {
        d_model: d,
        n_heads: 8,
        d_ff: f,
        depth: 6,
        stacking: StackingMode::Vanilla,
        dropout_p: 0.1,
        label_smoothing: 0.1,
        src_vocab_size: 16000,
        tgt_vocab_size: 16000,
        embedding_sharing: EmbeddingSharing::JointAllTied,
        max_len: 256,
    };
    let recurrent = ModelConfig {
        stacking: StackingMode::Recurrent,
        ..base.clone()
    };
    let raw = param_count(&base, false) - param_count(&recurrent, false);
    assert_eq!(raw, 5 * 7_350_272);
    assert_eq!(raw, 36_751_360);
    let with_slots = param_count(&base, true) - param_count(&recurrent, true);
    assert_eq!(with_slots, 110_254_080);
    assert_eq!(with_slots, 158_894_599 - 48_640_519);
}

#[test]
fn tiny_config_count_matches_hand_enumeration() {
    let config = ModelConfig {
        d_model: 4,
        n_heads: 2,
        d_ff: 8,
        depth: 3,
        stacking: StackingMode::Recurrent,
        dropout_p: 0.0,
        label_smoothing: 0.0,
        src_vocab_size: 10,
        tgt_vocab_size: 10,
        embedding_sharing: EmbeddingSharing::Separate,
        max_len: 16,
    };
    // Every tensor, written out one by one.
    let by_hand: usize = [
        10 * 4, // src embedding
        10 * 4, // tgt embedding
        4 * 10, // output projection
        4 * 4,
        4 * 4,
        4 * 4,
        4 * 4, // encoder self-attention q, k, v, o
        4,
        4, // encoder norm1
        4 * 8,
        8, // encoder ffn w1, b1
        8 * 4,
        4, // encoder ffn w2, b2
        4,
        4, // encoder norm2
        4 * 4,
        4 * 4,
        4 * 4,
        4 * 4, // decoder self-attention
        4,
        4, // decoder norm1
        4 * 4,
        4 * 4,
        4 * 4,
        4 * 4, // decoder cross-attention
        4,
        4, // decoder norm2
        4 * 8,
        8,
        8 * 4,
        4, // decoder ffn
        4,
        4, // decoder norm3
    ]
    .iter()
    .sum();
    assert_eq!(by_hand, 504);
    assert_eq!(param_count(&config, false), by_hand);
    let params = ModelParams::<f64>::init(&config, 1).unwrap();
    assert_eq!(params.n_elements(), by_hand);
}

#[test]
fn joint_tying_is_by_identity_not_copy() {
    let mut config = tiny(StackingMode::Recurrent, 2);
    config.embedding_sharing = EmbeddingSharing::JointAllTied;
    let mut params = ModelParams::<f64>::init(&config, 21).unwrap();
    let layout = params.layout().clone();
    assert_eq!(layout.src_embed, layout.tgt_embed);
    assert!(layout.out_proj.is_none());

    params.tensor_mut(layout.src_embed).data_mut()[0] = 42.0;
    assert_eq!(params.tensor(layout.tgt_embed).data()[0], 42.0);

    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g, true);
    assert_eq!(bound.ids[layout.src_embed], bound.ids[layout.tgt_embed]);
}

#[test]
fn recurrent_stores_one_layer_regardless_of_depth() {
    let config = tiny(StackingMode::Recurrent, 5);
    let params = ModelParams::<f64>::init(&config, 22).unwrap();
    assert_eq!(params.layout().enc_layers.len(), 1);
    assert_eq!(params.layout().dec_layers.len(), 1);

    let vanilla = tiny(StackingMode::Vanilla, 5);
    let params = ModelParams::<f64>::init(&vanilla, 22).unwrap();
    assert_eq!(params.layout().enc_layers.len(), 5);
    assert_eq!(params.layout().dec_layers.len(), 5);
}

#[test]
fn config_validation_rejects_bad_combinations() {
    let mut config = tiny(StackingMode::Recurrent, 2);
    config.n_heads = 3;
    assert!(config.validate().is_err());

    let mut config = tiny(StackingMode::Recurrent, 2);
    config.embedding_sharing = EmbeddingSharing::JointAllTied;
    config.src_vocab_size = 12;
    config.tgt_vocab_size = 13;
    assert!(config.validate().is_err());

    let config = tiny(StackingMode::Recurrent, 2);
    assert!(config.validate().is_ok());
}

#[test]
fn sequences_beyond_max_len_are_rejected() {
    let mut config = tiny(StackingMode::Recurrent, 1);
    config.max_len = 4;
    let params = ModelParams::<f64>::init(&config, 23).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut rng = Rng::new(0);
    let src = IdMatrix::from_rows(&[vec![4, 5, 6, 7, 8]]);
    let err = encode(&mut g, &params, &bound, &src, None, false, &mut rng).unwrap_err();
    assert!(matches!(err, ModelError::Config(_)));
}

#[test]
fn fixed_seed_reproduces_logits_exactly() {
    let mut config = tiny(StackingMode::Recurrent, 2);
    config.dropout_p = 0.1;
    let src = IdMatrix::from_rows(&[vec![4, 5, 6]]);
    let tgt = IdMatrix::from_rows(&[vec![BOS, 9, 10]]);
    let run = || -> Vec<f64> {
        let params = ModelParams::<f64>::init(&config, 411).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let mut rng = Rng::new(5150);
        let enc = encode(&mut g, &params, &bound, &src, None, true, &mut rng).unwrap();
        let out = decode_forward(
            &mut g, &params, &bound, &tgt, enc, &src, None, true, &mut rng,
        )
        .unwrap();
        g.value(out).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn shared_tensor_gradient_is_the_sum_over_applications() {
    let recurrent = tiny(StackingMode::Recurrent, 2);
    let vanilla = ModelConfig {
        stacking: StackingMode::Vanilla,
        ..recurrent.clone()
    };
    let params_r = ModelParams::<f64>::init(&recurrent, 24).unwrap();
    let params_v = copy_to_vanilla(&params_r, &vanilla);
    let src = IdMatrix::from_rows(&[vec![4, 5, 6], vec![7, 8, 9]]);

    let grads = |params: &ModelParams<f64>| -> (Bound, Graph<f64>) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let mut rng = Rng::new(0);
        let enc = encode(&mut g, params, &bound, &src, None, false, &mut rng).unwrap();
        let loss = g.mean(enc).unwrap();
        g.backward(loss).unwrap();
        (bound, g)
    };
    let (bound_r, g_r) = grads(&params_r);
    let (bound_v, g_v) = grads(&params_v);

    let shared_wq = bound_r.ids[params_r.layout().enc_layers[0].self_attn.wq];
    let wq0 = bound_v.ids[params_v.layout().enc_layers[0].self_attn.wq];
    let wq1 = bound_v.ids[params_v.layout().enc_layers[1].self_attn.wq];
    let got = g_r.grad(shared_wq).unwrap();
    let g0 = g_v.grad(wq0).unwrap();
    let g1 = g_v.grad(wq1).unwrap();
    let want: Vec<f64> = g0.iter().zip(g1).map(|(a, b)| a + b).collect();
    assert_close(got, &want, 1e-10);
}

#[test]
fn id_matrix_pads_ragged_rows() {
    let m = IdMatrix::from_rows(&[vec![5, 6], vec![7]]);
    assert_eq!(m.rows, 2);
    assert_eq!(m.cols, 2);
    assert_eq!(m.ids, vec![5, 6, 7, crate::data::PAD]);
    assert_eq!(m.row(1), &[7, crate::data::PAD]);
}
