use budgeted_attention::gating::{HeadMask, MaskKind};
use budgeted_attention::model::{EncoderModel, Execution, GraphGates, InferenceProbe, ModelConfig, TokenBatch};
use budgeted_attention::tensor::{Array, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        seq_len: 7,
        hidden: 4 * heads,
        layers,
        heads,
        ffn_dim: 10,
        num_classes: 3,
        dropout: 0.0,
    }
}

fn tokens(rng: &mut ChaCha8Rng, cfg: &ModelConfig, batch: usize) -> TokenBatch {
    let ids = (0..batch * cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    TokenBatch::new(ids, cfg.seq_len).unwrap()
}

fn mask(values: Vec<f64>, cfg: &ModelConfig) -> HeadMask {
    let kind = if values.iter().all(|v| *v == 0.0 || *v == 1.0) {
        MaskKind::HardGlobal
    } else {
        MaskKind::Soft
    };
    HeadMask::new(Array::from_vec(&[cfg.layers, cfg.heads], values).unwrap(), kind, None).unwrap()
}

/// Copy of `model` with the output-projection rows of the given heads scaled.
fn scale_wo_rows(model: &EncoderModel, scales: &[f64]) -> EncoderModel {
    let cfg = &model.config;
    let dh = cfg.head_dim();
    let mut out = model.clone();
    for l in 0..cfg.layers {
        let wo = out.params.get_mut(&format!("layer{l}.attn.wo")).unwrap();
        for h in 0..cfg.heads {
            let s = scales[l * cfg.heads + h];
            for r in h * dh..(h + 1) * dh {
                for c in 0..cfg.hidden {
                    let v = wo.get2(r, c);
                    wo.set2(r, c, v * s);
                }
            }
        }
    }
    out
}

#[test]
fn all_ones_gates_reproduce_dense_exactly() {
    let cfg = config(3, 2);
    let model = EncoderModel::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = tokens(&mut rng, &cfg, 5);
    let dense = model.forward_dense(&t).unwrap();
    let ones = HeadMask::ones(cfg.layers, cfg.heads);
    assert_eq!(model.forward_gated(&t, &ones).unwrap(), dense);
    assert_eq!(model.forward_hard_skip(&t, &ones).unwrap().max_abs_diff(&dense), 0.0);
}

#[test]
fn zero_mask_equals_model_without_attention() {
    let cfg = config(2, 4);
    let model = EncoderModel::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = tokens(&mut rng, &cfg, 3);
    let zero = mask(vec![0.0; cfg.total_heads()], &cfg);
    let oracle = scale_wo_rows(&model, &vec![0.0; cfg.total_heads()]).forward_dense(&t).unwrap();
    assert_eq!(model.forward_gated(&t, &zero).unwrap(), oracle);
    assert_eq!(model.forward_hard_skip(&t, &zero).unwrap(), oracle);
}

#[test]
fn head_masks_match_output_projection_scaling() {
    let cfg = config(2, 3);
    let model = EncoderModel::new(cfg.clone(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = tokens(&mut rng, &cfg, 4);
    let half = vec![0.5; cfg.total_heads()];
    let got = model.forward_gated(&t, &mask(half.clone(), &cfg)).unwrap();
    let want = scale_wo_rows(&model, &half).forward_dense(&t).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
    let mut zero_one = vec![1.0; cfg.total_heads()];
    zero_one[1] = 0.0;
    zero_one[4] = 0.0;
    let got = model.forward_gated(&t, &mask(zero_one.clone(), &cfg)).unwrap();
    let want = scale_wo_rows(&model, &zero_one).forward_dense(&t).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn hard_skip_matches_gated_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let layers = rng.gen_range(1..4);
        let heads = rng.gen_range(1..5);
        let cfg = config(layers, heads);
        let model = EncoderModel::new(cfg.clone(), case).unwrap();
        let batch = rng.gen_range(1..4);
        let t = tokens(&mut rng, &cfg, batch);
        let values: Vec<f64> = (0..cfg.total_heads()).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let m = mask(values, &cfg);
        let gated = model.forward_gated(&t, &m).unwrap();
        let skip = model.forward_hard_skip(&t, &m).unwrap();
        assert!(gated.max_abs_diff(&skip) < 1e-9, "case {case}");
    }
}

#[test]
fn hard_skip_rejects_soft_masks() {
    let cfg = config(1, 2);
    let model = EncoderModel::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = tokens(&mut rng, &cfg, 1);
    assert!(model.forward_hard_skip(&t, &mask(vec![0.5, 1.0], &cfg)).is_err());
}

#[test]
fn attention_work_is_proportional_to_active_heads() {
    let cfg = config(2, 4);
    let model = EncoderModel::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = tokens(&mut rng, &cfg, 2);
    let full = InferenceProbe::new();
    model.infer(&t, Execution::Dense, Some(&full)).unwrap();
    let per_head = full.attention_macs() / cfg.total_heads() as u64;
    assert_eq!(per_head * cfg.total_heads() as u64, full.attention_macs());
    for active in 0..=cfg.total_heads() {
        let values: Vec<f64> = (0..cfg.total_heads()).map(|i| f64::from(u8::from(i < active))).collect();
        let m = mask(values, &cfg);
        let probe = InferenceProbe::new();
        model.infer(&t, Execution::HardSkip(&m), Some(&probe)).unwrap();
        assert_eq!(probe.attention_macs(), per_head * active as u64);
        let gated = InferenceProbe::new();
        model.infer(&t, Execution::Gated(&m), Some(&gated)).unwrap();
        assert_eq!(gated.attention_macs(), full.attention_macs());
    }
}

#[test]
fn recorded_attention_rows_are_distributions() {
    let cfg = config(2, 2);
    let model = EncoderModel::new(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = tokens(&mut rng, &cfg, 2);
    let probe = InferenceProbe::recording_maps();
    model.infer(&t, Execution::Dense, Some(&probe)).unwrap();
    let maps = probe.attention_maps();
    assert_eq!(maps.len(), 2 * cfg.total_heads());
    for (_, _, p) in maps {
        for row in p.chunks(cfg.seq_len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn recorded_graph_matches_tape_free_inference() {
    let cfg = config(2, 2);
    let mut model = EncoderModel::new(cfg.clone(), 21).unwrap();
    model.init_gates(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = tokens(&mut rng, &cfg, 3);

    let mut g = Graph::new();
    let logits = model.forward_graph(&mut g, &t, GraphGates::Dense, None).unwrap();
    assert!(g.value(logits).max_abs_diff(&model.forward_dense(&t).unwrap()) < 1e-12);

    let m = mask(vec![0.3, 0.9, 0.0, 1.0], &cfg);
    let mut g = Graph::new();
    let z = g.constant(m.values().clone());
    let logits = model.forward_graph(&mut g, &t, GraphGates::Values(z), None).unwrap();
    assert!(g.value(logits).max_abs_diff(&model.forward_gated(&t, &m).unwrap()) < 1e-12);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let cfg = config(2, 2);
    let model = EncoderModel::new(cfg.clone(), 0).unwrap();
    let long = TokenBatch::new(vec![0; 8], 8).unwrap();
    assert!(model.forward_dense(&long).is_err());
    let oov = TokenBatch::new(vec![cfg.vocab_size; cfg.seq_len], cfg.seq_len).unwrap();
    assert!(model.forward_dense(&oov).is_err());
    let ok = TokenBatch::new(vec![0; cfg.seq_len], cfg.seq_len).unwrap();
    assert!(model.forward_gated(&ok, &HeadMask::ones(3, 2)).is_err());
    let bad = ModelConfig { hidden: 5, ..cfg };
    assert!(EncoderModel::new(bad, 0).is_err());
}
