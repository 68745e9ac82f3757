use prunetune::model::{
    attach_adapters, batch_graph, beam_search, has_adapters, init_params, nll_loss, parameter_count, transformer_forward,
    translate, AdapterConfig, DecodeOptions, GraphOptions, ModelConfig, Pair, ParamGroup, EMBEDDING, OUTPUT_BIAS,
};
use prunetune::tensor::{grad_check, BinaryMask, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 32,
        ffn_dim: 64,
        heads: 2,
        vocab_size: 64,
        max_len: 12,
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        model_dim: 8,
        ffn_dim: 16,
        heads: 2,
        vocab_size: 12,
        max_len: 8,
    }
}

/// Multiplies every element by its mask bit, written out independently of the library helper.
fn apply_by_hand(params: &ParamStore, mask: &BinaryMask) -> ParamStore {
    let mut out = params.clone();
    for (name, t) in out.iter_mut() {
        let bits = mask.bits(name).unwrap();
        for (x, &b) in t.data_mut().iter_mut().zip(bits) {
            if !b {
                *x = 0.0;
            }
        }
    }
    out
}

#[test]
fn same_seed_same_parameters() {
    let a = init_params(&toy(), 7).unwrap();
    let b = init_params(&toy(), 7).unwrap();
    let c = init_params(&toy(), 8).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
}

#[test]
fn layer_norm_gains_start_at_one() {
    let p = init_params(&toy(), 1).unwrap();
    let mut seen = 0;
    for (name, t, tag) in p.iter_tagged() {
        if tag.unwrap().group == ParamGroup::LayerNorm && name.ends_with("gain") {
            assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            seen += 1;
        }
    }
    // 2 per encoder layer, 3 per decoder layer, 2 final.
    assert_eq!(seen, 2 * 2 + 3 * 2 + 2);
}

#[test]
fn parameter_count_matches_hand_count() {
    let cfg = toy();
    // embedding 64*32 + output bias 64 + encoder 17152 + decoder 25728
    assert_eq!(parameter_count(&cfg), 44992);
    assert_eq!(init_params(&cfg, 0).unwrap().total_elements(), 44992);
}

#[test]
fn all_ones_mask_is_identity() {
    let cfg = toy();
    let p = init_params(&cfg, 3).unwrap();
    let ones = BinaryMask::ones_like(&p);
    let src = [1, 2, 3, 4];
    let prefix = [cfg.bos(), 5, 6];
    let plain = transformer_forward(&cfg, &p, &src, &prefix, None).unwrap();
    let masked = transformer_forward(&cfg, &p, &src, &prefix, Some(&ones)).unwrap();
    assert!(plain.bit_eq(&masked));
}

#[test]
fn only_output_bias_left_gives_bias_logits() {
    let cfg = toy();
    let mut p = init_params(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for x in p.get_mut(OUTPUT_BIAS).unwrap().data_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    let keep = BinaryMask::by_tensor(&p, |n, _| n == EMBEDDING || n == OUTPUT_BIAS);
    let logits = transformer_forward(&cfg, &p, &[1, 2, 3], &[cfg.bos(), 4], Some(&keep)).unwrap();
    // Zero layer-norm gains and biases leave a zero decoder state; only the bias survives.
    let bias = p.get(OUTPUT_BIAS).unwrap().data();
    for row in logits.data().chunks(cfg.vocab_size) {
        for (a, b) in row.iter().zip(bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let cfg = toy();
    let p = init_params(&cfg, 3).unwrap();
    let keep = BinaryMask::by_tensor(&p, |n, _| n == EMBEDDING);
    let targets = [7, 8, cfg.eos()];
    let logits = transformer_forward(&cfg, &p, &[1, 2, 3], &[cfg.bos(), 7, 8], Some(&keep)).unwrap();
    let loss = nll_loss(&logits, &targets).unwrap();
    assert!((loss - (64f64).ln()).abs() < 1e-12);
}

#[test]
fn decoder_is_causal() {
    let cfg = toy();
    let p = init_params(&cfg, 11).unwrap();
    let a = transformer_forward(&cfg, &p, &[1, 2, 3], &[cfg.bos(), 4, 5, 6], None).unwrap();
    let b = transformer_forward(&cfg, &p, &[1, 2, 3], &[cfg.bos(), 4, 9, 10], None).unwrap();
    let v = cfg.vocab_size;
    assert_eq!(&a.data()[..2 * v], &b.data()[..2 * v]);
    assert_ne!(&a.data()[2 * v..], &b.data()[2 * v..]);
}

#[test]
fn packed_batch_matches_single_forward() {
    let cfg = toy();
    let p = init_params(&cfg, 2).unwrap();
    let pairs = vec![Pair::new(vec![1, 2, 3], vec![4, 5]), Pair::new(vec![6, 7], vec![8, 9, 10, 11])];
    let bg = batch_graph(&cfg, &pairs, GraphOptions::default()).unwrap();
    let packed = bg.graph.forward(&p, &bg.inputs).unwrap().take(bg.logits);
    let mut row = 0;
    for pair in &pairs {
        let mut prefix = vec![cfg.bos()];
        prefix.extend_from_slice(&pair.tgt);
        let single = transformer_forward(&cfg, &p, &pair.src, &prefix, None).unwrap();
        let n = single.data().len();
        let chunk = &packed.data()[row..row + n];
        for (a, b) in chunk.iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        row += n;
    }
}

#[test]
fn out_of_vocabulary_ids_are_rejected() {
    let cfg = toy();
    let p = init_params(&cfg, 2).unwrap();
    assert!(transformer_forward(&cfg, &p, &[64], &[cfg.bos()], None).is_err());
    let bad = vec![Pair::new(vec![1], vec![99])];
    assert!(batch_graph(&cfg, &bad, GraphOptions::default()).is_err());
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        max_len: 6,
        ..toy()
    };
    let p = init_params(&cfg, 4).unwrap();
    let pairs = vec![Pair::new(vec![1, 2, 3], vec![4, 5]), Pair::new(vec![6, 7], vec![8, 9, 10])];
    let bg = batch_graph(&cfg, &pairs, GraphOptions::default()).unwrap();
    let worst = grad_check(&bg.graph, &p, &bg.inputs, bg.loss, 200, 1e-5, 9).unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn adapters_start_as_identity() {
    let cfg = toy();
    let base = init_params(&cfg, 5).unwrap();
    let with = attach_adapters(&base, &cfg, &AdapterConfig { bottleneck_dim: 8 }, 6).unwrap();
    assert!(has_adapters(&with) && !has_adapters(&base));
    let a = transformer_forward(&cfg, &base, &[1, 2], &[cfg.bos(), 3], None).unwrap();
    let b = transformer_forward(&cfg, &with, &[1, 2], &[cfg.bos(), 3], None).unwrap();
    assert!(a.bit_eq(&b));
    let added: usize = with
        .iter_tagged()
        .filter(|(_, _, t)| t.unwrap().group == ParamGroup::Adapter)
        .map(|(_, t, _)| t.len())
        .sum();
    // four adapters of 32*8 + 8 + 8*32 + 32
    assert_eq!(added, 4 * 552);
    assert_eq!(with.total_elements(), base.total_elements() + added);
}

#[test]
fn adapters_attach_once() {
    let cfg = toy();
    let p = init_params(&cfg, 5).unwrap();
    let ac = AdapterConfig { bottleneck_dim: 8 };
    let with = attach_adapters(&p, &cfg, &ac, 6).unwrap();
    assert!(attach_adapters(&with, &cfg, &ac, 6).is_err());
    let too_wide = AdapterConfig { bottleneck_dim: 32 };
    assert!(attach_adapters(&p, &cfg, &too_wide, 6).is_err());
}

#[test]
fn greedy_decoding_is_deterministic_and_bounded() {
    let cfg = tiny();
    let p = init_params(&cfg, 12).unwrap();
    let a = translate(&cfg, &p, None, &[1, 2, 3], 1, 0.0).unwrap();
    let b = translate(&cfg, &p, None, &[1, 2, 3], 1, 0.0).unwrap();
    assert_eq!(a, b);
    assert!(a.len() < cfg.max_len);
    assert!(a.iter().all(|&t| t != cfg.bos() && t != cfg.eos()));
}

/// Step-by-step argmax decoding written against the single-sentence forward.
fn greedy_reference(cfg: &ModelConfig, p: &ParamStore, src: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    while out.len() + 1 < cfg.max_len {
        let mut prefix = vec![cfg.bos()];
        prefix.extend_from_slice(&out);
        let logits = transformer_forward(cfg, p, src, &prefix, None).unwrap();
        let v = cfg.vocab_size;
        let last = &logits.data()[logits.data().len() - v..];
        let mut best = None::<(f64, u32)>;
        for (tok, &x) in last.iter().enumerate() {
            if tok as u32 == cfg.bos() {
                continue;
            }
            if best.is_none_or(|(b, _)| x > b) {
                best = Some((x, tok as u32));
            }
        }
        let tok = best.unwrap().1;
        if tok == cfg.eos() {
            break;
        }
        out.push(tok);
    }
    out
}

#[test]
fn width_one_beam_is_greedy() {
    let cfg = tiny();
    for seed in 0..4 {
        let p = init_params(&cfg, seed).unwrap();
        for src in [vec![1u32, 2, 3], vec![4, 4], vec![9, 8, 7, 6, 5]] {
            let got = translate(&cfg, &p, None, &src, 1, 0.6).unwrap();
            assert_eq!(got, greedy_reference(&cfg, &p, &src), "seed {seed}");
        }
    }
}

#[test]
fn zero_length_penalty_ranks_by_log_prob() {
    let cfg = tiny();
    let p = init_params(&cfg, 21).unwrap();
    let opts = DecodeOptions {
        beam_width: 4,
        length_penalty: 0.0,
        chunk_size: 8,
    };
    let hyps = beam_search(&cfg, &p, None, &[vec![1, 2, 3], vec![5, 6]], &opts).unwrap();
    for h in hyps {
        assert!(!h.is_empty());
        for w in h.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for x in &h {
            assert_eq!(x.score, x.log_prob);
        }
    }
}

#[test]
fn batched_beam_matches_one_at_a_time() {
    let cfg = tiny();
    let p = init_params(&cfg, 22).unwrap();
    let sources = vec![vec![1u32, 2, 3], vec![5, 6], vec![7, 7, 7, 7]];
    let opts = DecodeOptions {
        beam_width: 3,
        length_penalty: 0.6,
        chunk_size: 8,
    };
    let batched = beam_search(&cfg, &p, None, &sources, &opts).unwrap();
    for (src, b) in sources.iter().zip(&batched) {
        let single = beam_search(&cfg, &p, None, std::slice::from_ref(src), &opts).unwrap();
        assert_eq!(single[0][0].tokens, b[0].tokens);
        assert!((single[0][0].score - b[0].score).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_forward_equals_zeroed_parameters(seed in 0u64..1000, density in 0.0f64..1.0) {
        let cfg = tiny();
        let p = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mask = BinaryMask::from_fn(&p, |_, _, _| rng.gen_bool(density));
        let zeroed = apply_by_hand(&p, &mask);
        let a = transformer_forward(&cfg, &p, &[1, 2, 3], &[cfg.bos(), 4, 5], Some(&mask)).unwrap();
        let b = transformer_forward(&cfg, &zeroed, &[1, 2, 3], &[cfg.bos(), 4, 5], None).unwrap();
        prop_assert!(a.bit_eq(&b));
    }
}
