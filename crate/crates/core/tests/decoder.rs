use cxrlab::config::DecoderConfig;
use cxrlab::decoder::{is_cross_attention_param, AttentionMode, Decoder};
use cxrlab::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> DecoderConfig {
    DecoderConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab: 11,
        max_gen_len: 12,
        dropout: 0.0,
    }
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Gives biases and gains nonzero random values so tests do not pass by
/// accident of zero initialization.
fn perturb(store: &mut ParamStore, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with(".bias") || name.ends_with(".gain") {
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            let shape = store.value(id).shape().to_vec();
            let noise = random(&shape, seed ^ id.index() as u64, 0.2);
            *store.value_mut(id) = Tensor::new(&shape, noise.data().iter().map(|x| base + x).collect()).unwrap();
        }
    }
}

fn logits(dec: &Decoder, store: &ParamStore, tokens: &[usize], visual: &Tensor) -> Tensor {
    let g = Graph::inference(store);
    let v = g.constant(visual.clone()).unwrap();
    let out = dec.forward(&g, tokens, Some(v), AttentionMode::Causal).unwrap();
    g.value(out.logits).as_ref().clone()
}

fn setup(seed: u64) -> (ParamStore, Decoder, Tensor) {
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &cfg(), seed, true).unwrap();
    perturb(&mut store, seed);
    (store, dec, random(&[6, 16], seed + 100, 1.0))
}

#[test]
fn t_tokens_give_t_by_v_logits() {
    let (store, dec, vis) = setup(1);
    for t in [1, 4, 12] {
        let tokens: Vec<usize> = (0..t).map(|i| i % 11).collect();
        assert_eq!(logits(&dec, &store, &tokens, &vis).shape(), &[t, 11]);
    }
    let g = Graph::inference(&store);
    let v = g.constant(vis.clone()).unwrap();
    assert!(dec.forward(&g, &[1; 13], Some(v), AttentionMode::Causal).is_err());
}

#[test]
fn logits_ignore_future_tokens_bit_exactly() {
    let (store, dec, vis) = setup(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base: Vec<usize> = (0..9).map(|_| rng.random_range(0..11)).collect();
    let full = logits(&dec, &store, &base, &vis);
    for t in 0..base.len() - 1 {
        let mut changed = base.clone();
        for tok in changed.iter_mut().skip(t + 1) {
            *tok = rng.random_range(0..11);
        }
        changed[t + 1] = (base[t + 1] + 1) % 11;
        let other = logits(&dec, &store, &changed, &vis);
        for r in 0..=t {
            assert_eq!(full.row(r), other.row(r), "row {r} changed by tokens after {t}");
        }
        assert_ne!(full.row(t + 1), other.row(t + 1));
    }
    // swapping two future tokens
    let mut swapped = base.clone();
    swapped.swap(6, 7);
    let other = logits(&dec, &store, &swapped, &vis);
    for r in 0..6 {
        assert_eq!(full.row(r), other.row(r));
    }
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let (store, dec, vis) = setup(3);
    let g = Graph::inference(&store);
    let v = g.constant(vis).unwrap();
    let full = dec.forward(&g, &[1, 4, 7, 2], Some(v), AttentionMode::Causal).unwrap();
    for heads in &full.cross_weights {
        assert_eq!(heads.len(), 2);
        for &w in heads {
            let w = g.value(w);
            assert_eq!(w.shape(), &[4, 6]);
            for r in 0..4 {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn kv_cache_matches_full_forward_at_every_step() {
    let (store, dec, vis) = setup(4);
    let tokens = [1usize, 7, 3, 9, 9, 0, 5, 10, 2, 6, 4, 8];
    let full = logits(&dec, &store, &tokens, &vis);
    let g = Graph::inference(&store);
    let v = g.constant(vis).unwrap();
    let mut state = dec.begin(&g, Some(v)).unwrap();
    for (t, &tok) in tokens.iter().enumerate() {
        assert_eq!(state.position(), t);
        assert_eq!(state.cached_len(&g), t);
        let out = dec.step(&g, &mut state, tok).unwrap();
        let step = g.value(out.logits);
        let diff = step.data().iter().zip(full.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "step {t}: {diff}");
    }
    assert!(dec.step(&g, &mut state, 1).is_err());
}

// Zero visual features with zeroed value and output biases make every
// cross-attention sublayer contribute exactly zero, so the captioning decoder
// must agree with a plain language model that shares the remaining weights.
#[test]
fn zero_visual_features_reduce_to_the_language_model() {
    let (mut store, dec, _) = setup(5);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.contains(".cross_attn.v.bias") || name.contains(".cross_attn.out.bias") {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
    }
    let mut lm_store = ParamStore::new();
    let lm = Decoder::new(&mut lm_store, &cfg(), 77, false).unwrap();
    let ids: Vec<_> = lm_store.ids().collect();
    for id in ids {
        let name = lm_store.name(id).to_string();
        assert!(!is_cross_attention_param(&name));
        *lm_store.value_mut(id) = store.value(store.id(&name).unwrap()).clone();
    }
    let tokens = [1usize, 4, 4, 8, 2, 10];
    let with_zero = logits(&dec, &store, &tokens, &Tensor::zeros(&[6, 16]));
    let g = Graph::inference(&lm_store);
    let out = lm.forward(&g, &tokens, None, AttentionMode::Causal).unwrap();
    let plain = g.value(out.logits);
    assert!(with_zero.max_abs_diff(&plain) <= 1e-12);
    // with nonzero visual features the two differ
    let with_vis = logits(&dec, &store, &tokens, &random(&[6, 16], 9, 1.0));
    assert!(with_vis.max_abs_diff(&plain) > 1e-6);
}

// One layer, one head. The cross-attention query is pinned to a known vector
// u (zero weight, bias u) so a visual row can be placed far along −W_k·u,
// driving its softmax weight to exactly zero. The gradient probe then has to
// find zero sensitivity at that row and nonzero sensitivity everywhere else.
#[test]
fn visual_rows_matter_iff_they_receive_attention() {
    let c = DecoderConfig {
        layers: 1,
        heads: 1,
        ..cfg()
    };
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &c, 6, true).unwrap();
    perturb(&mut store, 6);
    let u: Vec<f64> = random(&[16], 40, 1.0).data().to_vec();
    let qw = store.id("decoder.layer0.cross_attn.q.weight").unwrap();
    *store.value_mut(qw) = Tensor::zeros(&[16, 16]);
    let qb = store.id("decoder.layer0.cross_attn.q.bias").unwrap();
    *store.value_mut(qb) = Tensor::new(&[16], u.clone()).unwrap();
    let kb = store.id("decoder.layer0.cross_attn.k.bias").unwrap();
    *store.value_mut(kb) = Tensor::zeros(&[16]);
    let wk = store.value(store.id("decoder.layer0.cross_attn.k.weight").unwrap()).clone();
    // (W_k u)_i = Σ_j W_k[i, j] u_j
    let wku: Vec<f64> = (0..16).map(|i| (0..16).map(|j| wk.data()[i * 16 + j] * u[j]).sum()).collect();
    let norm2: f64 = wku.iter().map(|x| x * x).sum();
    let mut vis = random(&[5, 16], 41, 1.0).into_data();
    let dead = 2;
    for i in 0..16 {
        vis[dead * 16 + i] = -8000.0 * wku[i] / norm2;
    }
    let vis = Tensor::new(&[5, 16], vis).unwrap();

    let g = Graph::new(&store);
    let v = g.leaf(vis.clone(), true).unwrap();
    let out = dec.forward(&g, &[1, 3, 5], Some(v), AttentionMode::Causal).unwrap();
    let w = g.value(out.cross_weights[0][0]);
    let weights = random(&[3, 11], 42, 1.0);
    let probe = g.constant(weights.clone()).unwrap();
    let loss = g.sum(g.mul(out.logits, probe).unwrap()).unwrap();
    let grads = g.backward(loss).unwrap();
    let grad = grads.get(v).unwrap();
    for d in 0..5 {
        let attended = (0..3).any(|t| w.row(t)[d] > 0.0);
        let sensitive = grad.data()[d * 16..(d + 1) * 16].iter().any(|x| *x != 0.0);
        assert_eq!(attended, d != dead);
        assert_eq!(attended, sensitive, "row {d}");
    }
    // direct perturbation agrees with the gradient probe
    let base = logits(&dec, &store, &[1, 3, 5], &vis);
    for d in 0..5 {
        let mut moved = vis.clone();
        moved.data_mut()[d * 16] += 1e-3;
        let changed = logits(&dec, &store, &[1, 3, 5], &moved).max_abs_diff(&base) > 0.0;
        assert_eq!(changed, d != dead, "row {d}");
    }
}

#[test]
fn visual_features_are_required_exactly_when_cross_attention_exists() {
    let (store, dec, vis) = setup(7);
    let g = Graph::inference(&store);
    assert!(dec.forward(&g, &[1], None, AttentionMode::Causal).is_err());
    let wrong = g.constant(Tensor::zeros(&[3, 8])).unwrap();
    assert!(dec.forward(&g, &[1], Some(wrong), AttentionMode::Causal).is_err());
    let mut lm_store = ParamStore::new();
    let lm = Decoder::new(&mut lm_store, &cfg(), 1, false).unwrap();
    let g = Graph::inference(&lm_store);
    let v = g.constant(vis).unwrap();
    assert!(lm.forward(&g, &[1], Some(v), AttentionMode::Causal).is_err());
    assert!(lm.forward(&g, &[1, 2], None, AttentionMode::Bidirectional).is_ok());
}

#[test]
fn bidirectional_mode_lets_early_positions_see_later_tokens() {
    let mut store = ParamStore::new();
    let lm = Decoder::new(&mut store, &cfg(), 8, false).unwrap();
    let run = |tokens: &[usize]| {
        let g = Graph::inference(&store);
        let out = lm.forward(&g, tokens, None, AttentionMode::Bidirectional).unwrap();
        g.value(out.logits).as_ref().clone()
    };
    let a = run(&[1, 4, 6]);
    let b = run(&[1, 4, 7]);
    assert_ne!(a.row(0), b.row(0));
}
