use cxrlab::config::{EncoderConfig, EncoderVariant, StageConfig};
use cxrlab::encoder::Encoder;
use cxrlab::error::ModelError;
use cxrlab::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(cfg: &EncoderConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.image_width;
    let data = (0..cfg.channels * w * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[cfg.channels, w, w], data).unwrap()
}

fn features(cfg: &EncoderConfig, seed: u64, img: &Tensor) -> Tensor {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, cfg, seed).unwrap();
    let g = Graph::inference(&store);
    let f = enc.encode(&g, img).unwrap();
    g.value(f.grid).as_ref().clone()
}

fn stage(kernel: usize, stride: usize, padding: usize, dim: usize, depth: usize, heads: usize) -> StageConfig {
    StageConfig {
        kernel,
        stride,
        padding,
        dim,
        depth,
        heads,
        mlp_ratio: 2,
        kv_stride: 1,
    }
}

#[test]
fn every_variant_yields_sixteen_positions_of_width_96() {
    for cfg in [EncoderConfig::cvt_mini(), EncoderConfig::vit_mini(), EncoderConfig::cnn_mini()] {
        let f = features(&cfg, 3, &image(&cfg, 1));
        assert_eq!(f.shape(), &[16, 96], "{:?}", cfg.variant);
        assert!(f.is_finite());
    }
}

#[test]
fn first_stage_embedding_maps_64_to_16() {
    let cfg = EncoderConfig::cvt_mini();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, 0).unwrap();
    let g = Graph::inference(&store);
    let x = g.constant(image(&cfg, 2)).unwrap();
    let (tokens, grid) = enc.patch_embed(&g, x, 0).unwrap();
    assert_eq!(grid, (16, 16));
    assert_eq!(g.shape(tokens), vec![256, 32]);
}

#[test]
fn encoding_is_deterministic_in_the_seed() {
    let cfg = EncoderConfig::cvt_mini();
    let img = image(&cfg, 5);
    let a = features(&cfg, 11, &img);
    let b = features(&cfg, 11, &img);
    assert_eq!(a.data(), b.data());
    let c = features(&cfg, 12, &img);
    assert!(a.max_abs_diff(&c) > 1e-6);
}

#[test]
fn wrong_image_size_is_an_error() {
    let cfg = EncoderConfig::cvt_mini();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, 0).unwrap();
    let g = Graph::inference(&store);
    let err = enc.encode(&g, &Tensor::zeros(&[3, 60, 60])).unwrap_err();
    match err {
        ModelError::InputShape { expected, actual } => {
            assert_eq!(expected, vec![3, 64, 64]);
            assert_eq!(actual, vec![3, 60, 60]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = EncoderConfig::cvt_mini();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, 4).unwrap();
    let g = Graph::inference(&store);
    let mut weights = Vec::new();
    enc.encode_traced(&g, &image(&cfg, 9), &mut weights).unwrap();
    // stage depths 1, 2, 2 with heads 1, 2, 3
    assert_eq!(weights.len(), 1 + 2 * 2 + 2 * 3);
    for w in weights {
        let w = g.value(w);
        let (rows, cols) = w.dims2().unwrap();
        for r in 0..rows {
            let s: f64 = w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.row(r).iter().all(|x| *x >= 0.0));
        }
        assert_eq!(rows, cols);
    }
}

#[test]
fn single_position_grid_attends_to_itself() {
    let cfg = EncoderConfig {
        image_width: 4,
        stages: vec![stage(7, 4, 3, 8, 1, 2)],
        ..EncoderConfig::cvt_mini()
    };
    cfg.validate().unwrap();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, 1).unwrap();
    let g = Graph::inference(&store);
    let mut weights = Vec::new();
    let f = enc.encode_traced(&g, &image(&cfg, 0), &mut weights).unwrap();
    assert_eq!((f.rows, f.cols), (1, 1));
    assert_eq!(weights.len(), 2);
    for w in weights {
        assert_eq!(g.value(w).data(), &[1.0]);
    }
}

// With every depthwise kernel set to a centered delta, the convolutional
// projection reduces to the linear one; copying the shared parameters by name
// into a linear-projection encoder (with zero positions) must then reproduce
// the features exactly.
#[test]
fn delta_depthwise_kernels_reduce_to_linear_projections() {
    let stages = vec![stage(3, 2, 1, 8, 1, 2), stage(3, 2, 1, 12, 2, 3)];
    let cvt = EncoderConfig {
        image_width: 16,
        stages: stages.clone(),
        ..EncoderConfig::cvt_mini()
    };
    let vit = EncoderConfig {
        variant: EncoderVariant::VitMini,
        ..cvt.clone()
    };
    let img = image(&cvt, 3);

    let mut cs = ParamStore::new();
    let ce = Encoder::new(&mut cs, &cvt, 21).unwrap();
    let ids: Vec<_> = cs.ids().collect();
    for id in ids {
        if cs.name(id).ends_with(".depthwise") {
            let t = cs.value_mut(id);
            let dim = t.shape()[0];
            let mut d = vec![0.0; dim * 9];
            for c in 0..dim {
                d[c * 9 + 4] = 1.0;
            }
            *t = Tensor::new(&[dim, 1, 3, 3], d).unwrap();
        }
    }
    let mut vs = ParamStore::new();
    let ve = Encoder::new(&mut vs, &vit, 99).unwrap();
    let ids: Vec<_> = vs.ids().collect();
    let mut copied = 0;
    for id in ids {
        let name = vs.name(id).to_string();
        if name.ends_with(".position") {
            let shape = vs.value(id).shape().to_vec();
            *vs.value_mut(id) = Tensor::zeros(&shape);
        } else {
            let src = cs.id(&name).unwrap_or_else(|| panic!("missing {name}"));
            *vs.value_mut(id) = cs.value(src).clone();
            copied += 1;
        }
    }
    assert!(copied > 20);

    let gc = Graph::inference(&cs);
    let a = gc.value(ce.encode(&gc, &img).unwrap().grid);
    let gv = Graph::inference(&vs);
    let b = gv.value(ve.encode(&gv, &img).unwrap().grid);
    assert!(a.max_abs_diff(&b) < 1e-9, "diff {}", a.max_abs_diff(&b));
}

#[test]
fn embedding_kernel_gradient_matches_finite_differences() {
    let cfg = EncoderConfig {
        image_width: 8,
        stages: vec![stage(3, 2, 1, 4, 1, 2)],
        ..EncoderConfig::cvt_mini()
    };
    let img = image(&cfg, 8);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, 5).unwrap();
    let kernel = store.id("encoder.stage0.embed.weight").unwrap();
    let weights: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..16 * 4).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let loss = |store: &ParamStore| -> f64 {
        let g = Graph::inference(store);
        let f = enc.encode(&g, &img).unwrap();
        g.value(f.grid).data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };

    let analytic = {
        let g = Graph::new(&store);
        let f = enc.encode(&g, &img).unwrap();
        let w = g.constant(Tensor::new(&[16, 4], weights.clone()).unwrap()).unwrap();
        let l = g.sum(g.mul(f.grid, w).unwrap()).unwrap();
        let grads = g.backward(l).unwrap();
        grads.params().into_iter().find(|(id, _)| *id == kernel).unwrap().1
    };

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let i = rng.random_range(0..analytic.len());
        let orig = store.value(kernel).data()[i];
        store.value_mut(kernel).data_mut()[i] = orig + h;
        let up = loss(&store);
        store.value_mut(kernel).data_mut()[i] = orig - h;
        let down = loss(&store);
        store.value_mut(kernel).data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-4 || (a - fd).abs() < 1e-9, "index {i}: analytic {a} fd {fd}");
    }
}
