use cxrlab::config::{CaptionerConfig, DecoderConfig, EncoderConfig};
use cxrlab::corpus::image::PreprocessConfig;
use cxrlab::corpus::synth::{synth_study, Split, SynthConfig};
use cxrlab::corpus::vocab::{Vocabulary, BOS, EOS, MASK, PAD};
use cxrlab::decoder::is_cross_attention_param;
use cxrlab::tensor::{ParamStore, Tensor};
use cxrlab::train::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, PretrainTask};
use cxrlab::train::data::{build_vocabulary, epoch_order, subset_indices, Dataset};
use cxrlab::train::experiment::{subset_experiment, ExperimentData};
use cxrlab::train::finetune::{build_model, finetune, load_model, EarlyStopping, StopDecision, WarmStart};
use cxrlab::train::optim::{param_group, AdamW, AdamWConfig, ParamGroup};
use cxrlab::train::pretrain::{
    majority_floor, mlm_mask, pretrain_decoder_lm, pretrain_decoder_mlm, pretrain_encoder_classification,
    PretrainConfig, CLASSIFIER,
};
use cxrlab::train::TrainConfig;

struct Fixture {
    vocab: Vocabulary,
    train: Dataset,
    val: Dataset,
    enc: EncoderConfig,
    pre: PreprocessConfig,
}

fn fixture(n_train: usize, n_val: usize) -> Fixture {
    let sc = SynthConfig {
        n_train,
        n_val,
        n_test: 10,
        ..SynthConfig::default()
    };
    let studies: Vec<_> = (0..n_train).map(|i| synth_study(&sc, Split::Train, i)).collect();
    let vocab = build_vocabulary(&studies);
    let train = Dataset::from_studies(studies, &vocab);
    let val = Dataset::synthesize(&sc, Split::Val, &vocab);
    let enc = EncoderConfig::desk();
    let mut pre = PreprocessConfig::for_encoder(&enc);
    pre.resize_margin = 8;
    Fixture {
        vocab,
        train,
        val,
        enc,
        pre,
    }
}

fn captioner(f: &Fixture) -> CaptionerConfig {
    CaptionerConfig {
        encoder: f.enc.clone(),
        decoder: DecoderConfig::desk(f.vocab.len()),
        projection_bias: true,
    }
}

fn token_lists(d: &Dataset) -> Vec<Vec<usize>> {
    d.examples.iter().map(|e| e.tokens.clone()).collect()
}

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        task: PretrainTask::None,
        epoch: 3,
        val_cider: Some(0.25),
        seed: 11,
    }
}

#[test]
fn adamw_update_rules() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let before = store.value(w).clone();

    // zero gradient and no decay leave the weights alone
    let mut adam = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    adam.step(&mut store, &[(w, Tensor::zeros(&[3]))], |_| 0.1);
    assert_eq!(store.value(w), &before);

    // the bias-corrected first step is −lr·g/(|g| + eps)
    let g = [0.3, -2.0, 1e-3];
    let mut adam = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    adam.step(&mut store, &[(w, Tensor::new(&[3], g.to_vec()).unwrap())], |_| 0.01);
    for k in 0..3 {
        let expected = before.data()[k] - 0.01 * g[k] / (g[k].abs() + 1e-8);
        assert!((store.value(w).data()[k] - expected).abs() < 1e-12);
    }

    // decay alone shrinks multiplicatively
    *store.value_mut(w) = before.clone();
    let mut adam = AdamW::new(AdamWConfig {
        weight_decay: 0.5,
        ..AdamWConfig::default()
    });
    adam.step(&mut store, &[(w, Tensor::zeros(&[3]))], |_| 0.1);
    for k in 0..3 {
        assert!((store.value(w).data()[k] - before.data()[k] * 0.95).abs() < 1e-15);
    }
}

#[test]
fn adamw_descends_a_quadratic_bowl() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[1], vec![1.0]).unwrap());
    let mut adam = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    for _ in 0..200 {
        let x = store.value(w).data()[0];
        adam.step(&mut store, &[(w, Tensor::new(&[1], vec![2.0 * x]).unwrap())], |_| 0.05);
    }
    assert!(store.value(w).data()[0].abs() < 1e-3, "{}", store.value(w).data()[0]);
}

#[test]
fn parameter_groups_split_on_the_encoder_prefix() {
    assert_eq!(param_group("encoder.stage0.embed.weight"), ParamGroup::Encoder);
    assert_eq!(param_group("projection.weight"), ParamGroup::Other);
    assert_eq!(param_group("decoder.layer0.cross_attn.q.weight"), ParamGroup::Other);
}

#[test]
fn checkpoints_round_trip_and_refuse_mismatches() {
    let mut store = ParamStore::new();
    store.add("a.w", Tensor::new(&[2, 2], vec![1.0, -2.5, 0.125, 3.0]).unwrap());
    store.add("a.b", Tensor::new(&[2], vec![0.0, 7.0]).unwrap());
    let ck = Checkpoint::capture(&store, "fp-1", meta(), |_| true);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.meta, meta());
    assert_eq!(back.fingerprint, "fp-1");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(CheckpointError::Malformed(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());

    let mut target = ParamStore::new();
    let w = target.add("a.w", Tensor::zeros(&[2, 2]));
    target.add("a.b", Tensor::zeros(&[2]));
    assert!(matches!(
        ck.apply(&mut target, "fp-2"),
        Err(CheckpointError::Fingerprint { .. })
    ));
    assert_eq!(target.value(w).data(), &[0.0; 4]);
    assert_eq!(ck.apply(&mut target, "fp-1").unwrap(), 2);
    assert_eq!(target.value(w).data(), &[1.0, -2.5, 0.125, 3.0]);

    let mut other = ParamStore::new();
    other.add("a.w", Tensor::zeros(&[2, 3]));
    other.add("c", Tensor::zeros(&[1]));
    match ck.apply(&mut other, "fp-1") {
        Err(CheckpointError::Incompatible(diff)) => {
            assert_eq!(diff.unexpected, vec!["a.b".to_string()]);
            assert_eq!(diff.shape_mismatch.len(), 1);
            assert_eq!(diff.shape_mismatch[0].0, "a.w");
            assert!(diff.to_string().contains("a.b"));
        }
        other => panic!("expected incompatibility, got {other:?}"),
    }
}

#[test]
fn classification_pretraining_learns_and_drops_the_head() {
    let f = fixture(500, 100);
    let pc = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let out = pretrain_encoder_classification(&f.enc, &f.train, &f.val, &f.pre, &pc).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(out.checkpoint.names().all(|n| n.starts_with("encoder.")));
    assert!(!out.checkpoint.names().any(|n| n.starts_with(CLASSIFIER)));
    assert_eq!(out.checkpoint.meta.task, PretrainTask::Classification);
    assert_eq!(out.checkpoint.fingerprint, f.enc.fingerprint());
}

#[test]
fn classification_pretraining_beats_the_majority_floor() {
    let f = fixture(1000, 150);
    let pc = PretrainConfig {
        epochs: 6,
        ..PretrainConfig::default()
    };
    let out = pretrain_encoder_classification(&f.enc, &f.train, &f.val, &f.pre, &pc).unwrap();
    let (acc, floor) = (out.history.last().unwrap().val_score, majority_floor(&f.val));
    assert!(acc > floor, "{acc} vs {floor}");
}

#[test]
fn lm_pretraining_lowers_perplexity_without_cross_attention() {
    let f = fixture(300, 60);
    let dec = DecoderConfig::desk(f.vocab.len());
    let pc = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let out = pretrain_decoder_lm(&dec, &token_lists(&f.train), &token_lists(&f.val), &pc).unwrap();
    let ppl: Vec<f64> = out.history.iter().map(|h| h.val_score).collect();
    assert!(ppl.windows(2).all(|w| w[1] < w[0]), "{ppl:?}");
    assert!(ppl[0] < f.vocab.len() as f64);
    assert!(!out.checkpoint.names().any(is_cross_attention_param));
    assert!(out.checkpoint.names().all(|n| n.starts_with("decoder.")));
    assert_eq!(out.checkpoint.meta.task, PretrainTask::Lm);
}

#[test]
fn mlm_masking_rules() {
    let tokens = [10, 11, 12, 13, 14, 15];
    let (inputs, targets) = mlm_mask(&tokens, 0.0, 3);
    assert_eq!(inputs, [BOS, 10, 11, 12, 13, 14, 15, EOS]);
    assert!(targets.iter().all(|t| *t == PAD));
    let (inputs, targets) = mlm_mask(&tokens, 1.0, 3);
    assert_eq!((inputs[0], inputs[7]), (BOS, EOS));
    assert!(inputs[1..7].iter().all(|t| *t == MASK));
    assert_eq!(&targets[1..7], &tokens);
    assert_eq!((targets[0], targets[7]), (PAD, PAD));
    let (a, _) = mlm_mask(&tokens, 0.5, 9);
    let (b, _) = mlm_mask(&tokens, 0.5, 9);
    assert_eq!(a, b);
}

#[test]
fn mlm_pretraining_beats_chance_and_loads_into_the_causal_decoder() {
    let f = fixture(300, 60);
    let dec = DecoderConfig::desk(f.vocab.len());
    let (train, val) = (token_lists(&f.train), token_lists(&f.val));
    let none = pretrain_decoder_mlm(
        &dec,
        &train[..20],
        &val[..10],
        &PretrainConfig {
            epochs: 1,
            mask_rate: 0.0,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(none.history[0].train_loss, 0.0);
    assert_eq!(none.history[0].val_loss, 0.0);

    let pc = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let out = pretrain_decoder_mlm(&dec, &train, &val, &pc).unwrap();
    let acc = out.history.last().unwrap().val_score;
    assert!(acc > 1.0 / f.vocab.len() as f64, "{acc}");
    assert_eq!(out.checkpoint.meta.task, PretrainTask::Mlm);

    let cfg = captioner(&f);
    let warm = WarmStart {
        encoder: None,
        decoder: Some(out.checkpoint.clone()),
    };
    let (store, _) = build_model(&cfg, &warm, 5).unwrap();
    assert!(out.checkpoint.diff(&store).is_empty());
    for e in &out.checkpoint.entries {
        let id = store.id(&e.name).unwrap();
        let loaded: Vec<f32> = store.value(id).data().iter().map(|x| *x as f32).collect();
        assert_eq!(loaded, e.values, "{}", e.name);
    }
}

#[test]
fn warm_start_touches_only_the_pretrained_half() {
    let f = fixture(60, 10);
    let cfg = captioner(&f);
    let (cold, _) = build_model(&cfg, &WarmStart::default(), 7).unwrap();

    let mut enc_store = ParamStore::new();
    cxrlab::encoder::Encoder::new(&mut enc_store, &cfg.encoder, 99).unwrap();
    let enc_ck = Checkpoint::capture(&enc_store, &cfg.encoder.fingerprint(), meta(), |_| true);
    let mut dec_store = ParamStore::new();
    cxrlab::decoder::Decoder::new(&mut dec_store, &cfg.decoder, 98, false).unwrap();
    let dec_ck = Checkpoint::capture(&dec_store, &cfg.decoder.fingerprint(), meta(), |_| true);

    let warm = WarmStart {
        encoder: Some(enc_ck.clone()),
        decoder: Some(dec_ck.clone()),
    };
    let (store, _) = build_model(&cfg, &warm, 7).unwrap();
    for (id, name, value) in store.iter() {
        let from = enc_ck.entry(name).or_else(|| dec_ck.entry(name));
        match from {
            Some(e) => {
                let v: Vec<f32> = value.data().iter().map(|x| *x as f32).collect();
                assert_eq!(v, e.values, "{name}");
            }
            None => {
                assert!(name.starts_with("projection") || is_cross_attention_param(name), "{name}");
                assert_eq!(value, cold.value(id), "{name}");
            }
        }
    }

    // checkpoints for the wrong half or with a stale fingerprint are refused
    let swapped = WarmStart {
        encoder: Some(dec_ck.clone()),
        decoder: None,
    };
    assert!(build_model(&cfg, &swapped, 7).is_err());
    let cross = Checkpoint::capture(&cold, &cfg.decoder.fingerprint(), meta(), |n| n.starts_with("decoder."));
    let with_cross = WarmStart {
        encoder: None,
        decoder: Some(cross),
    };
    assert!(build_model(&cfg, &with_cross, 7).is_err());
    let mut small = cfg.decoder.clone();
    small.ffn += 2;
    let stale = Checkpoint {
        fingerprint: small.fingerprint(),
        ..dec_ck
    };
    let stale = WarmStart {
        encoder: None,
        decoder: Some(stale),
    };
    assert!(build_model(&cfg, &stale, 7).is_err());
}

#[test]
fn early_stopping_waits_out_the_patience() {
    let mut s = EarlyStopping::new(3, 1e-4);
    let values = [0.1, 0.2, 0.3, 0.3, 0.30005, 0.29];
    let decisions: Vec<StopDecision> = values.iter().enumerate().map(|(e, v)| s.update(e + 1, *v)).collect();
    use StopDecision::*;
    assert_eq!(decisions, [Improved, Improved, Improved, Waiting, Waiting, Stop]);
    assert_eq!(s.best(), Some((3, 0.3)));

    let mut s = EarlyStopping::new(2, 0.0);
    assert_eq!(s.update(1, 0.5), Improved);
    assert_eq!(s.update(2, 0.4), Waiting);
    assert_eq!(s.update(3, 0.6), Improved);
    assert_eq!(s.update(4, 0.6), Waiting);
    assert_eq!(s.update(5, 0.6), Stop);
}

#[test]
fn finetuning_keeps_the_best_epoch_and_is_deterministic() {
    let f = fixture(48, 12);
    let cfg = captioner(&f);
    let tc = TrainConfig {
        max_epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = finetune(&cfg, &WarmStart::default(), &f.train, &f.val, &f.pre, &f.vocab, &tc).unwrap();
    let b = finetune(&cfg, &WarmStart::default(), &f.train, &f.val, &f.pre, &f.vocab, &tc).unwrap();
    assert_eq!(a.history.len(), 3);
    assert_eq!(a.history[0].train_loss, b.history[0].train_loss);
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());

    let max = a.history.iter().map(|h| h.val_cider).fold(f64::MIN, f64::max);
    assert_eq!(a.best_val_cider, max);
    let first = a.history.iter().find(|h| h.val_cider == max).unwrap().epoch;
    assert_eq!(a.best_epoch, first);
    assert_eq!(a.best.meta.epoch as usize, first);
    assert_eq!(a.best.meta.val_cider, Some(max));
    assert_eq!(a.best.meta.seed, 4);

    let (store, model) = load_model(&cfg, &a.best).unwrap();
    assert_eq!(store.len(), a.best.entries.len());
    assert_eq!(model.config(), &cfg);

    let other = finetune(
        &cfg,
        &WarmStart::default(),
        &f.train,
        &f.val,
        &f.pre,
        &f.vocab,
        &TrainConfig { seed: 5, ..tc },
    )
    .unwrap();
    assert_ne!(other.history[0].train_loss, a.history[0].train_loss);
}

#[test]
fn subset_sampling_and_experiment_rows() {
    assert_eq!(subset_indices(10, 10, 3), (0..10).collect::<Vec<_>>());
    assert_eq!(subset_indices(10, 20, 3), (0..10).collect::<Vec<_>>());
    let s = subset_indices(100, 25, 3);
    assert_eq!(s, subset_indices(100, 25, 3));
    assert_eq!(s.len(), 25);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert_ne!(s, subset_indices(100, 25, 4));
    let mut order = epoch_order(30, 1, 2);
    assert_ne!(order, epoch_order(30, 1, 3));
    order.sort_unstable();
    assert_eq!(order, (0..30).collect::<Vec<_>>());

    let f = fixture(24, 6);
    let cfg = captioner(&f);
    let test = f.val.subset(&[0, 1, 2, 3]);
    let data = ExperimentData {
        cfg: &cfg,
        train: &f.train,
        val: &f.val,
        pre: &f.pre,
        vocab: &f.vocab,
    };
    let tc = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let rows = subset_experiment(&data, &WarmStart::default(), &test, &[8, 24], 2, 7, &tc).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.size).collect::<Vec<_>>(), [8, 8, 24, 24]);
    assert_eq!(rows.iter().map(|r| r.run).collect::<Vec<_>>(), [0, 1, 0, 1]);
    assert!(rows.iter().all(|r| r.test_scores.len() == 4));
    assert!(rows.iter().all(|r| r.hypotheses.len() == 4));
}

#[test]
fn configured_defaults_match_the_protocol() {
    let tc = TrainConfig::default();
    assert_eq!((tc.lr_encoder, tc.lr_other), (1e-5, 1e-4));
    assert_eq!(tc.batch_size, 16);
    assert_eq!((tc.patience, tc.min_delta), (10, 1e-4));
    assert_eq!(cxrlab::train::MONITOR, "val_cider");
    assert_eq!((tc.test_beam, tc.val_beam), (4, 1));
    assert_eq!(cxrlab::corpus::text::MAX_REPORT_WORDS, 60);
    assert_eq!(cxrlab::corpus::vocab::MIN_FREQUENCY, 3);
    let pre = PreprocessConfig::for_encoder(&EncoderConfig::cvt_21());
    assert_eq!(pre.resize_margin, 64);
    assert_eq!(pre.max_rotation_deg, 5.0);
    assert_eq!(cxrlab::stats::BOOTSTRAP_RESAMPLES, 1000);
    assert_eq!(cxrlab::stats::BOOTSTRAP_LEVEL, 0.95);
}
