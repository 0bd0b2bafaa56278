use std::collections::HashSet;
use std::fs;
use std::path::Path;

use cxrlab::corpus::grammar::{max_report_words, template, to_raw, NO_ACUTE_FINDINGS, PHRASES};
use cxrlab::corpus::image::{
    crop, preprocess_image, resize_bilinear, resize_shorter_side, rotate, standardize, PreprocessConfig, Raster,
};
use cxrlab::corpus::observations::{Annotation, ObsClass, NUM_OBSERVATIONS};
use cxrlab::corpus::synth::{load_split, read_records, sample_annotation, write_dataset, ImbalanceProfile, Split, SynthConfig};
use cxrlab::corpus::text::{preprocess_report, MAX_REPORT_WORDS};
use cxrlab::corpus::vocab::{VocabError, Vocabulary, BOS, EOS, MASK, PAD, UNK};
use cxrlab::metrics::ce::extract_observations;
use cxrlab::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_annotation(rng: &mut ChaCha8Rng) -> Annotation {
    let mut a = Annotation::default();
    for c in a.0.iter_mut() {
        *c = ObsClass::ALL[rng.random_range(0..4)];
    }
    a
}

#[test]
fn nothing_mentioned_gives_the_fixed_template() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(template(&Annotation::default(), &mut rng), NO_ACUTE_FINDINGS);
    assert_eq!(to_raw(NO_ACUTE_FINDINGS), "No acute findings.");
    assert!(extract_observations(NO_ACUTE_FINDINGS).is_all_no_mention());
}

#[test]
fn phrasings_are_distinct_and_reports_fit_the_word_cap() {
    let mut seen = HashSet::new();
    for p in PHRASES.iter().flatten().flatten() {
        assert!(seen.insert(*p), "duplicate phrasing {p}");
        assert_eq!(preprocess_report(p), *p);
    }
    assert!(!seen.contains(NO_ACUTE_FINDINGS.trim_end_matches(" .")));
    assert!(max_report_words() <= MAX_REPORT_WORDS);
}

// The labeler must recover every class from the raw free-text rendering of a
// templated report, for sampled and for arbitrary annotations.
#[test]
fn labeler_inverts_the_grammar_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let a = if i % 2 == 0 {
            sample_annotation(&mut rng, ImbalanceProfile::Skewed)
        } else {
            random_annotation(&mut rng)
        };
        let raw = to_raw(&template(&a, &mut rng));
        let back = extract_observations(&preprocess_report(&raw));
        assert_eq!(back, a, "{raw}");
        assert_eq!(back.binarize(), a.binarize());
    }
}

#[test]
fn annotation_codes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_annotation(&mut rng);
    let s = a.to_string();
    assert_eq!(s.len(), NUM_OBSERVATIONS);
    assert_eq!(s.parse::<Annotation>().unwrap(), a);
    assert!("PPP".parse::<Annotation>().is_err());
    assert!("X".repeat(14).parse::<Annotation>().is_err());
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<Annotation>(&json).unwrap(), a);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small(seed: u64, views: usize) -> SynthConfig {
    SynthConfig {
        n_train: 12,
        n_val: 4,
        n_test: 5,
        views,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), &small(7, 2)).unwrap();
    write_dataset(b.path(), &small(7, 2)).unwrap();
    write_dataset(c.path(), &small(8, 2)).unwrap();
    let fa = files(a.path());
    assert_eq!(fa.len(), 1 + 3 + 2 * (12 + 4 + 5));
    assert_eq!(fa, files(b.path()));
    assert_ne!(fa, files(c.path()));
}

#[test]
fn splits_are_disjoint_and_records_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(3, 1);
    write_dataset(dir.path(), &cfg).unwrap();
    let mut ids = HashSet::new();
    for split in Split::ALL {
        let studies = load_split(dir.path(), split).unwrap();
        assert_eq!(studies.len(), cfg.size(split));
        for s in studies {
            assert!(ids.insert(s.record.id.clone()));
            assert_eq!(s.images.len(), 1);
            assert_eq!((s.images[0].width, s.images[0].height), (96, 96));
            let labels = extract_observations(&preprocess_report(&s.record.report));
            assert_eq!(labels, s.record.annotation);
        }
    }
    assert_eq!(read_records(dir.path(), Split::Val).unwrap()[0].id, "study1000000");
}

#[test]
fn invalid_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(0, 1);
    cfg.n_val = 0;
    assert!(write_dataset(dir.path(), &cfg).is_err());
    cfg = small(0, 3);
    assert!(write_dataset(dir.path(), &cfg).is_err());
}

#[test]
fn skewed_profile_is_imbalanced_and_normal_studies_occur() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut positives = [0usize; NUM_OBSERVATIONS];
    let mut empty = 0;
    for _ in 0..4000 {
        let a = sample_annotation(&mut rng, ImbalanceProfile::Skewed);
        empty += usize::from(a.is_all_no_mention());
        for (k, p) in a.binarize().iter().enumerate() {
            positives[k] += usize::from(*p);
        }
    }
    assert!(empty > 100);
    // support devices frequent, pleural other rare
    assert!(positives[12] > 5 * positives[10]);
}

#[test]
fn ppm_round_trip_and_layout() {
    let r = Raster::from_gray(3, 2, &[0.0, 0.5, 1.0, 0.25, 0.75, 2.0]);
    let mut bytes = Vec::new();
    r.write_ppm(&mut bytes).unwrap();
    assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
    assert_eq!(bytes.len(), 11 + 18);
    assert_eq!(&bytes[11..14], &[0, 0, 0]);
    assert_eq!(&bytes[14..17], &[128, 128, 128]);
    assert_eq!(Raster::read_ppm(&bytes[..]).unwrap(), r);
    let t = r.to_tensor();
    assert_eq!(t.shape(), &[3, 2, 3]);
    assert_eq!(t.data()[2], 1.0);
    assert!(Raster::read_ppm(&b"P5\n1 1\n255\n\0"[..]).is_err());
    assert!(Raster::read_ppm(&b"P6\n2 2\n255\n\0\0"[..]).is_err());
}

fn preprocess_cfg(width: usize) -> PreprocessConfig {
    PreprocessConfig {
        width,
        resize_margin: 64,
        max_rotation_deg: 5.0,
        channel_mean: vec![0.4, 0.5, 0.6],
        channel_std: vec![0.2, 0.25, 0.3],
    }
}

fn noise_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[3, h, w], (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn evaluation_path_on_a_resized_square_is_a_center_crop() {
    let cfg = preprocess_cfg(32);
    let img = noise_image(96, 96, 1);
    let out = preprocess_image(&img, &cfg, false, 0);
    let expected = standardize(&crop(&img, 32, 32, 32), &cfg.channel_mean, &cfg.channel_std);
    assert_eq!(out, expected);
    assert_eq!(out, preprocess_image(&img, &cfg, false, 99));
}

#[test]
fn training_path_is_seeded() {
    let cfg = preprocess_cfg(32);
    let img = noise_image(80, 120, 2);
    let a = preprocess_image(&img, &cfg, true, 5);
    assert_eq!(a.shape(), &[3, 32, 32]);
    assert_eq!(a, preprocess_image(&img, &cfg, true, 5));
    assert_ne!(a, preprocess_image(&img, &cfg, true, 6));
    assert_ne!(a, preprocess_image(&img, &cfg, false, 5));
}

#[test]
fn shorter_side_resize_keeps_aspect_ratio() {
    let img = noise_image(50, 100, 3);
    assert_eq!(resize_shorter_side(&img, 96).shape(), &[3, 96, 192]);
    let img = noise_image(90, 60, 3);
    assert_eq!(resize_shorter_side(&img, 40).shape(), &[3, 60, 40]);
}

// f(x, y) = a·x + b·y + c sampled at pixel centers; halving with half-pixel
// centers puts output pixel i at source coordinate 2i + 0.5, so the result is
// the ramp evaluated there.
#[test]
fn halving_a_linear_ramp_is_exact() {
    let (a, b, c) = (0.013, -0.007, 0.3);
    let (h, w) = (40, 64);
    let mut data = Vec::new();
    for _ in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data.push(a * x as f64 + b * y as f64 + c);
            }
        }
    }
    let img = Tensor::new(&[3, h, w], data).unwrap();
    let out = resize_bilinear(&img, h / 2, w / 2);
    for ch in 0..3 {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let expected = a * (2.0 * x as f64 + 0.5) + b * (2.0 * y as f64 + 0.5) + c;
                let got = out.data()[ch * (h / 2) * (w / 2) + y * (w / 2) + x];
                assert!((got - expected).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn rotation_matches_analytic_cases() {
    let img = noise_image(5, 5, 4);
    let fill = [0.4, 0.5, 0.6];
    assert!(rotate(&img, 0.0, &fill).max_abs_diff(&img) < 1e-15);
    // 90°: out(y, x) = in(x, 4 − y)
    let r = rotate(&img, 90.0, &fill);
    for ch in 0..3 {
        for y in 0..5 {
            for x in 0..5 {
                let got = r.data()[ch * 25 + y * 5 + x];
                let want = img.data()[ch * 25 + x * 5 + (4 - y)];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
    // corners of a 45° rotation fall outside the source and take the fill
    let r = rotate(&noise_image(9, 9, 5), 45.0, &fill);
    for ch in 0..3 {
        assert!((r.data()[ch * 81] - fill[ch]).abs() < 1e-12);
    }
}

#[test]
fn report_preprocessing_rules() {
    assert_eq!(preprocess_report("The Heart IS Enlarged."), "the heart is enlarged .");
    assert_eq!(preprocess_report("  Tubes:\tin place!\nNo  effusion. "), "tubes in place no effusion .");
    assert_eq!(preprocess_report("?!"), "");
    let long: Vec<String> = (0..61).map(|i| format!("w{i}")).collect();
    let out = preprocess_report(&long.join(" "));
    assert_eq!(out.split_whitespace().count(), 60);
    assert!(out.ends_with("w59"));
    let with_periods = (0..61).map(|i| format!("w{i}.")).collect::<Vec<_>>().join(" ");
    let out = preprocess_report(&with_periods);
    assert_eq!(out.split_whitespace().filter(|t| *t != ".").count(), 60);
}

proptest! {
    #[test]
    fn report_preprocessing_is_idempotent(s in "[ -~\\t\\nÄé]{0,400}") {
        let once = preprocess_report(&s);
        prop_assert_eq!(preprocess_report(&once), once.clone());
        prop_assert!(once.split_whitespace().filter(|t| *t != ".").count() <= MAX_REPORT_WORDS);
        prop_assert!(once.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' ' || c == '.'));
    }
}

#[test]
fn vocabulary_rules() {
    let corpus = ["a b c a .", "a b d .", "b a e e e ."];
    let v = Vocabulary::build(corpus, 3);
    // a ×4, b ×3, . ×3, e ×3; c and d below threshold
    assert_eq!(v.word(5), Some("a"));
    assert_eq!(v.len(), 5 + 4);
    assert_eq!(v.id("c"), None);
    assert_eq!(v.tokenize("a c e"), vec![5, UNK, v.id("e").unwrap()]);
    assert_eq!(v.count("a"), Some(4));
    let ids = v.tokenize("b a . e");
    assert!(!ids.contains(&BOS) && !ids.contains(&EOS));
    assert_eq!(v.detokenize(&ids).unwrap(), "b a . e");
    assert_eq!(v.detokenize(&[99]), Err(VocabError::UnknownId { id: 99, size: 9 }));
    assert_eq!(Vocabulary::build(corpus, 3), v);
    assert_eq!((PAD, BOS, EOS, UNK, MASK), (0, 1, 2, 3, 4));
    let json = serde_json::to_string(&v).unwrap();
    assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    assert!(serde_json::from_str::<Vocabulary>(r#"{"words":["x"],"counts":[1]}"#).is_err());
}

#[test]
fn word_seen_twice_is_unknown() {
    let v = Vocabulary::build(["rare rare common common common"], 3);
    assert_eq!(v.tokenize("rare common"), vec![UNK, v.id("common").unwrap()]);
}
