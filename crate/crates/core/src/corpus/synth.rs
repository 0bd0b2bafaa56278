//! Synthetic studies: a random annotation, images with one glyph per positive
//! or uncertain observation on a noisy background, and a templated report.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grammar::{template, to_raw};
use super::image::Raster;
use super::observations::{Annotation, ObsClass, NO_FINDING, NUM_OBSERVATIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImbalanceProfile {
    /// Frequent and rare observations, loosely following a clinical corpus.
    Skewed,
    /// The same class probabilities for every observation.
    Balanced,
}

/// (positive, negative, uncertain) probabilities per observation except
/// "no finding"; the remainder is no-mention.
const SKEWED: [(f64, f64, f64); NUM_OBSERVATIONS - 1] = [
    (0.05, 0.10, 0.03),
    (0.30, 0.15, 0.05),
    (0.30, 0.10, 0.05),
    (0.05, 0.05, 0.03),
    (0.20, 0.15, 0.05),
    (0.06, 0.30, 0.04),
    (0.10, 0.20, 0.05),
    (0.25, 0.05, 0.05),
    (0.08, 0.40, 0.03),
    (0.30, 0.30, 0.05),
    (0.03, 0.05, 0.02),
    (0.04, 0.10, 0.02),
    (0.35, 0.05, 0.02),
];

const BALANCED: (f64, f64, f64) = (0.3, 0.2, 0.1);

/// Share of studies drawn as normal: nothing mentioned except, sometimes,
/// "no finding".
const NORMAL_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Splits draw ids from disjoint ranges.
    fn id_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Images per study (1 or 2).
    pub views: usize,
    pub seed: u64,
    /// Side of the square source images.
    pub image_size: usize,
    pub profile: ImbalanceProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 300,
            n_test: 500,
            views: 1,
            seed: 0,
            image_size: 96,
            profile: ImbalanceProfile::Skewed,
        }
    }
}

impl SynthConfig {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err("every split needs at least one study".into());
        }
        if !(1..=2).contains(&self.views) {
            return Err(format!("views must be 1 or 2, got {}", self.views));
        }
        if self.image_size < 48 {
            return Err(format!("image size {} below the 48 pixel minimum", self.image_size));
        }
        Ok(())
    }
}

/// One study as stored in `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub id: String,
    /// Image file names relative to the split directory.
    pub images: Vec<String>,
    /// Free-text report (not yet preprocessed).
    pub report: String,
    /// Fourteen class codes (P, N, U, M) in observation order.
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub record: StudyRecord,
    pub images: Vec<Raster>,
}

pub fn sample_annotation<R: Rng + ?Sized>(rng: &mut R, profile: ImbalanceProfile) -> Annotation {
    let mut a = Annotation::default();
    if rng.random_bool(NORMAL_RATE) {
        if rng.random_bool(0.6) {
            a.0[NO_FINDING] = ObsClass::Positive;
        }
        return a;
    }
    for obs in 0..NO_FINDING {
        let (p, n, u) = match profile {
            ImbalanceProfile::Skewed => SKEWED[obs],
            ImbalanceProfile::Balanced => BALANCED,
        };
        let x: f64 = rng.random();
        a.0[obs] = if x < p {
            ObsClass::Positive
        } else if x < p + n {
            ObsClass::Negative
        } else if x < p + n + u {
            ObsClass::Uncertain
        } else {
            ObsClass::NoMention
        };
    }
    if !a.0[..NO_FINDING].iter().any(|c| c.is_positive()) && rng.random_bool(0.7) {
        a.0[NO_FINDING] = ObsClass::Positive;
    }
    a
}

/// Grid cell (row, col) of an observation's glyph in the central 4×4 layout.
pub fn glyph_cell(obs: usize) -> (usize, usize) {
    (obs / 4, obs % 4)
}

/// Renders one view. Glyphs sit in the central half of the image: a filled
/// disk for positive, a ring for uncertain.
pub fn render_view<R: Rng + ?Sized>(annotation: &Annotation, size: usize, rng: &mut R) -> Raster {
    let s = size as f64;
    let cell = s / 8.0;
    let origin = s / 4.0;
    let (jx, jy) = (rng.random_range(-1.0..=1.0) * cell * 0.1, rng.random_range(-1.0..=1.0) * cell * 0.1);
    let noise = Normal::new(0.0, 0.04).expect("finite");
    let mut gray = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s - 0.5;
            let v = (y as f64 + 0.5) / s - 0.5;
            let vignette = 0.15 * (1.0 - 2.0 * (u * u + v * v));
            let ribs = 0.03 * (v * 40.0).sin();
            gray[y * size + x] = 0.25 + vignette + ribs + noise.sample(rng);
        }
    }
    for (obs, &class) in annotation.0.iter().enumerate() {
        let (ring, gain) = match class {
            ObsClass::Positive => (false, 0.45),
            ObsClass::Uncertain => (true, 0.35),
            _ => continue,
        };
        let (r, c) = glyph_cell(obs);
        let cx = origin + (c as f64 + 0.5) * cell + jx;
        let cy = origin + (r as f64 + 0.5) * cell + jy;
        let outer = 0.38 * cell;
        let inner = if ring { 0.2 * cell } else { -1.0 };
        let lo_y = (cy - outer).floor().max(0.0) as usize;
        let hi_y = ((cy + outer).ceil() as usize).min(size - 1);
        let lo_x = (cx - outer).floor().max(0.0) as usize;
        let hi_x = ((cx + outer).ceil() as usize).min(size - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= outer && d >= inner {
                    gray[y * size + x] += gain;
                }
            }
        }
    }
    Raster::from_gray(size, size, &gray)
}

fn study_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split.id_offset() + index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

pub fn study_id(split: Split, index: usize) -> String {
    format!("study{:07}", split.id_offset() + index as u64)
}

/// Deterministic in (config seed, split, index) alone.
pub fn synth_study(cfg: &SynthConfig, split: Split, index: usize) -> Study {
    let mut rng = study_rng(cfg.seed, split, index);
    let annotation = sample_annotation(&mut rng, cfg.profile);
    let report = to_raw(&template(&annotation, &mut rng));
    let id = study_id(split, index);
    let images: Vec<Raster> = (0..cfg.views).map(|_| render_view(&annotation, cfg.image_size, &mut rng)).collect();
    let names = (0..cfg.views).map(|v| format!("images/{id}_{v}.ppm")).collect();
    Study {
        record: StudyRecord {
            id,
            images: names,
            report,
            annotation,
        },
        images,
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "records.jsonl";

/// Writes `manifest.json` plus, per split, `records.jsonl` and `images/*.ppm`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig) -> io::Result<()> {
    cfg.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(cfg)? + "\n")?;
    for split in Split::ALL {
        let sdir = dir.join(split.name());
        fs::create_dir_all(sdir.join("images"))?;
        let studies: Vec<Study> = (0..cfg.size(split)).into_par_iter().map(|i| synth_study(cfg, split, i)).collect();
        let mut records = BufWriter::new(fs::File::create(sdir.join(RECORDS))?);
        for s in &studies {
            serde_json::to_writer(&mut records, &s.record)?;
            records.write_all(b"\n")?;
            for (name, img) in s.record.images.iter().zip(&s.images) {
                img.write_ppm(BufWriter::new(fs::File::create(sdir.join(name))?))?;
            }
        }
        records.flush()?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> io::Result<SynthConfig> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn split_dir(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.name())
}

pub fn read_records(dir: &Path, split: Split) -> io::Result<Vec<StudyRecord>> {
    let f = BufReader::new(fs::File::open(split_dir(dir, split).join(RECORDS))?);
    f.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Records with their decoded images.
pub fn load_split(dir: &Path, split: Split) -> io::Result<Vec<Study>> {
    let sdir = split_dir(dir, split);
    read_records(dir, split)?
        .into_par_iter()
        .map(|record| {
            let images = record
                .images
                .iter()
                .map(|name| Raster::read_ppm(BufReader::new(fs::File::open(sdir.join(name))?)))
                .collect::<io::Result<Vec<_>>>()?;
            Ok(Study { record, images })
        })
        .collect()
}
