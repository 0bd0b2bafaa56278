//! 8-bit rasters, binary PPM files and the image preprocessing pipeline.
//!
//! PPM layout: ASCII header `P6\n<width> <height>\n255\n` followed by
//! width·height RGB byte triples in row-major order.

use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EncoderConfig;
use crate::tensor::Tensor;

/// Interleaved RGB, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    /// Grayscale values in [0, 1] replicated to three channels.
    pub fn from_gray(width: usize, height: usize, gray: &[f64]) -> Self {
        assert_eq!(gray.len(), width * height);
        let rgb = gray
            .iter()
            .flat_map(|g| {
                let b = (g.clamp(0.0, 1.0) * 255.0).round() as u8;
                [b, b, b]
            })
            .collect();
        Self { width, height, rgb }
    }

    /// C×H×W tensor on the [0, 1] scale.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("raster dims positive")
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.rgb)
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated PPM header"));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_string));
        }
        if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected an 8-bit binary PPM (P6, maxval 255)"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        if width == 0 || height == 0 {
            return Err(bad("empty image"));
        }
        let mut rgb = vec![0u8; width * height * 3];
        r.read_exact(&mut rgb)?;
        Ok(Self { width, height, rgb })
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping:
/// source coordinate = (dst + 0.5)·(in/out) − 0.5.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let taps = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| taps(y, sy, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("positive output size")
}

/// Resizes so the shorter side becomes `short`, keeping the aspect ratio.
pub fn resize_shorter_side(img: &Tensor, short: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (oh, ow) = if h <= w {
        (short, ((w * short) as f64 / h as f64).round().max(1.0) as usize)
    } else {
        (((h * short) as f64 / w as f64).round().max(1.0) as usize, short)
    };
    if (oh, ow) == (h, w) {
        return img.clone();
    }
    resize_bilinear(img, oh, ow)
}

pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(top + size <= h && left + size <= w, "crop outside image");
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&img.data()[row + left..row + left + size]);
        }
    }
    Tensor::new(&[c, size, size], out).expect("positive crop")
}

/// Rotation about the image center by `degrees` (counter-clockwise), bilinear
/// resampling; samples falling outside the image take `fill[c]`.
pub fn rotate(img: &Tensor, degrees: f64, fill: &[f64]) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let data = img.data();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse map of the output pixel into the source
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..c {
                let sample = |yy: f64, xx: f64| {
                    if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
                        fill[ch]
                    } else {
                        data[ch * h * w + yy as usize * w + xx as usize]
                    }
                };
                let v = sample(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + sample(y0, x0 + 1.0) * fx * (1.0 - fy)
                    + sample(y0 + 1.0, x0) * (1.0 - fx) * fy
                    + sample(y0 + 1.0, x0 + 1.0) * fx * fy;
                out[ch * h * w + y * w + x] = v;
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same shape")
}

/// Per-channel (x − mean) / std.
pub fn standardize(img: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let s = img.shape();
    let plane = s[1] * s[2];
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = i / plane;
            (x - mean[c]) / std[c]
        })
        .collect();
    Tensor::new(s, data).expect("same shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Model input side W.
    pub width: usize,
    /// The shorter side is resized to W + margin before cropping.
    pub resize_margin: usize,
    /// Training rotations are drawn from U[−max, max] degrees.
    pub max_rotation_deg: f64,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl PreprocessConfig {
    pub const DEFAULT_MARGIN: usize = 64;
    pub const DEFAULT_ROTATION: f64 = 5.0;

    pub fn for_encoder(enc: &EncoderConfig) -> Self {
        Self {
            width: enc.image_width,
            resize_margin: Self::DEFAULT_MARGIN,
            max_rotation_deg: Self::DEFAULT_ROTATION,
            channel_mean: enc.channel_mean.clone(),
            channel_std: enc.channel_std.clone(),
        }
    }
}

/// Resize (shorter side W + margin), crop W×W (random when training,
/// centered otherwise), rotate (training only) with the channel mean as fill,
/// then standardize. The evaluation path uses no randomness.
pub fn preprocess_image(img: &Tensor, cfg: &PreprocessConfig, training: bool, seed: u64) -> Tensor {
    let resized = resize_shorter_side(img, cfg.width + cfg.resize_margin);
    let (h, w) = (resized.shape()[1], resized.shape()[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (top, left) = if training {
        (rng.random_range(0..=h - cfg.width), rng.random_range(0..=w - cfg.width))
    } else {
        ((h - cfg.width) / 2, (w - cfg.width) / 2)
    };
    let mut x = crop(&resized, top, left, cfg.width);
    if training && cfg.max_rotation_deg > 0.0 {
        let angle = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        x = rotate(&x, angle, &cfg.channel_mean);
    }
    standardize(&x, &cfg.channel_mean, &cfg.channel_std)
}
