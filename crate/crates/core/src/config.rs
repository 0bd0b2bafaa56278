//! Model configurations, named presets and config fingerprints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    /// Convolutional token embedding with depthwise-convolutional Q/K/V projections.
    #[serde(rename = "cvt-mini")]
    CvtMini,
    /// Patch embedding, learned absolute positions, linear Q/K/V projections.
    #[serde(rename = "vit-mini")]
    VitMini,
    /// Plain strided convolutions.
    #[serde(rename = "cnn-mini")]
    CnnMini,
}

impl std::str::FromStr for EncoderVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cvt-mini" => Ok(Self::CvtMini),
            "vit-mini" => Ok(Self::VitMini),
            "cnn-mini" => Ok(Self::CnnMini),
            other => Err(ModelError::Config(format!("unknown encoder variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Stride of the key/value depthwise projections (cvt-mini only).
    pub kv_stride: usize,
}

impl StageConfig {
    fn new(kernel: usize, stride: usize, padding: usize, dim: usize, depth: usize, heads: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dim,
            depth,
            heads,
            mlp_ratio: 4,
            kv_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Square input side W (= H).
    pub image_width: usize,
    pub channels: usize,
    pub stages: Vec<StageConfig>,
    /// Per-channel standardization constants on the [0, 1] pixel scale.
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl EncoderConfig {
    /// Default toy geometry: 64×64×3, three stages of depth (1, 2, 2), F = 96.
    pub fn cvt_mini() -> Self {
        Self {
            variant: EncoderVariant::CvtMini,
            image_width: 64,
            channels: 3,
            stages: vec![
                StageConfig::new(7, 4, 3, 32, 1, 1),
                StageConfig::new(3, 2, 1, 64, 2, 2),
                StageConfig::new(3, 2, 1, 96, 2, 3),
            ],
            channel_mean: vec![0.45; 3],
            channel_std: vec![0.25; 3],
        }
    }

    /// Single-stage 16×16 patch transformer with the same S×F contract.
    pub fn vit_mini() -> Self {
        Self {
            variant: EncoderVariant::VitMini,
            stages: vec![StageConfig::new(16, 16, 0, 96, 2, 3)],
            ..Self::cvt_mini()
        }
    }

    pub fn cnn_mini() -> Self {
        Self {
            variant: EncoderVariant::CnnMini,
            ..Self::cvt_mini()
        }
    }

    /// Full-scale stage layout (depths 1, 4, 16 at 384×384). Named only; far
    /// too large for CPU training.
    pub fn cvt_21() -> Self {
        Self {
            variant: EncoderVariant::CvtMini,
            image_width: 384,
            channels: 3,
            stages: vec![
                StageConfig::new(7, 4, 2, 64, 1, 1),
                StageConfig::new(3, 2, 1, 192, 4, 3),
                StageConfig::new(3, 2, 1, 384, 16, 6),
            ],
            channel_mean: vec![0.485, 0.456, 0.406],
            channel_std: vec![0.229, 0.224, 0.225],
        }
    }

    /// Compact geometry used by the warm-start experiments: 32×32 input,
    /// two stages, 4×4 final grid, F = 32.
    pub fn desk() -> Self {
        Self {
            variant: EncoderVariant::CvtMini,
            image_width: 32,
            channels: 3,
            stages: vec![
                StageConfig::new(7, 4, 3, 16, 1, 1),
                StageConfig::new(3, 2, 1, 32, 1, 2),
            ],
            channel_mean: vec![0.45; 3],
            channel_std: vec![0.25; 3],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.dim)
    }

    /// Spatial grid (rows, cols) after every stage.
    pub fn grids(&self) -> Vec<(usize, usize)> {
        let mut side = self.image_width;
        self.stages
            .iter()
            .map(|s| {
                side /= s.stride.max(1);
                (side, side)
            })
            .collect()
    }

    /// Final grid (rows, cols); S = rows · cols.
    pub fn final_grid(&self) -> (usize, usize) {
        self.grids().last().copied().unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.stages.is_empty() {
            return err("encoder needs at least one stage".into());
        }
        if self.channels == 0 || self.image_width == 0 {
            return err("image width and channels must be positive".into());
        }
        if self.channel_mean.len() != self.channels || self.channel_std.len() != self.channels {
            return err("standardization constants must have one entry per channel".into());
        }
        if self.channel_std.iter().any(|s| *s <= 0.0) {
            return err("channel std must be positive".into());
        }
        let factor: usize = self.stages.iter().map(|s| s.stride).product();
        if factor == 0 || self.image_width % factor != 0 {
            return err(format!(
                "downsampling factor {factor} does not divide image width {}",
                self.image_width
            ));
        }
        let mut side = self.image_width;
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return err(format!("stage {i}: dim {} not divisible by {} heads", s.dim, s.heads));
            }
            if side + 2 * s.padding < s.kernel || (side + 2 * s.padding - s.kernel) / s.stride + 1 != side / s.stride {
                return err(format!(
                    "stage {i}: kernel {} stride {} padding {} does not map {side} to {}",
                    s.kernel,
                    s.stride,
                    s.padding,
                    side / s.stride
                ));
            }
            side /= s.stride;
            if s.kv_stride == 0 || side % s.kv_stride != 0 {
                return err(format!("stage {i}: kv stride {} does not divide grid {side}", s.kv_stride));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of("encoder", self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    /// Upper bound on generated tokens; also the positional table size.
    pub max_gen_len: usize,
    /// Training-only dropout rate.
    pub dropout: f64,
}

impl DecoderConfig {
    /// Default toy decoder (L=3, H=128, 4 heads) for a given vocabulary size.
    pub fn toy(vocab: usize) -> Self {
        Self {
            layers: 3,
            hidden: 128,
            heads: 4,
            ffn: 512,
            vocab,
            max_gen_len: 128,
            dropout: 0.1,
        }
    }

    /// DistilGPT2-sized layout. Named only.
    pub fn distilgpt2(vocab: usize) -> Self {
        Self {
            layers: 6,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            ..Self::toy(vocab)
        }
    }

    /// Compact decoder used by the warm-start experiments.
    pub fn desk(vocab: usize) -> Self {
        Self {
            layers: 2,
            hidden: 48,
            heads: 2,
            ffn: 96,
            ..Self::toy(vocab)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_gen_len == 0 {
            return Err(ModelError::Config("max generation length must be at least 1".into()));
        }
        if self.layers == 0 || self.vocab == 0 || self.ffn == 0 {
            return Err(ModelError::Config("layers, vocab and ffn must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Fingerprint of the architectural fields only (dropout excluded), so
    /// pretraining and fine-tuning runs of the same body agree.
    pub fn fingerprint(&self) -> String {
        let arch = (self.layers, self.hidden, self.heads, self.ffn, self.vocab, self.max_gen_len);
        fingerprint_of("decoder", &arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Adds a bias after the projection P (a pure matrix product when off).
    pub projection_bias: bool,
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(
            "captioner",
            &(self.encoder.fingerprint(), self.decoder.fingerprint(), self.projection_bias),
        )
    }
}

/// First 16 hex digits of SHA-256 over a tag and the JSON form of `value`.
pub fn fingerprint_of<T: Serialize>(tag: &str, value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(json.as_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}
