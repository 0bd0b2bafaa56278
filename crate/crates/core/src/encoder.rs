//! Vision encoders mapping an image C×W×H to visual features S×F.
//!
//! All three variants share the staged layout: a strided convolutional
//! token embedding per stage followed by `depth` blocks. The variants differ
//! in what a block is:
//!
//! * `cvt-mini`: attention whose Q/K/V come from depthwise 3×3 convolutions
//!   over the token grid followed by a linear map,
//! * `vit-mini`: attention with linear Q/K/V and learned absolute positions,
//! * `cnn-mini`: residual 3×3 convolutions.

use crate::config::{EncoderConfig, EncoderVariant, StageConfig};
use crate::error::{ModelError, ModelResult};
use crate::nn::{attend, LayerNorm, Linear, Masking, Mlp, INIT_STD};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Final-stage features, positions-major: row `r·cols + c` is grid cell (r, c).
#[derive(Debug, Clone, Copy)]
pub struct VisualFeatures {
    pub grid: Var,
    pub rows: usize,
    pub cols: usize,
}

impl VisualFeatures {
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
enum Projection {
    Linear(Linear),
    Conv {
        depthwise: ParamId,
        stride: usize,
        linear: Linear,
    },
}

impl Projection {
    fn forward(&self, g: &Graph, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        match self {
            Projection::Linear(l) => l.forward(g, tokens),
            Projection::Conv {
                depthwise,
                stride,
                linear,
            } => {
                let dim = g.shape(tokens)[1];
                let x = tokens_to_grid(g, tokens, grid)?;
                let y = g.conv2d(x, g.param(*depthwise)?, (*stride, *stride), (1, 1), dim)?;
                let t = grid_to_tokens(g, y)?;
                linear.forward(g, t)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    ln1: LayerNorm,
    q: Projection,
    k: Projection,
    v: Projection,
    out: Linear,
    heads: usize,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum Block {
    Attention(AttentionBlock),
    Conv(ConvBlock),
}

#[derive(Debug, Clone)]
struct Stage {
    cfg: StageConfig,
    embed_weight: ParamId,
    embed_bias: ParamId,
    embed_norm: Option<LayerNorm>,
    position: Option<ParamId>,
    blocks: Vec<Block>,
    grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
    norm: LayerNorm,
}

/// C×h×w → (h·w)×C
pub fn grid_to_tokens(g: &Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// (h·w)×C → C×h×w
pub fn tokens_to_grid(g: &Graph, tokens: Var, (h, w): (usize, usize)) -> Result<Var> {
    let c = g.shape(tokens)[1];
    let t = g.transpose(tokens)?;
    g.reshape(t, &[c, h, w])
}

fn conv_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) -> ModelResult<Self> {
        cfg.validate()?;
        let grids = cfg.grids();
        let mut in_c = cfg.channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, (sc, &grid)) in cfg.stages.iter().zip(&grids).enumerate() {
            let p = format!("encoder.stage{i}");
            let embed_weight = store.add_normal(
                &format!("{p}.embed.weight"),
                &[sc.dim, in_c, sc.kernel, sc.kernel],
                conv_std(in_c * sc.kernel * sc.kernel),
                seed,
            );
            let embed_bias = store.add_zeros(&format!("{p}.embed.bias"), &[sc.dim]);
            let transformer = cfg.variant != EncoderVariant::CnnMini;
            let embed_norm = transformer.then(|| LayerNorm::new(store, &format!("{p}.embed_norm"), sc.dim));
            let position = (cfg.variant == EncoderVariant::VitMini)
                .then(|| store.add_normal(&format!("{p}.position"), &[grid.0 * grid.1, sc.dim], INIT_STD, seed));
            let blocks = (0..sc.depth)
                .map(|j| {
                    let b = format!("{p}.block{j}");
                    match cfg.variant {
                        EncoderVariant::CnnMini => Block::Conv(ConvBlock {
                            weight: store.add_normal(
                                &format!("{b}.conv.weight"),
                                &[sc.dim, sc.dim, 3, 3],
                                conv_std(sc.dim * 9) * 0.5,
                                seed,
                            ),
                            bias: store.add_zeros(&format!("{b}.conv.bias"), &[sc.dim]),
                        }),
                        variant => {
                            let mut proj = |name: &str, stride: usize| {
                                let linear = Linear::new(store, &format!("{b}.attn.{name}"), sc.dim, sc.dim, true, seed);
                                if variant == EncoderVariant::CvtMini {
                                    Projection::Conv {
                                        depthwise: store.add_normal(
                                            &format!("{b}.attn.{name}.depthwise"),
                                            &[sc.dim, 1, 3, 3],
                                            conv_std(9),
                                            seed,
                                        ),
                                        stride,
                                        linear,
                                    }
                                } else {
                                    Projection::Linear(linear)
                                }
                            };
                            let q = proj("q", 1);
                            let k = proj("k", sc.kv_stride);
                            let v = proj("v", sc.kv_stride);
                            Block::Attention(AttentionBlock {
                                ln1: LayerNorm::new(store, &format!("{b}.ln1"), sc.dim),
                                q,
                                k,
                                v,
                                out: Linear::new(store, &format!("{b}.attn.out"), sc.dim, sc.dim, true, seed),
                                heads: sc.heads,
                                ln2: LayerNorm::new(store, &format!("{b}.ln2"), sc.dim),
                                mlp: Mlp::new(store, &format!("{b}.mlp"), sc.dim, sc.dim * sc.mlp_ratio, seed),
                            })
                        }
                    }
                })
                .collect();
            stages.push(Stage {
                cfg: sc.clone(),
                embed_weight,
                embed_bias,
                embed_norm,
                position,
                blocks,
                grid,
            });
            in_c = sc.dim;
        }
        let norm = LayerNorm::new(store, "encoder.norm", cfg.feature_dim());
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Convolutional token embedding of one stage: C×h×w grid in, tokens out.
    pub fn patch_embed(&self, g: &Graph, input: Var, stage: usize) -> ModelResult<(Var, (usize, usize))> {
        let st = self.stages.get(stage).ok_or_else(|| ModelError::Parameter(format!("no stage {stage}")))?;
        let y = g.conv2d(
            input,
            g.param(st.embed_weight)?,
            (st.cfg.stride, st.cfg.stride),
            (st.cfg.padding, st.cfg.padding),
            1,
        )?;
        let grid = (g.shape(y)[1], g.shape(y)[2]);
        let tokens = g.add_bias(grid_to_tokens(g, y)?, g.param(st.embed_bias)?)?;
        Ok((tokens, grid))
    }

    pub fn encode(&self, g: &Graph, image: &Tensor) -> ModelResult<VisualFeatures> {
        self.encode_traced(g, image, &mut Vec::new())
    }

    /// Like [`Encoder::encode`], also collecting every attention weight matrix.
    pub fn encode_traced(&self, g: &Graph, image: &Tensor, attn: &mut Vec<Var>) -> ModelResult<VisualFeatures> {
        let w = self.cfg.image_width;
        let expected = [self.cfg.channels, w, w];
        if image.shape() != expected {
            return Err(ModelError::InputShape {
                expected: expected.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        let mut x = g.constant(image.clone())?;
        let mut tokens = None;
        for (i, st) in self.stages.iter().enumerate() {
            let (mut t, grid) = self.patch_embed(g, x, i)?;
            debug_assert_eq!(grid, st.grid);
            if let Some(n) = &st.embed_norm {
                t = n.forward(g, t)?;
            } else {
                t = g.gelu(t)?;
            }
            if let Some(p) = st.position {
                t = g.add(t, g.param(p)?)?;
            }
            for block in &st.blocks {
                t = match block {
                    Block::Attention(b) => {
                        let h = b.ln1.forward(g, t)?;
                        let q = b.q.forward(g, h, grid)?;
                        let k = b.k.forward(g, h, grid)?;
                        let v = b.v.forward(g, h, grid)?;
                        let (o, weights) = attend(g, q, k, v, b.heads, Masking::None)?;
                        attn.extend(weights);
                        let t = g.add(t, b.out.forward(g, o)?)?;
                        let m = b.mlp.forward(g, b.ln2.forward(g, t)?)?;
                        g.add(t, m)?
                    }
                    Block::Conv(b) => {
                        let xg = tokens_to_grid(g, t, grid)?;
                        let y = g.conv2d(xg, g.param(b.weight)?, (1, 1), (1, 1), 1)?;
                        let y = g.add_bias(grid_to_tokens(g, y)?, g.param(b.bias)?)?;
                        g.add(t, g.gelu(y)?)?
                    }
                };
            }
            x = tokens_to_grid(g, t, grid)?;
            tokens = Some(t);
        }
        let grid = self.norm.forward(g, tokens.expect("at least one stage"))?;
        let (rows, cols) = self.cfg.final_grid();
        Ok(VisualFeatures { grid, rows, cols })
    }
}
