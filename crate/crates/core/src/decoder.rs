//! GPT2-style decoder with a cross-attention sublayer inserted between the
//! masked self-attention and the feed-forward sublayer of every layer.
//!
//! Pre-norm residual layout; the output head is tied to the token embedding.

use crate::config::DecoderConfig;
use crate::error::{ModelError, ModelResult};
use crate::nn::{attend, LayerNorm, Masking, Mlp, MultiHeadAttention, INIT_STD};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Self-attention pattern of a full-sequence forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Autoregressive: position t sees positions ≤ t.
    Causal,
    /// Every position sees every position (masked-LM pretraining).
    Bidirectional,
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<CrossAttention>,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
}

/// Result of a full teacher-forced pass.
pub struct DecoderOutput {
    /// T×V next-token logits.
    pub logits: Var,
    /// Cross-attention weights, `[layer][head]`, each T×D. Empty without
    /// cross-attention.
    pub cross_weights: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    keys: Option<Var>,
    values: Option<Var>,
    cross_keys: Option<Var>,
    cross_values: Option<Var>,
}

/// Incremental decoding cache. Bound to the graph it was created on; the
/// graph holds the parameter store borrowed, so the cache cannot outlive a
/// parameter update.
#[derive(Debug, Clone)]
pub struct DecoderState {
    layers: Vec<LayerCache>,
    position: usize,
}

impl DecoderState {
    pub fn position(&self) -> usize {
        self.position
    }

    /// Number of cached self-attention positions (equal in every layer).
    pub fn cached_len(&self, g: &Graph) -> usize {
        self.layers[0].keys.map_or(0, |k| g.shape(k)[0])
    }
}

/// One incremental step's outputs.
pub struct StepOutput {
    /// 1×V logits for the next token.
    pub logits: Var,
    /// `[layer][head]`, each 1×D.
    pub cross_weights: Vec<Vec<Var>>,
}

pub fn is_cross_attention_param(name: &str) -> bool {
    name.contains(".cross_attn.") || name.contains(".ln_cross.")
}

impl Decoder {
    /// Builds a decoder; `with_cross_attention = false` gives the bare
    /// language-model body used for pretraining.
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, seed: u64, with_cross_attention: bool) -> ModelResult<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let token_embedding = store.add_normal("decoder.token_embedding", &[cfg.vocab, h], INIT_STD, seed);
        let position_embedding = store.add_normal("decoder.position_embedding", &[cfg.max_gen_len, h], INIT_STD / 2.0, seed);
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), h),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), h, cfg.heads, seed),
                    cross: with_cross_attention.then(|| CrossAttention {
                        norm: LayerNorm::new(store, &format!("{p}.ln_cross"), h),
                        attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), h, cfg.heads, seed),
                    }),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), h),
                    mlp: Mlp::new(store, &format!("{p}.mlp"), h, cfg.ffn, seed),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, "decoder.norm", h);
        Ok(Self {
            cfg: cfg.clone(),
            token_embedding,
            position_embedding,
            layers,
            norm,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn has_cross_attention(&self) -> bool {
        self.layers.iter().any(|l| l.cross.is_some())
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    fn check_visual(&self, g: &Graph, visual: Option<Var>) -> ModelResult<()> {
        match (visual, self.has_cross_attention()) {
            (Some(v), true) => {
                let s = g.shape(v);
                if s.len() != 2 || s[1] != self.cfg.hidden {
                    return Err(ModelError::InputShape {
                        expected: vec![0, self.cfg.hidden],
                        actual: s,
                    });
                }
                Ok(())
            }
            (None, false) => Ok(()),
            (None, true) => Err(ModelError::Parameter("decoder with cross-attention needs visual features".into())),
            (Some(_), false) => Err(ModelError::Parameter("decoder has no cross-attention for visual features".into())),
        }
    }

    /// Full-sequence pass: `tokens` are the inputs (starting with BOS for
    /// captioning); row t of the logits predicts token t+1.
    pub fn forward(&self, g: &Graph, tokens: &[usize], visual: Option<Var>, mode: AttentionMode) -> ModelResult<DecoderOutput> {
        let t = tokens.len();
        if t == 0 || t > self.cfg.max_gen_len {
            return Err(ModelError::ContextOverflow {
                len: t,
                limit: self.cfg.max_gen_len,
            });
        }
        self.check_visual(g, visual)?;
        let p = self.cfg.dropout;
        let emb = g.embedding(g.param(self.token_embedding)?, tokens)?;
        let pos = g.slice_rows(g.param(self.position_embedding)?, 0, t)?;
        let mut x = g.dropout(g.add(emb, pos)?, p)?;
        let masking = match mode {
            AttentionMode::Causal => Masking::Causal { offset: 0 },
            AttentionMode::Bidirectional => Masking::None,
        };
        let mut cross_weights = Vec::new();
        for layer in &self.layers {
            let a = layer.ln1.forward(g, x)?;
            let (sa, _) = layer.self_attn.forward(g, a, a, masking)?;
            x = g.add(x, g.dropout(sa, p)?)?;
            if let (Some(cross), Some(vis)) = (&layer.cross, visual) {
                let c = cross.norm.forward(g, x)?;
                let (ca, w) = cross.attn.forward(g, c, vis, Masking::None)?;
                x = g.add(x, g.dropout(ca, p)?)?;
                cross_weights.push(w);
            }
            let m = layer.mlp.forward(g, layer.ln2.forward(g, x)?)?;
            x = g.add(x, g.dropout(m, p)?)?;
        }
        let h = self.norm.forward(g, x)?;
        let logits = g.matmul_nt(h, g.param(self.token_embedding)?)?;
        Ok(DecoderOutput { logits, cross_weights })
    }

    /// Starts incremental decoding; cross-attention keys/values over the
    /// visual features are computed once here.
    pub fn begin(&self, g: &Graph, visual: Option<Var>) -> ModelResult<DecoderState> {
        self.check_visual(g, visual)?;
        let layers = self
            .layers
            .iter()
            .map(|layer| -> ModelResult<LayerCache> {
                let (cross_keys, cross_values) = match (&layer.cross, visual) {
                    (Some(c), Some(v)) => (Some(c.attn.k.forward(g, v)?), Some(c.attn.v.forward(g, v)?)),
                    _ => (None, None),
                };
                Ok(LayerCache {
                    keys: None,
                    values: None,
                    cross_keys,
                    cross_values,
                })
            })
            .collect::<ModelResult<_>>()?;
        Ok(DecoderState { layers, position: 0 })
    }

    /// Feeds one token at the state's current position.
    pub fn step(&self, g: &Graph, state: &mut DecoderState, token: usize) -> ModelResult<StepOutput> {
        if state.position >= self.cfg.max_gen_len {
            return Err(ModelError::ContextOverflow {
                len: state.position + 1,
                limit: self.cfg.max_gen_len,
            });
        }
        let pos = state.position;
        let emb = g.embedding(g.param(self.token_embedding)?, &[token])?;
        let pe = g.slice_rows(g.param(self.position_embedding)?, pos, pos + 1)?;
        let mut x = g.add(emb, pe)?;
        let mut cross_weights = Vec::new();
        for (layer, cache) in self.layers.iter().zip(state.layers.iter_mut()) {
            let a = layer.ln1.forward(g, x)?;
            let sa = &layer.self_attn;
            let q = sa.q.forward(g, a)?;
            let k_new = sa.k.forward(g, a)?;
            let v_new = sa.v.forward(g, a)?;
            let keys = match cache.keys {
                Some(k) => g.concat_rows(&[k, k_new])?,
                None => k_new,
            };
            let values = match cache.values {
                Some(v) => g.concat_rows(&[v, v_new])?,
                None => v_new,
            };
            cache.keys = Some(keys);
            cache.values = Some(values);
            let (o, _) = attend(g, q, keys, values, sa.heads, Masking::Causal { offset: pos })?;
            x = g.add(x, sa.out.forward(g, o)?)?;
            if let (Some(cross), Some(ck), Some(cv)) = (&layer.cross, cache.cross_keys, cache.cross_values) {
                let c = cross.norm.forward(g, x)?;
                let cq = cross.attn.q.forward(g, c)?;
                let (co, w) = attend(g, cq, ck, cv, cross.attn.heads, Masking::None)?;
                x = g.add(x, cross.attn.out.forward(g, co)?)?;
                cross_weights.push(w);
            }
            let m = layer.mlp.forward(g, layer.ln2.forward(g, x)?)?;
            x = g.add(x, m)?;
        }
        state.position += 1;
        let h = self.norm.forward(g, x)?;
        let logits = g.matmul_nt(h, g.param(self.token_embedding)?)?;
        Ok(StepOutput { logits, cross_weights })
    }
}
