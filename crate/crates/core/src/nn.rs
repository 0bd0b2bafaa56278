//! Parameterized building blocks shared by the encoder and decoder.

use crate::tensor::{Graph, ParamId, ParamStore, Result, Var};

/// Initialization scale for linear and embedding weights.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// y = x·W + b with W stored as in×out.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, seed: u64) -> Self {
        let weight = store.add_normal(&format!("{name}.weight"), &[input, output], INIT_STD, seed);
        let bias = bias.then(|| store.add_zeros(&format!("{name}.bias"), &[output]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(self.weight)?)?;
        match self.bias {
            Some(b) => g.add_bias(y, g.param(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_ones(&format!("{name}.gain"), &[dim]),
            bias: store.add_zeros(&format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(self.gain)?, g.param(self.bias)?, LN_EPS)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, seed: u64) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, seed),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, seed),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let h = g.gelu(self.fc1.forward(g, x)?)?;
        self.fc2.forward(g, h)
    }
}

/// How queries may attend to keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Masking {
    /// Every query sees every key.
    None,
    /// Query row `i` sees keys `0..=offset + i`.
    Causal { offset: usize },
}

/// Multi-head scaled dot-product attention over already projected Q, K, V.
/// Returns the concatenated head outputs and each head's weight matrix.
pub fn attend(g: &Graph, q: Var, k: Var, v: Var, heads: usize, masking: Masking) -> Result<(Var, Vec<Var>)> {
    let dim = g.shape(q)[1];
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let (a, b) = (h * dh, (h + 1) * dh);
            (g.slice_cols(q, a, b)?, g.slice_cols(k, a, b)?, g.slice_cols(v, a, b)?)
        };
        let scores = g.scale(g.matmul_nt(qh, kh)?, scale)?;
        let w = match masking {
            Masking::None => g.softmax(scores, 1)?,
            Masking::Causal { offset } => g.causal_softmax(scores, offset)?,
        };
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

/// Attention with linear Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, seed: u64) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, seed),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, seed),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, seed),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, seed),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `context`.
    pub fn forward(&self, g: &Graph, x: Var, context: Var, masking: Masking) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let (o, w) = attend(g, q, k, v, self.heads, masking)?;
        Ok((self.out.forward(g, o)?, w))
    }
}
