use crate::tensor::{ParamId, ParamStore, Tensor};

/// Optimizer parameter groups: anything under `encoder.` trains at the
/// encoder rate, everything else (projection, cross-attention, decoder) at
/// the other rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Other,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("encoder.") {
        ParamGroup::Encoder
    } else {
        ParamGroup::Other
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

/// AdamW with decoupled weight decay. Moments are kept per parameter; a
/// parameter without a gradient in a step is left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, state: Vec::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: impl Fn(ParamId) -> f64) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for (id, grad) in grads {
            let idx = id.index();
            if self.state.len() <= idx {
                self.state.resize(idx + 1, None);
            }
            let n = grad.len();
            let st = self.state[idx].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - beta1.powi(st.steps);
            let c2 = 1.0 - beta2.powi(st.steps);
            let rate = lr(*id);
            let decay = 1.0 - rate * weight_decay;
            let w = store.value_mut(*id).data_mut();
            for (i, g) in grad.data().iter().enumerate() {
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                w[i] = w[i] * decay - rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
