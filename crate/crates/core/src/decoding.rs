//! Greedy and beam search over any incremental next-token model.

use std::cmp::Ordering;

use crate::error::{ModelError, ModelResult};

/// A model that can be fed one token at a time.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> ModelResult<Self::State>;

    /// Feeds `token` and returns unnormalized next-token scores.
    fn step(&self, state: &mut Self::State, token: usize) -> ModelResult<Vec<f64>>;
}

/// A decoded sequence. `tokens` excludes the start token and the end token.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of per-step log-probabilities, including the end token when emitted.
    pub log_prob: f64,
    /// True when the end token was produced before the length cap.
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Greedy,
    Beam(usize),
}

impl SearchMode {
    pub fn width(self) -> usize {
        match self {
            SearchMode::Greedy => 1,
            SearchMode::Beam(b) => b,
        }
    }
}

pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

/// Highest entry, lowest index among ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Picks the argmax token each step until `eos` or `max_len` tokens.
pub fn greedy<M: StepModel>(model: &M, bos: usize, eos: usize, max_len: usize) -> ModelResult<Hypothesis> {
    let mut state = model.start()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut next = bos;
    for _ in 0..max_len {
        let lp = log_softmax(&model.step(&mut state, next)?);
        let t = argmax(&lp);
        log_prob += lp[t];
        if t == eos {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
        tokens.push(t);
        next = t;
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: false,
    })
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
}

struct Done {
    hyp: Hypothesis,
    /// Step at which the hypothesis left the beam.
    step: usize,
}

fn lexicographic(a: &[usize], b: &[usize]) -> Ordering {
    a.cmp(b)
}

/// Beam search without length normalization.
///
/// Every step expands the live beams, ranks all extensions by cumulative
/// log-probability (ties: lexicographic token order), records end-token
/// extensions ranked within the top `beam` as finished, and keeps the best
/// `beam` other extensions alive. Search stops once the best finished score
/// is at least the best live score, since scores never increase. Among
/// finished hypotheses the highest score wins; ties go to the earlier finish,
/// then to the lexicographically smaller token sequence.
pub fn beam<M: StepModel>(model: &M, bos: usize, eos: usize, max_len: usize, beam: usize) -> ModelResult<Hypothesis> {
    if beam == 0 {
        return Err(ModelError::Parameter("beam size must be at least 1".into()));
    }
    struct Live<S> {
        tokens: Vec<usize>,
        score: f64,
        state: S,
        next: usize,
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        state: model.start()?,
        next: bos,
    }];
    let mut done: Vec<Done> = Vec::new();
    for step in 0..max_len {
        let mut cands = Vec::new();
        for (i, b) in live.iter_mut().enumerate() {
            let lp = log_softmax(&model.step(&mut b.state, b.next)?);
            cands.extend(lp.iter().enumerate().map(|(token, l)| Candidate {
                parent: i,
                token,
                score: b.score + l,
            }));
        }
        cands.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| lexicographic(&live[a.parent].tokens, &live[b.parent].tokens))
                .then(a.token.cmp(&b.token))
        });
        let mut next_live = Vec::with_capacity(beam);
        for (rank, c) in cands.iter().enumerate() {
            if next_live.len() == beam && rank >= beam {
                break;
            }
            let parent = &live[c.parent];
            if c.token == eos {
                if rank < beam {
                    done.push(Done {
                        hyp: Hypothesis {
                            tokens: parent.tokens.clone(),
                            log_prob: c.score,
                            finished: true,
                        },
                        step,
                    });
                }
            } else if next_live.len() < beam {
                let mut tokens = parent.tokens.clone();
                tokens.push(c.token);
                next_live.push(Live {
                    tokens,
                    score: c.score,
                    state: parent.state.clone(),
                    next: c.token,
                });
            }
        }
        live = next_live;
        let best_done = done.iter().map(|d| d.hyp.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|l| l.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= best_live {
            break;
        }
    }
    // Beams still alive at the length cap are truncated hypotheses.
    done.extend(live.into_iter().map(|l| Done {
        hyp: Hypothesis {
            tokens: l.tokens,
            log_prob: l.score,
            finished: false,
        },
        step: max_len,
    }));
    done.into_iter()
        .min_by(|a, b| {
            b.hyp
                .log_prob
                .partial_cmp(&a.hyp.log_prob)
                .unwrap_or(Ordering::Equal)
                .then(a.step.cmp(&b.step))
                .then_with(|| lexicographic(&a.hyp.tokens, &b.hyp.tokens))
        })
        .map(|d| d.hyp)
        .ok_or_else(|| ModelError::Parameter("beam search produced no hypothesis".into()))
}

pub fn search<M: StepModel>(model: &M, bos: usize, eos: usize, max_len: usize, mode: SearchMode) -> ModelResult<Hypothesis> {
    match mode {
        SearchMode::Greedy => greedy(model, bos, eos, max_len),
        SearchMode::Beam(b) => beam(model, bos, eos, max_len, b),
    }
}
