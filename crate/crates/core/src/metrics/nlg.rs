//! BLEU, ROUGE-L, simplified METEOR and CIDEr over whitespace tokens.
//!
//! Every function takes one hypothesis and one reference.

use std::collections::{BTreeMap, HashMap};

/// Added in place of a zero i-gram precision in example-level BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: i32 = 3;
pub const CIDER_MAX_N: usize = 4;

pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn ngram_counts<'a>(toks: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if n == 0 || toks.len() < n {
        return m;
    }
    for w in toks.windows(n) {
        *m.entry(w.to_vec()).or_insert(0) += 1;
    }
    m
}

/// (clipped matches, hypothesis i-grams) for i = n.
fn clipped(hyp: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Example-level BLEU-n.
///
/// Geometric mean of clipped i-gram precisions for i ≤ n times the brevity
/// penalty exp(1 − r/c) when c < r. Orders longer than the hypothesis are left
/// out (so an exact match scores 1 at any n), a zero precision is replaced by
/// ε, and a hypothesis sharing no unigram with the reference scores exactly 0,
/// as does an empty one.
pub fn bleu(hyp: &[&str], reference: &[&str], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let c = hyp.len();
    if c == 0 {
        return 0.0;
    }
    let order = n.min(c);
    let mut log_sum = 0.0;
    for i in 1..=order {
        let (m, total) = clipped(hyp, reference, i);
        if i == 1 && m == 0 {
            return 0.0;
        }
        let p = if m == 0 { BLEU_EPSILON } else { m as f64 / total as f64 };
        log_sum += p.ln();
    }
    brevity(c, reference.len()) * (log_sum / order as f64).exp()
}

fn brevity(c: usize, r: usize) -> f64 {
    if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

/// Corpus-level BLEU-n: clipped counts and lengths pooled over all pairs,
/// no smoothing. Zero when any pooled precision is zero.
pub fn corpus_bleu(pairs: &[(Vec<&str>, Vec<&str>)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let (c, r): (usize, usize) = pairs.iter().fold((0, 0), |(c, r), (h, rf)| (c + h.len(), r + rf.len()));
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for i in 1..=n {
        let (m, total) = pairs
            .iter()
            .map(|(h, rf)| clipped(h, rf, i))
            .fold((0, 0), |(a, b), (m, t)| (a + m, b + t));
        if m == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / total as f64).ln();
    }
    brevity(c, r) * (log_sum / n as f64).exp()
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Harmonic mean of LCS precision and recall; 0 for empty input.
pub fn rouge_l(hyp: &[&str], reference: &[&str]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Suffix-stripping stemmer: words of four letters or fewer are kept; longer
/// words lose the first matching suffix of "ies" (→ "y"), "sses" (→ "ss"),
/// "ing", "ed", "es", "ly", "s" (not after "s"), keeping at least three letters.
pub fn stem(word: &str) -> String {
    if word.len() <= 4 {
        return word.to_string();
    }
    let rules: [(&str, &str); 7] = [
        ("ies", "y"),
        ("sses", "ss"),
        ("ing", ""),
        ("ed", ""),
        ("es", ""),
        ("ly", ""),
        ("s", ""),
    ];
    for (suffix, repl) in rules {
        if let Some(base) = word.strip_suffix(suffix) {
            if suffix == "s" && base.ends_with('s') {
                continue;
            }
            if base.len() + repl.len() >= 3 {
                return format!("{base}{repl}");
            }
        }
    }
    word.to_string()
}

/// Unigram alignment on stems: each hypothesis token, left to right, takes
/// the first unmatched reference token with the same stem. Returns reference
/// positions aligned to matched hypothesis tokens, in hypothesis order.
pub fn meteor_alignment(hyp: &[&str], reference: &[&str]) -> Vec<usize> {
    let rs: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    let mut used = vec![false; reference.len()];
    let mut aligned = Vec::new();
    for h in hyp {
        let hs = stem(h);
        if let Some(j) = (0..rs.len()).find(|&j| !used[j] && rs[j] == hs) {
            used[j] = true;
            aligned.push(j);
        }
    }
    aligned
}

/// Simplified METEOR without synonymy:
/// F = P·R / (α·P + (1 − α)·R), penalty = γ·(chunks / matches)^β,
/// score = F·(1 − penalty).
pub fn meteor(hyp: &[&str], reference: &[&str]) -> f64 {
    let aligned = meteor_alignment(hyp, reference);
    let m = aligned.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let chunks = 1 + aligned.windows(2).filter(|w| w[1] != w[0] + 1).count();
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powi(METEOR_BETA);
    f * (1.0 - penalty)
}

/// Document frequencies of n-grams (n = 1..4) over a fixed reference corpus.
#[derive(Debug, Clone)]
pub struct CiderIdf {
    docs: usize,
    df: Vec<HashMap<Vec<String>, usize>>,
}

impl CiderIdf {
    /// Fails on an empty corpus.
    pub fn new<'a>(corpus: impl IntoIterator<Item = &'a [&'a str]>) -> Result<Self, String> {
        let mut df = vec![HashMap::new(); CIDER_MAX_N];
        let mut docs = 0;
        for doc in corpus {
            docs += 1;
            for (n, table) in df.iter_mut().enumerate() {
                for g in ngram_counts(doc, n + 1).into_keys() {
                    *table.entry(g.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
                }
            }
        }
        if docs == 0 {
            return Err("CIDEr needs a non-empty reference corpus".into());
        }
        Ok(Self { docs, df })
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    /// ln(N / (1 + df)).
    pub fn idf(&self, gram: &[&str]) -> f64 {
        let key: Vec<String> = gram.iter().map(|s| s.to_string()).collect();
        let df = self.df[gram.len() - 1].get(&key).copied().unwrap_or(0);
        (self.docs as f64 / (1.0 + df as f64)).ln()
    }

    // ordered so the float sums below do not depend on hash seeds
    fn vector<'a>(&self, toks: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, f64> {
        ngram_counts(toks, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * self.idf(&g);
                (g, w)
            })
            .collect()
    }

    /// Mean over n = 1..4 of the cosine between TF-IDF n-gram vectors (a zero
    /// vector gives cosine 0). Unscaled.
    pub fn score(&self, hyp: &[&str], reference: &[&str]) -> f64 {
        let mut total = 0.0;
        for n in 1..=CIDER_MAX_N {
            let h = self.vector(hyp, n);
            let r = self.vector(reference, n);
            let dot: f64 = h.iter().map(|(g, w)| w * r.get(g).copied().unwrap_or(0.0)).sum();
            let nh = h.values().map(|w| w * w).sum::<f64>().sqrt();
            let nr = r.values().map(|w| w * w).sum::<f64>().sqrt();
            if nh > 0.0 && nr > 0.0 {
                total += dot / (nh * nr);
            }
        }
        total / CIDER_MAX_N as f64
    }
}

/// Per-example CIDEr with the IDF table built from the given references.
pub fn cider(hyps: &[Vec<&str>], refs: &[Vec<&str>]) -> Result<Vec<f64>, String> {
    if hyps.len() != refs.len() {
        return Err(format!("{} hypotheses for {} references", hyps.len(), refs.len()));
    }
    let idf = CiderIdf::new(refs.iter().map(|r| r.as_slice()))?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| idf.score(h, r)).collect())
}

/// Scores of a set of hypothesis/reference pairs.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NlgScores {
    /// Corpus-level BLEU-1..4.
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Hypotheses that were empty (scored as such).
    pub empty_hypotheses: usize,
}

/// Corpus BLEU, mean METEOR, mean ROUGE-L and mean CIDEr.
pub fn score_corpus(hyps: &[String], refs: &[String]) -> Result<NlgScores, String> {
    if hyps.len() != refs.len() {
        return Err(format!("{} hypotheses for {} references", hyps.len(), refs.len()));
    }
    if hyps.is_empty() {
        return Err("nothing to score".into());
    }
    let h: Vec<Vec<&str>> = hyps.iter().map(|s| tokens(s)).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|s| tokens(s)).collect();
    let pairs: Vec<(Vec<&str>, Vec<&str>)> = h.iter().cloned().zip(r.iter().cloned()).collect();
    let n = hyps.len() as f64;
    let mut bleu = [0.0; 4];
    for (i, b) in bleu.iter_mut().enumerate() {
        *b = corpus_bleu(&pairs, i + 1);
    }
    let cider = cider(&h, &r)?;
    Ok(NlgScores {
        bleu,
        meteor: h.iter().zip(&r).map(|(a, b)| meteor(a, b)).sum::<f64>() / n,
        rouge_l: h.iter().zip(&r).map(|(a, b)| rouge_l(a, b)).sum::<f64>() / n,
        cider: cider.iter().sum::<f64>() / n,
        empty_hypotheses: h.iter().filter(|t| t.is_empty()).count(),
    })
}
