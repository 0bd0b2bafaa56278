//! The full model: encode every view, concatenate along positions, project
//! to the decoder width and decode.

use std::fmt::Write as _;

use crate::config::CaptionerConfig;
use crate::corpus::vocab::{Vocabulary, BOS, EOS};
use crate::decoder::{AttentionMode, Decoder, DecoderOutput, DecoderState};
use crate::decoding::{search, Hypothesis, SearchMode, StepModel};
use crate::encoder::{Encoder, VisualFeatures};
use crate::error::{ModelError, ModelResult};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Captioner {
    cfg: CaptionerConfig,
    encoder: Encoder,
    projection: Linear,
    decoder: Decoder,
}

/// A generated report, tagged with the study and the exact model state that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedReport {
    pub study_id: String,
    pub hypothesis: Hypothesis,
    pub model_tag: String,
}

impl GeneratedReport {
    pub fn tokens(&self) -> &[usize] {
        &self.hypothesis.tokens
    }
}

/// Cross-attention of one (token, layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Index into the report's tokens; equal to the token count for the end token.
    pub position: usize,
    pub token: usize,
    pub layer: usize,
    pub head: usize,
    /// Softmax weights over the D = views·rows·cols visual positions.
    pub raw: Vec<f64>,
    /// Min-max normalized, then a ↦ exp(1 − 1/a) with 0 ↦ 0.
    pub scaled: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub study_id: String,
    pub views: usize,
    pub rows: usize,
    pub cols: usize,
    pub maps: Vec<AttentionMap>,
}

/// Min-max normalization followed by a ↦ exp(1 − 1/a). A constant map has no
/// range and becomes all zeros.
pub fn scale_attention(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter()
        .map(|x| {
            let a = (x - lo) / (hi - lo);
            if a == 0.0 {
                0.0
            } else {
                (1.0 - 1.0 / a).exp()
            }
        })
        .collect()
}

impl AttentionExport {
    /// Text form: a header, then one tab-separated record per (token, layer,
    /// head): position, token id, word, layer, head, views, rows, cols and the
    /// scaled weights in row-major (view, row, col) order, space separated.
    pub fn to_text(&self, vocab: Option<&Vocabulary>) -> String {
        let mut s = String::new();
        writeln!(s, "# cxrlab attention v1").unwrap();
        writeln!(s, "# study\t{}", self.study_id).unwrap();
        writeln!(s, "position\ttoken\tword\tlayer\thead\tviews\trows\tcols\tvalues").unwrap();
        for m in &self.maps {
            let word = vocab.and_then(|v| v.word(m.token)).unwrap_or("?");
            let values: Vec<String> = m.scaled.iter().map(|x| format!("{x:.6e}")).collect();
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.position,
                m.token,
                word,
                m.layer,
                m.head,
                self.views,
                self.rows,
                self.cols,
                values.join(" ")
            )
            .unwrap();
        }
        s
    }
}

struct CaptionStepper<'a, 'p> {
    decoder: &'a Decoder,
    graph: &'a Graph<'p>,
    visual: Var,
}

impl StepModel for CaptionStepper<'_, '_> {
    type State = DecoderState;

    fn start(&self) -> ModelResult<DecoderState> {
        self.decoder.begin(self.graph, Some(self.visual))
    }

    fn step(&self, state: &mut DecoderState, token: usize) -> ModelResult<Vec<f64>> {
        let out = self.decoder.step(self.graph, state, token)?;
        Ok(self.graph.value(out.logits).data().to_vec())
    }
}

impl Captioner {
    pub fn new(store: &mut ParamStore, cfg: &CaptionerConfig, seed: u64) -> ModelResult<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, &cfg.encoder, seed)?;
        let projection = Linear::new(
            store,
            "projection",
            cfg.encoder.feature_dim(),
            cfg.decoder.hidden,
            cfg.projection_bias,
            seed,
        );
        let decoder = Decoder::new(store, &cfg.decoder, seed, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            projection,
            decoder,
        })
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn projection(&self) -> &Linear {
        &self.projection
    }

    /// Identifies this architecture together with the current parameter values.
    pub fn model_tag(&self, store: &ParamStore) -> String {
        format!("{}-{}", self.cfg.fingerprint(), store.digest())
    }

    /// Stacks the views' positions in input order; a single view passes through.
    pub fn concat_views(g: &Graph, views: &[VisualFeatures]) -> ModelResult<Var> {
        match views {
            [] => Err(ModelError::Parameter("a study needs at least one image".into())),
            [one] => Ok(one.grid),
            many => {
                let f = g.shape(many[0].grid)[1];
                if let Some(v) = many.iter().find(|v| g.shape(v.grid)[1] != f) {
                    return Err(ModelError::InputShape {
                        expected: vec![0, f],
                        actual: g.shape(v.grid),
                    });
                }
                let grids: Vec<Var> = many.iter().map(|v| v.grid).collect();
                Ok(g.concat_rows(&grids)?)
            }
        }
    }

    /// D×F → D×H through P (plus bias when configured).
    pub fn project(&self, g: &Graph, v: Var) -> ModelResult<Var> {
        Ok(self.projection.forward(g, v)?)
    }

    /// Encodes, concatenates and projects a study's images to D×H.
    pub fn visual(&self, g: &Graph, images: &[Tensor]) -> ModelResult<Var> {
        let views = images
            .iter()
            .map(|im| self.encoder.encode(g, im))
            .collect::<ModelResult<Vec<_>>>()?;
        let v = Self::concat_views(g, &views)?;
        self.project(g, v)
    }

    /// Teacher-forced pass over `inputs` (which should start with BOS).
    pub fn forward(&self, g: &Graph, images: &[Tensor], inputs: &[usize]) -> ModelResult<DecoderOutput> {
        let visual = self.visual(g, images)?;
        self.decoder.forward(g, inputs, Some(visual), AttentionMode::Causal)
    }

    /// Mean next-token cross-entropy of `report` (no BOS/EOS): inputs are
    /// BOS + report, targets are report + EOS.
    pub fn loss(&self, g: &Graph, images: &[Tensor], report: &[usize]) -> ModelResult<Var> {
        let mut inputs = Vec::with_capacity(report.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(report);
        let mut targets = report.to_vec();
        targets.push(EOS);
        let out = self.forward(g, images, &inputs)?;
        Ok(g.cross_entropy(out.logits, &targets, None)?)
    }

    /// Generates a report; `max_len` is capped at the decoder's generation limit.
    pub fn generate(
        &self,
        store: &ParamStore,
        study_id: &str,
        images: &[Tensor],
        mode: SearchMode,
        max_len: usize,
    ) -> ModelResult<GeneratedReport> {
        let g = Graph::inference(store);
        let visual = self.visual(&g, images)?;
        let stepper = CaptionStepper {
            decoder: &self.decoder,
            graph: &g,
            visual,
        };
        let max_len = max_len.min(self.cfg.decoder.max_gen_len);
        let hypothesis = search(&stepper, BOS, EOS, max_len, mode)?;
        Ok(GeneratedReport {
            study_id: study_id.to_string(),
            hypothesis,
            model_tag: self.model_tag(store),
        })
    }

    /// Cross-attention maps of every decoder layer and head for each
    /// generated token, from a teacher-forced pass over the report.
    pub fn export_attention(
        &self,
        store: &ParamStore,
        study_id: &str,
        images: &[Tensor],
        report: &GeneratedReport,
    ) -> ModelResult<AttentionExport> {
        if report.study_id != study_id {
            return Err(ModelError::StaleState(format!(
                "report belongs to study {:?}, not {study_id:?}",
                report.study_id
            )));
        }
        let tag = self.model_tag(store);
        if report.model_tag != tag {
            return Err(ModelError::StaleState(format!(
                "report was produced by model {}, current model is {tag}",
                report.model_tag
            )));
        }
        let tokens = report.tokens();
        let mut targets = tokens.to_vec();
        if report.hypothesis.finished {
            targets.push(EOS);
        }
        if targets.is_empty() {
            return Err(ModelError::Parameter("report has no tokens to explain".into()));
        }
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&targets[..targets.len() - 1]);

        let g = Graph::inference(store);
        let out = self.forward(&g, images, &inputs)?;
        let (rows, cols) = self.cfg.encoder.final_grid();
        let mut maps = Vec::new();
        for (position, &token) in targets.iter().enumerate() {
            for (layer, heads) in out.cross_weights.iter().enumerate() {
                for (head, &w) in heads.iter().enumerate() {
                    let raw = g.value(w).row(position).to_vec();
                    let scaled = scale_attention(&raw);
                    maps.push(AttentionMap {
                        position,
                        token,
                        layer,
                        head,
                        raw,
                        scaled,
                    });
                }
            }
        }
        Ok(AttentionExport {
            study_id: study_id.to_string(),
            views: images.len(),
            rows,
            cols,
            maps,
        })
    }
}
