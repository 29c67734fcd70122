//! Decoder-only transformer with a tied LM head, a next-response
//! classification head and scheme-dependent position tables.

mod checkpoint;
mod forward;
mod infer;
mod params;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::assembly::{attention_mask, AssembledInput, AssemblyError, SpecialTokens, TableId, SEG_SELF};
use crate::data::TokenId;
use crate::nn::{kernels, Graph, NnError, Tensor};
use crate::rng::rng_from;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{GraphModel, GraphParams};
pub use infer::Session;
pub use params::{LayerSlots, ModelConfig, ModelParams, ParamLayout, PositionInit};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("position table mismatch: {0}")]
    TableMismatch(String),
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("parameter shapes do not match the config: {0}")]
    ParamShape(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Output of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[L × V]`
    pub lm_logits: Tensor,
    pub nsp_logit: f64,
}

/// How tokens are chosen during generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decode {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

/// Gold-response scores plus a generated response for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredGeneration {
    /// Natural-log probability of each labelled gold token (response + eos).
    pub gold_log_probs: Vec<f64>,
    pub generated: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    layout: ParamLayout,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.tensors.len() != layout.len() {
            return Err(ModelError::ParamShape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.tensors.len()
            )));
        }
        for ((t, shape), name) in params.tensors.iter().zip(&layout.shapes).zip(&layout.names) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params, layout })
    }

    /// Fresh model with seeded initialization.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        let params = ModelParams::init(&config)?;
        Self::new(config, params)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Checks that an assembled input fits this model's tables.
    pub fn check_input(&self, input: &AssembledInput) -> Result<(), ModelError> {
        if input.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        for (&t, &p) in input.table_ids.iter().zip(&input.position_ids) {
            self.config.position_row(t, p)?;
        }
        if let Some(&w) = input.word_ids.iter().find(|&&w| w as usize >= self.config.vocab_size) {
            return Err(ModelError::Config(format!(
                "token {w} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full forward pass on the autodiff graph (no gradients kept).
    pub fn forward(&self, input: &AssembledInput) -> Result<ForwardOutput, ModelError> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let gp = GraphParams::register(&mut g, &self.params, false);
        let gm = GraphModel { model: self, params: &gp };
        let h = gm.hidden(&mut g, input)?;
        let logits = gm.all_lm_logits(&mut g, h)?;
        let nsp = gm.nsp_logit(&mut g, h)?;
        Ok(ForwardOutput {
            lm_logits: g.value(logits).clone(),
            nsp_logit: g.value(nsp).item(),
        })
    }

    /// Same outputs as [`Model::forward`], computed row by row with a cache.
    pub fn forward_cached(&self, input: &AssembledInput) -> Result<ForwardOutput, ModelError> {
        self.check_input(input)?;
        let mut sess = Session::new(self);
        let rows = self.prefill(&mut sess, input)?;
        let v = self.config.vocab_size;
        let mut data = Vec::with_capacity(rows.len() * v);
        for h in &rows {
            data.extend(self.logits_row(h));
        }
        Ok(ForwardOutput {
            lm_logits: Tensor::new(vec![rows.len(), v], data)?,
            nsp_logit: self.nsp_from_row(rows.last().expect("non-empty")),
        })
    }

    /// Runs every input row through `sess`, returning final hidden rows.
    pub fn prefill(&self, sess: &mut Session<'_>, input: &AssembledInput) -> Result<Vec<Vec<f64>>, ModelError> {
        let mask = attention_mask(input);
        let mut rows = Vec::with_capacity(input.len());
        for t in sess.len()..input.len() {
            let row = self.config.position_row(input.table_ids[t], input.position_ids[t])?;
            rows.push(sess.push(
                input.word_ids[t] as usize,
                row,
                input.segment_ids[t],
                &mask.row(t)[..=t],
            )?);
        }
        Ok(rows)
    }

    /// LM logits for one final hidden row.
    pub fn logits_row(&self, h: &[f64]) -> Vec<f64> {
        let v = self.config.vocab_size;
        let mut out = vec![0.0; v];
        kernels::matmul_nt_acc(h, self.params.tensors[self.layout.word].data(), &mut out, 1, h.len(), v);
        out
    }

    pub fn nsp_from_row(&self, h: &[f64]) -> f64 {
        let mut out = [0.0];
        kernels::matmul_acc(h, self.params.tensors[self.layout.nsp_weight].data(), &mut out, 1, h.len(), 1);
        out[0]
    }

    /// Classification-head logit for a complete input.
    pub fn nsp_score(&self, input: &AssembledInput) -> Result<f64, ModelError> {
        self.check_input(input)?;
        let mut sess = Session::new(self);
        let rows = self.prefill(&mut sess, input)?;
        Ok(self.nsp_from_row(rows.last().expect("non-empty")))
    }

    /// Scores the gold response of `full` (built by `assemble`) and then
    /// generates a fresh response from the same context.
    pub fn score_and_generate(
        &self,
        full: &AssembledInput,
        specials: &SpecialTokens,
        decode: Decode,
        max_new: usize,
    ) -> Result<ScoredGeneration, ModelError> {
        self.check_input(full)?;
        let rs = full.response_start;
        if rs == 0 || rs >= full.len() {
            return Err(ModelError::Config("input has no labelled response".into()));
        }
        let mut sess = Session::new(self);
        let rows = self.prefill(&mut sess, full)?;
        let mut gold = Vec::with_capacity(full.len() - rs);
        for t in rs..full.len() {
            let logits = self.logits_row(&rows[t - 1]);
            let lse = kernels::log_sum_exp(&logits);
            gold.push(logits[full.word_ids[t] as usize] - lse);
        }
        sess.truncate(rs);
        let mut context = full.clone();
        context.word_ids.truncate(rs);
        context.position_ids.truncate(rs);
        context.table_ids.truncate(rs);
        context.segment_ids.truncate(rs);
        context.lm_label_mask.truncate(rs);
        let generated = self.continue_generation(&mut sess, &context, rows[rs - 1].clone(), specials, decode, max_new)?;
        Ok(ScoredGeneration {
            gold_log_probs: gold,
            generated,
        })
    }

    /// Generates a response for a context built by `assemble_context`.
    /// The closing eos is not included in the result.
    pub fn generate(
        &self,
        context: &AssembledInput,
        specials: &SpecialTokens,
        decode: Decode,
        max_new: usize,
    ) -> Result<Vec<TokenId>, ModelError> {
        self.check_input(context)?;
        let mut sess = Session::new(self);
        let rows = self.prefill(&mut sess, context)?;
        let last = rows.last().expect("non-empty").clone();
        self.continue_generation(&mut sess, context, last, specials, decode, max_new)
    }

    fn continue_generation(
        &self,
        sess: &mut Session<'_>,
        context: &AssembledInput,
        mut last: Vec<f64>,
        specials: &SpecialTokens,
        decode: Decode,
        max_new: usize,
    ) -> Result<Vec<TokenId>, ModelError> {
        let mut rng = match decode {
            Decode::Greedy => None,
            Decode::Temperature { tau, seed } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(ModelError::Config(format!("temperature must be positive, got {tau}")));
                }
                Some(rng_from(seed))
            }
        };
        let mut pos = context.next_dialog_position();
        let mut out = Vec::new();
        while out.len() < max_new && pos < self.config.max_dialog_positions {
            let mut logits = self.logits_row(&last);
            // Structural tokens other than eos never appear inside a response.
            for s in specials.all() {
                if s != specials.eos {
                    logits[s as usize] = f64::NEG_INFINITY;
                }
            }
            let tok = match (&mut rng, decode) {
                (Some(r), Decode::Temperature { tau, .. }) => {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
                    let lse = kernels::log_sum_exp(&scaled);
                    let u: f64 = r.random();
                    let mut acc = 0.0;
                    let mut pick = scaled.len() - 1;
                    for (i, l) in scaled.iter().enumerate() {
                        acc += (l - lse).exp();
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
                _ => argmax(&logits),
            } as TokenId;
            if tok == specials.eos {
                break;
            }
            out.push(tok);
            let allowed = vec![true; sess.len() + 1];
            let row = self.config.position_row(TableId::Dialog, pos)?;
            last = sess.push(tok as usize, row, SEG_SELF, &allowed)?;
            pos += 1;
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
