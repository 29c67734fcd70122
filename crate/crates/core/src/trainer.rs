//! Language-model plus next-response classification training.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, assemble_with_response, permute_knowledge, AssembledInput, AssemblyError, SpecialTokens};
use crate::data::{DialogueSample, TokenId};
use crate::model::{GraphModel, GraphParams, Model, ModelConfig, ModelError};
use crate::nn::{kernels, Adam, Graph, NnError, NodeId, Tensor};
use crate::rng::{derived_rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "transfertransfo")]
    TransferTransfo,
    #[serde(rename = "lm_only", alias = "lm-only")]
    LmOnly,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TransferTransfo => "transfertransfo",
            Self::LmOnly => "lm_only",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "transfertransfo" => Ok(Self::TransferTransfo),
            "lm_only" | "lm-only" => Ok(Self::LmOnly),
            _ => Err(format!("unknown loss mode {s:?} (expected transfertransfo or lm-only)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub lm_coefficient: f64,
    pub n_distractors: usize,
    /// Extra knowledge orders added per sample; 0 turns augmentation off.
    pub permute_augment: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay on weight matrices; 0 disables it.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::TransferTransfo,
            lm_coefficient: 2.0,
            n_distractors: 1,
            permute_augment: 0,
            epochs: 3,
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale fine-tuning hyperparameters, kept for reference.
    pub fn full_scale_preset() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 6.25e-5,
            epochs: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lm_coefficient > 0.0 && self.lm_coefficient.is_finite()) {
            return bad(format!("lm_coefficient must be positive, got {}", self.lm_coefficient));
        }
        if self.loss_mode == LossMode::TransferTransfo && self.n_distractors == 0 {
            return bad("n_distractors must be at least 1 for transfertransfo".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no trainable samples: all {0} overflow the position tables")]
    AllSkipped(usize),
    #[error("dataset of {size} samples cannot supply {n} distractors")]
    TooFewDistractors { size: usize, n: usize },
    #[error("{n} extra orders requested but only {max} exist for {k} statements")]
    TooManyPermutations { n: usize, max: usize, k: usize },
    #[error("empty label mask")]
    EmptyLabelMask,
    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: u64, what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// Rows whose logits predict the labelled tokens, and those tokens.
pub fn lm_targets(word_ids: &[TokenId], label_mask: &[bool]) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (t, (&w, &m)) in word_ids.iter().zip(label_mask).enumerate() {
        if m && t > 0 {
            rows.push(t - 1);
            targets.push(w as usize);
        }
    }
    if rows.is_empty() {
        return Err(TrainError::EmptyLabelMask);
    }
    Ok((rows, targets))
}

/// Mean cross-entropy of labelled tokens given full `[L × V]` logits.
pub fn lm_loss(g: &mut Graph, lm_logits: NodeId, word_ids: &[TokenId], label_mask: &[bool]) -> Result<NodeId, TrainError> {
    let (rows, targets) = lm_targets(word_ids, label_mask)?;
    let sel = g.gather(lm_logits, &rows)?;
    Ok(g.cross_entropy(sel, &targets)?)
}

/// Cross-entropy of picking the gold candidate among `[gold, distractors…]`.
/// Each logit node is `[1 × 1]`.
pub fn nsp_loss(g: &mut Graph, gold: NodeId, distractors: &[NodeId]) -> Result<NodeId, TrainError> {
    if distractors.is_empty() {
        return Err(TrainError::Config("nsp_loss needs at least one distractor".into()));
    }
    let mut parts = vec![gold];
    parts.extend_from_slice(distractors);
    let row = g.concat_cols(&parts)?;
    Ok(g.cross_entropy(row, &[0])?)
}

/// Plain-number version of [`nsp_loss`].
pub fn nsp_loss_value(gold: f64, distractors: &[f64]) -> f64 {
    let mut all = vec![gold];
    all.extend_from_slice(distractors);
    kernels::log_sum_exp(&all) - gold
}

/// `lm_coefficient·lm + nsp` or `lm` alone.
pub fn total_loss(lm: f64, nsp: f64, cfg: &TrainConfig) -> f64 {
    match cfg.loss_mode {
        LossMode::TransferTransfo => cfg.lm_coefficient * lm + nsp,
        LossMode::LmOnly => lm,
    }
}

/// Learning rate after `step` of `total` optimizer steps.
pub fn linear_lr(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64)
}

/// `n` responses drawn uniformly without replacement from other samples
/// whose response differs from the current one.
pub fn sample_distractors(
    dataset: &[DialogueSample],
    current: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<TokenId>>, TrainError> {
    let gold = &dataset[current].response;
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&j| j != current && &dataset[j].response != gold)
        .collect();
    if eligible.len() < n {
        return Err(TrainError::TooFewDistractors {
            size: dataset.len(),
            n,
        });
    }
    Ok(rand::seq::index::sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| dataset[eligible[i]].response.clone())
        .collect())
}

fn factorial_capped(k: usize) -> usize {
    (1..=k).try_fold(1usize, |a, b| a.checked_mul(b)).unwrap_or(usize::MAX)
}

/// The sample followed by `n` copies with distinct, non-identity knowledge
/// orders.
pub fn augment_permutations(sample: &DialogueSample, n: usize, rng: &mut Rng) -> Result<Vec<DialogueSample>, TrainError> {
    let k = sample.knowledge.len();
    let max = factorial_capped(k).saturating_sub(1);
    if n > max {
        return Err(TrainError::TooManyPermutations { n, max, k });
    }
    let identity: Vec<usize> = (0..k).collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::from([identity.clone()]);
    let mut out = vec![sample.clone()];
    while out.len() <= n {
        let mut p = identity.clone();
        p.shuffle(rng);
        if seen.insert(p.clone()) {
            out.push(permute_knowledge(sample, &p)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub lm_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nsp_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub skipped_overflow: usize,
    pub n_examples: usize,
    /// How many times the classification head was evaluated.
    pub nsp_evaluations: u64,
    pub checkpoint: Option<String>,
}

/// Step records, one JSON object per line.
pub fn write_log_record(w: &mut impl std::io::Write, rec: &StepRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}

/// Reads a step log written by [`write_log_record`]; errors name the line.
pub fn read_log_jsonl(text: &str) -> Result<Vec<StepRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// One trainable unit: a sample with its gold layout and the data needed
/// to rebuild distractor layouts.
struct Example {
    sample: DialogueSample,
    source: usize,
    gold: AssembledInput,
}

pub struct Trainer<'a> {
    pub model_config: &'a ModelConfig,
    pub train_config: &'a TrainConfig,
    pub specials: SpecialTokens,
    /// Step number of the first update, for resumed runs.
    pub start_step: u64,
}

struct ExampleLoss {
    lm: f64,
    nsp: Option<f64>,
    total: f64,
}

impl Trainer<'_> {
    fn example_loss(
        &self,
        model: &Model,
        ex: &Example,
        distractors: &[Vec<TokenId>],
        grads: &mut [Tensor],
        weight: f64,
        nsp_evals: &mut u64,
    ) -> Result<ExampleLoss, TrainError> {
        let cfg = self.train_config;
        let mut g = Graph::new();
        let gp = GraphParams::register(&mut g, &model.params, true);
        let gm = GraphModel { model, params: &gp };
        let h = gm.hidden(&mut g, &ex.gold)?;
        let (rows, targets) = lm_targets(&ex.gold.word_ids, &ex.gold.lm_label_mask)?;
        let logits = gm.lm_logits(&mut g, h, &rows)?;
        let lm = g.cross_entropy(logits, &targets)?;
        let (loss, nsp) = match cfg.loss_mode {
            LossMode::LmOnly => (lm, None),
            LossMode::TransferTransfo => {
                let gold = gm.nsp_logit(&mut g, h)?;
                *nsp_evals += 1;
                let mut others = Vec::with_capacity(distractors.len());
                for resp in distractors {
                    let input = assemble_with_response(
                        &ex.sample,
                        resp,
                        self.model_config.scheme,
                        &self.specials,
                        &self.model_config.limits(),
                    )?;
                    let hd = gm.hidden(&mut g, &input)?;
                    others.push(gm.nsp_logit(&mut g, hd)?);
                    *nsp_evals += 1;
                }
                let nsp = nsp_loss(&mut g, gold, &others)?;
                let scaled = g.scale(lm, cfg.lm_coefficient);
                (g.add(scaled, nsp)?, Some(nsp))
            }
        };
        let lm_v = g.value(lm).item();
        let nsp_v = nsp.map(|n| g.value(n).item());
        let total = g.value(loss).item();
        if total.is_finite() {
            let gr = g.backward(loss)?;
            for (acc, &id) in grads.iter_mut().zip(&gp.ids) {
                gr.accumulate_into(id, acc, weight);
            }
        }
        Ok(ExampleLoss {
            lm: lm_v,
            nsp: nsp_v,
            total,
        })
    }

    /// Trains `model` in place. `on_step` sees every record as it is made.
    pub fn train(
        &self,
        model: &mut Model,
        corpus: &[DialogueSample],
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<TrainLog, TrainError> {
        let cfg = self.train_config;
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let limits = self.model_config.limits();
        let scheme = self.model_config.scheme;

        let mut log = TrainLog::default();
        let mut examples = Vec::new();
        for (i, s) in corpus.iter().enumerate() {
            let mut rng = derived_rng(cfg.seed, &[1, i as u64]);
            for v in augment_permutations(s, cfg.permute_augment, &mut rng)? {
                match assemble(&v, scheme, &self.specials, &limits) {
                    Ok(gold) => {
                        model.check_input(&gold)?;
                        examples.push(Example {
                            sample: v,
                            source: i,
                            gold,
                        })
                    }
                    Err(AssemblyError::Overflow { .. }) => log.skipped_overflow += 1,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        if examples.is_empty() {
            return Err(TrainError::AllSkipped(log.skipped_overflow));
        }
        log.n_examples = examples.len();

        let per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
        let total_steps = per_epoch * cfg.epochs as u64;
        let mut adam = Adam::new(&model.params.tensors);
        adam.weight_decay = cfg.weight_decay;
        let mut dist_rng = derived_rng(cfg.seed, &[2]);
        let mut s = 0u64;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut derived_rng(cfg.seed, &[3, epoch as u64]));
            for batch in order.chunks(cfg.batch_size) {
                let step = self.start_step + s;
                let lr = linear_lr(cfg.learning_rate, s, total_steps);
                let mut grads: Vec<Tensor> = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
                let w = 1.0 / batch.len() as f64;
                let (mut lm, mut nsp, mut total) = (0.0, 0.0, 0.0);
                for &e in batch {
                    let ex = &examples[e];
                    let distractors = match cfg.loss_mode {
                        LossMode::TransferTransfo => {
                            sample_distractors(corpus, ex.source, cfg.n_distractors, &mut dist_rng)?
                        }
                        LossMode::LmOnly => Vec::new(),
                    };
                    let l = self
                        .example_loss(model, ex, &distractors, &mut grads, w, &mut log.nsp_evaluations)
                        .map_err(|err| match err {
                            TrainError::Model(ModelError::NonFinite { .. }) => TrainError::Diverged {
                                step,
                                what: "activation",
                            },
                            other => other,
                        })?;
                    if !l.total.is_finite() {
                        return Err(TrainError::Diverged { step, what: "loss" });
                    }
                    lm += l.lm * w;
                    nsp += l.nsp.unwrap_or(0.0) * w;
                    total += l.total * w;
                }
                adam.step(&mut model.params.tensors, &grads, lr).map_err(|e| match e {
                    NnError::NonFinite { .. } => TrainError::Diverged { step, what: "gradient" },
                    other => other.into(),
                })?;
                if !model.params.all_finite() {
                    return Err(TrainError::Diverged { step, what: "parameter" });
                }
                let rec = StepRecord {
                    step,
                    lr,
                    lm_loss: lm,
                    nsp_loss: (cfg.loss_mode == LossMode::TransferTransfo).then_some(nsp),
                    total_loss: total,
                };
                on_step(&rec);
                log.records.push(rec);
                s += 1;
            }
        }
        Ok(log)
    }
}

/// Fraction of samples whose gold response outscores every distractor on
/// the classification head.
pub fn nsp_accuracy(
    model: &Model,
    dataset: &[DialogueSample],
    n_distractors: usize,
    specials: &SpecialTokens,
    seed: u64,
) -> Result<f64, TrainError> {
    let cfg = &model.config;
    let mut rng = derived_rng(seed, &[4]);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, s) in dataset.iter().enumerate() {
        let gold = match assemble(s, cfg.scheme, specials, &cfg.limits()) {
            Ok(g) => g,
            Err(AssemblyError::Overflow { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let gs = model.nsp_score(&gold)?;
        let mut best_other = f64::NEG_INFINITY;
        for resp in sample_distractors(dataset, i, n_distractors, &mut rng)? {
            let input = assemble_with_response(s, &resp, cfg.scheme, specials, &cfg.limits())?;
            best_other = best_other.max(model.nsp_score(&input)?);
        }
        total += 1;
        if gs > best_other {
            correct += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}
