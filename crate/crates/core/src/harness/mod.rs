//! Knowledge-order measurement: shuffle statements, respond, attribute
//! each response to the statement positions it realizes, and aggregate.

mod metrics;
mod report;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, permute_knowledge, SpecialTokens};
use crate::data::{DialogueSample, FactTriple, TokenId};
use crate::model::{Decode, Model};
use crate::rng::{derive_seed, derived_rng};

pub use metrics::{max_min_gap, mean_std, perplexity_from_log_probs, self_bleu, Perplexity, SelfBleu, PPL_EPSILON};
pub use report::{
    compare, emit_report, format_comparison, read_report, Comparison, ComparisonRow, OutputFormat, ReportFile,
    REPORT_SCHEMA_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("exact attribution needs fact annotations, sample {0} has none")]
    MissingFacts(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Incompatible(String),
    #[error("reports do not share k strata: {a:?} vs {b:?}")]
    StrataMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    ExactOracle,
    LexicalOverlap,
}

/// Per-statement attribution scores in `[0, 1]`, in the order given.
pub fn grounding_attribution(
    response: &[TokenId],
    knowledge: &[Vec<TokenId>],
    facts: Option<&[FactTriple]>,
    mode: AttributionMode,
) -> Result<Vec<f64>, HarnessError> {
    match mode {
        AttributionMode::ExactOracle => {
            let facts = facts.ok_or(HarnessError::MissingFacts(0))?;
            let mut scores = vec![0.0; knowledge.len()];
            // Objects are unique per sample, so the first object token in
            // the response decides the single credited statement.
            if let Some(i) = response
                .iter()
                .find_map(|t| facts.iter().position(|f| f.object == *t))
            {
                scores[i] = 1.0;
            }
            Ok(scores)
        }
        AttributionMode::LexicalOverlap => Ok(knowledge.iter().map(|s| lexical_overlap(response, s)).collect()),
    }
}

/// Fraction of the statement's n-grams (n = 3, or its length if shorter)
/// that also occur in the response.
pub fn lexical_overlap(response: &[TokenId], statement: &[TokenId]) -> f64 {
    let n = statement.len().min(3);
    if n == 0 || response.len() < n {
        return 0.0;
    }
    let grams: Vec<&[TokenId]> = statement.windows(n).collect();
    let hit = grams
        .iter()
        .filter(|g| response.windows(n).any(|w| w == **g))
        .count();
    (hit as f64 / grams.len() as f64).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShuffleProtocol {
    pub n_shuffles: usize,
    pub seed: u64,
    pub decode: Decode,
    pub max_new_tokens: usize,
    /// Evaluate only the first `n` samples.
    pub subset: Option<usize>,
    pub attribution: AttributionMode,
    /// Rotate the queried statement through the positions (see
    /// [`shuffle_permutation`]); off draws every order uniformly.
    pub counterbalance: bool,
    pub bleu_max_n: usize,
}

impl Default for ShuffleProtocol {
    fn default() -> Self {
        Self {
            n_shuffles: 50,
            seed: 0,
            decode: Decode::Greedy,
            max_new_tokens: 12,
            subset: None,
            attribution: AttributionMode::ExactOracle,
            counterbalance: true,
            bleu_max_n: 4,
        }
    }
}

impl ShuffleProtocol {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_shuffles == 0 {
            return Err(HarnessError::Protocol("n_shuffles must be at least 1".into()));
        }
        if self.bleu_max_n == 0 {
            return Err(HarnessError::Protocol("bleu_max_n must be at least 1".into()));
        }
        if let Decode::Temperature { tau, .. } = self.decode {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(HarnessError::Protocol(format!("temperature must be positive, got {tau}")));
            }
        }
        Ok(())
    }
}

/// Knowledge order for one (sample, shuffle) pair, as `new[j] = old[perm[j]]`.
///
/// With counterbalancing and a known gold index `g`, the gold statement is
/// placed at `(g + shuffle) mod k` and the others are shuffled around it.
/// Over a target-balanced corpus every run then sees the gold statement
/// equally often at each position.
pub fn shuffle_permutation(
    k: usize,
    gold: Option<usize>,
    seed: u64,
    sample: usize,
    shuffle: usize,
    counterbalance: bool,
) -> Vec<usize> {
    let mut rng = derived_rng(seed, &[sample as u64, shuffle as u64]);
    match gold.filter(|&g| counterbalance && g < k) {
        Some(g) => {
            let mut rest: Vec<usize> = (0..k).filter(|&i| i != g).collect();
            rest.shuffle(&mut rng);
            let slot = (g + shuffle) % k;
            rest.insert(slot, g);
            rest
        }
        None => {
            let mut p: Vec<usize> = (0..k).collect();
            p.shuffle(&mut rng);
            p
        }
    }
}

/// A response plus, when available, the log-probabilities of the gold
/// response tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Responded {
    pub tokens: Vec<TokenId>,
    pub gold_log_probs: Option<Vec<f64>>,
}

/// Anything that answers a (reordered) sample.
pub trait Responder: Sync {
    fn respond(&self, sample: &DialogueSample, pair_seed: u64) -> Result<Responded, String>;

    /// Up-front compatibility check against the dataset.
    fn check(&self, _dataset: &[DialogueSample]) -> Result<(), HarnessError> {
        Ok(())
    }
}

pub struct ModelResponder<'a> {
    pub model: &'a Model,
    pub specials: SpecialTokens,
    pub decode: Decode,
    pub max_new_tokens: usize,
}

impl Responder for ModelResponder<'_> {
    fn respond(&self, sample: &DialogueSample, pair_seed: u64) -> Result<Responded, String> {
        let cfg = &self.model.config;
        let full = assemble(sample, cfg.scheme, &self.specials, &cfg.limits()).map_err(|e| e.to_string())?;
        let decode = match self.decode {
            Decode::Greedy => Decode::Greedy,
            Decode::Temperature { tau, seed } => Decode::Temperature {
                tau,
                seed: derive_seed(seed, &[pair_seed]),
            },
        };
        let out = self
            .model
            .score_and_generate(&full, &self.specials, decode, self.max_new_tokens)
            .map_err(|e| e.to_string())?;
        Ok(Responded {
            tokens: out.generated,
            gold_log_probs: Some(out.gold_log_probs),
        })
    }

    fn check(&self, dataset: &[DialogueSample]) -> Result<(), HarnessError> {
        let cfg = &self.model.config;
        if cfg.scheme.kind == crate::assembly::SchemeKind::RestartPerSlot {
            if let Some(k) = dataset.iter().map(DialogueSample::k).max() {
                if k > cfg.n_knowledge_slots {
                    return Err(HarnessError::Incompatible(format!(
                        "data has {k} statements but the model has {} knowledge slots",
                        cfg.n_knowledge_slots
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Always restates whichever statement sits first in the input.
pub struct FirstPositionCopier;

impl Responder for FirstPositionCopier {
    fn respond(&self, sample: &DialogueSample, _: u64) -> Result<Responded, String> {
        Ok(Responded {
            tokens: sample.knowledge[0].clone(),
            gold_log_probs: None,
        })
    }
}

/// Always answers with the gold response, i.e. the queried fact.
pub struct QueriedFactOracle;

impl Responder for QueriedFactOracle {
    fn respond(&self, sample: &DialogueSample, _: u64) -> Result<Responded, String> {
        Ok(Responded {
            tokens: sample.response.clone(),
            gold_log_probs: None,
        })
    }
}

/// Per-stratum results of a shuffle evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderEffectReport {
    pub scheme: String,
    pub loss_mode: String,
    pub k: usize,
    pub per_position_mean: Vec<f64>,
    pub per_position_std: Vec<f64>,
    pub max_min_gap: f64,
    pub max_min_gap_std: f64,
    pub grounding_accuracy: f64,
    pub grounding_accuracy_std: f64,
    pub ppl_mean: Option<f64>,
    pub ppl_std: Option<f64>,
    pub ppl_clamped_tokens: usize,
    pub self_bleu_mean: Option<f64>,
    pub self_bleu_std: Option<f64>,
    pub self_bleu_orders: usize,
    pub n_shuffles: usize,
    pub n_samples: usize,
    pub n_excluded: usize,
    pub attribution: AttributionMode,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Default)]
struct RunStats {
    pos_sum: Vec<f64>,
    n: usize,
    correct: usize,
    log_probs: Vec<f64>,
    responses: Vec<Vec<TokenId>>,
}

struct Stratum {
    runs: Vec<RunStats>,
    samples: usize,
    excluded: usize,
}

/// Labels attached to every report of one evaluation.
#[derive(Clone, Debug)]
pub struct RunLabels {
    pub scheme: String,
    pub loss_mode: String,
}

type ShuffleOutcome = (Vec<f64>, usize, Responded);

/// Runs the shuffle protocol and returns one report per statement count,
/// in increasing `k`.
pub fn shuffle_eval(
    responder: &dyn Responder,
    dataset: &[DialogueSample],
    protocol: &ShuffleProtocol,
    labels: &RunLabels,
) -> Result<Vec<OrderEffectReport>, HarnessError> {
    protocol.validate()?;
    let data = &dataset[..protocol.subset.unwrap_or(dataset.len()).min(dataset.len())];
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if protocol.attribution == AttributionMode::ExactOracle {
        if let Some(i) = data.iter().position(|s| s.facts.is_none()) {
            return Err(HarnessError::MissingFacts(i));
        }
    }
    responder.check(data)?;

    let mut strata: BTreeMap<usize, Stratum> = BTreeMap::new();
    for s in data {
        let k = s.k();
        let st = strata.entry(k).or_insert_with(|| Stratum {
            runs: (0..protocol.n_shuffles)
                .map(|_| RunStats {
                    pos_sum: vec![0.0; k],
                    ..RunStats::default()
                })
                .collect(),
            samples: 0,
            excluded: 0,
        });
        st.samples += 1;
    }

    for r in 0..protocol.n_shuffles {
        // (attribution scores, gold slot, response) per sample
        let outcomes: Vec<Result<ShuffleOutcome, String>> = data
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let k = s.k();
                let perm = shuffle_permutation(k, s.gold_grounding, protocol.seed, i, r, protocol.counterbalance);
                let ps = permute_knowledge(s, &perm).map_err(|e| e.to_string())?;
                let pair = derive_seed(protocol.seed, &[i as u64, r as u64]);
                let out = responder.respond(&ps, pair)?;
                let scores = grounding_attribution(&out.tokens, &ps.knowledge, ps.facts.as_deref(), protocol.attribution)
                    .map_err(|e| e.to_string())?;
                let gold = ps.gold_grounding.unwrap_or(usize::MAX);
                Ok((scores, gold, out))
            })
            .collect();
        for (s, outcome) in data.iter().zip(outcomes) {
            let st = strata.get_mut(&s.k()).expect("stratum");
            let (scores, gold, out) = match outcome {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("sample excluded in shuffle {r}: {e}");
                    st.excluded += 1;
                    continue;
                }
            };
            let run = &mut st.runs[r];
            for (acc, v) in run.pos_sum.iter_mut().zip(&scores) {
                *acc += v;
            }
            run.n += 1;
            if grounds_gold(&scores, gold, protocol.attribution) {
                run.correct += 1;
            }
            if let Some(lp) = out.gold_log_probs {
                run.log_probs.extend(lp);
            }
            run.responses.push(out.tokens);
        }
    }

    Ok(strata
        .into_iter()
        .map(|(k, st)| summarize(k, st, protocol, labels))
        .collect())
}

fn grounds_gold(scores: &[f64], gold: usize, mode: AttributionMode) -> bool {
    let Some(&g) = scores.get(gold) else {
        return false;
    };
    match mode {
        AttributionMode::ExactOracle => g == 1.0,
        AttributionMode::LexicalOverlap => g > 0.0 && scores.iter().enumerate().all(|(i, &v)| i == gold || v < g),
    }
}

fn summarize(k: usize, st: Stratum, protocol: &ShuffleProtocol, labels: &RunLabels) -> OrderEffectReport {
    let runs: Vec<&RunStats> = st.runs.iter().filter(|r| r.n > 0).collect();
    let total: usize = runs.iter().map(|r| r.n).sum();
    let mut notes = Vec::new();

    let mut per_position_mean = vec![0.0; k];
    let mut per_position_std = vec![0.0; k];
    for p in 0..k {
        let pooled: f64 = runs.iter().map(|r| r.pos_sum[p]).sum();
        per_position_mean[p] = if total > 0 { pooled / total as f64 } else { 0.0 };
        let per_run: Vec<f64> = runs.iter().map(|r| r.pos_sum[p] / r.n as f64).collect();
        per_position_std[p] = mean_std(&per_run).1;
    }
    let run_gaps: Vec<f64> = runs
        .iter()
        .map(|r| {
            let m: Vec<f64> = r.pos_sum.iter().map(|v| v / r.n as f64).collect();
            max_min_gap(&m).unwrap_or(0.0)
        })
        .collect();
    let acc: Vec<f64> = runs.iter().map(|r| r.correct as f64 / r.n as f64).collect();

    let mut clamped = 0;
    let ppl: Vec<f64> = runs
        .iter()
        .filter_map(|r| perplexity_from_log_probs(&r.log_probs))
        .map(|p| {
            clamped += p.clamped;
            p.value
        })
        .collect();
    if clamped > 0 {
        notes.push(format!(
            "{clamped} gold tokens had probability below {PPL_EPSILON:e} and were clamped"
        ));
    }

    let mut orders = 0;
    let bleu: Vec<f64> = runs
        .iter()
        .filter_map(|r| self_bleu(&r.responses, protocol.bleu_max_n))
        .map(|b| {
            orders = orders.max(b.orders);
            b.score
        })
        .collect();
    if !bleu.is_empty() && orders < protocol.bleu_max_n {
        notes.push(format!(
            "responses shorter than {} tokens: Self-BLEU uses orders 1..{orders}",
            protocol.bleu_max_n
        ));
    }
    if st.excluded > 0 {
        notes.push(format!("{} (sample, shuffle) pairs excluded after errors", st.excluded));
    }

    let some_stats = |v: &[f64]| {
        if v.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(v);
            (Some(m), Some(s))
        }
    };
    let (ppl_mean, ppl_std) = some_stats(&ppl);
    let (self_bleu_mean, self_bleu_std) = some_stats(&bleu);
    let (acc_mean, acc_std) = if acc.is_empty() { (0.0, 0.0) } else { mean_std(&acc) };
    let gap_std = if run_gaps.is_empty() { 0.0 } else { mean_std(&run_gaps).1 };

    OrderEffectReport {
        scheme: labels.scheme.clone(),
        loss_mode: labels.loss_mode.clone(),
        k,
        max_min_gap: max_min_gap(&per_position_mean).unwrap_or(0.0),
        max_min_gap_std: gap_std,
        per_position_mean,
        per_position_std,
        grounding_accuracy: acc_mean,
        grounding_accuracy_std: acc_std,
        ppl_mean,
        ppl_std,
        ppl_clamped_tokens: clamped,
        self_bleu_mean,
        self_bleu_std,
        self_bleu_orders: orders,
        n_shuffles: protocol.n_shuffles,
        n_samples: st.samples,
        n_excluded: st.excluded,
        attribution: protocol.attribution,
        notes,
    }
}
