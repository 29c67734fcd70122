//! Python bindings. Compound values cross the boundary as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use knowpos::assembly::{assemble as assemble_full, assemble_context, PositionScheme, SchemeKind, SpecialTokens, TableId};
use knowpos::data::{sample_from_json, sample_to_json, DialogueSample};
use knowpos::harness::{self, ModelResponder, ReportFile, RunLabels, ShuffleProtocol};
use knowpos::model::{load_checkpoint, save_checkpoint, Decode, Model, ModelConfig};
use knowpos::synth::{self, CorpusConfig};
use knowpos::trainer::{self, TrainConfig, Trainer};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_or_default<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(value_err),
    }
}

fn parse_samples(lines: Vec<String>) -> PyResult<Vec<DialogueSample>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| sample_from_json(l).map_err(|e| value_err(format!("sample {i}: {e}"))))
        .collect()
}

#[pyclass(name = "Model", module = "knowpos")]
struct PyModel {
    inner: Model,
    meta: serde_json::Value,
}

#[pymethods]
impl PyModel {
    /// Fresh model from a `ModelConfig` JSON document (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = parse_or_default(config_json)?;
        let inner = Model::init(cfg).map_err(value_err)?;
        Ok(Self {
            inner,
            meta: serde_json::json!({}),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(value_err)?;
        Ok(Self {
            inner: ck.model,
            meta: ck.meta,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, &self.meta).map_err(runtime_err)
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    #[getter]
    fn meta_json(&self) -> String {
        self.meta.to_string()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// Language-model logits (one row per token) and the classifier score
    /// for a full sample including its response.
    fn forward(&self, sample_json: &str) -> PyResult<(Vec<Vec<f64>>, f64)> {
        let s = sample_from_json(sample_json).map_err(value_err)?;
        let cfg = &self.inner.config;
        let input = assemble_full(&s, cfg.scheme, &SpecialTokens::default(), &cfg.limits()).map_err(value_err)?;
        let out = self.inner.forward(&input).map_err(runtime_err)?;
        let v = out.lm_logits.shape()[1];
        let rows = out.lm_logits.data().chunks(v).map(<[f64]>::to_vec).collect();
        Ok((rows, out.nsp_logit))
    }

    /// Greedy continuation of the sample's context; the response is ignored.
    #[pyo3(signature = (sample_json, max_new_tokens=16))]
    fn generate(&self, sample_json: &str, max_new_tokens: usize) -> PyResult<Vec<u32>> {
        let s = sample_from_json(sample_json).map_err(value_err)?;
        let cfg = &self.inner.config;
        let specials = SpecialTokens::default();
        let ctx = assemble_context(&s, cfg.scheme, &specials, &cfg.limits()).map_err(value_err)?;
        let out = self
            .inner
            .generate(&ctx, &specials, Decode::Greedy, max_new_tokens)
            .map_err(runtime_err)?;
        Ok(out)
    }

    /// Log-probabilities of the gold response tokens and closing eos.
    fn gold_log_probs(&self, sample_json: &str) -> PyResult<Vec<f64>> {
        let s = sample_from_json(sample_json).map_err(value_err)?;
        let cfg = &self.inner.config;
        let specials = SpecialTokens::default();
        let full = assemble_full(&s, cfg.scheme, &specials, &cfg.limits()).map_err(value_err)?;
        let r = self
            .inner
            .score_and_generate(&full, &specials, Decode::Greedy, 0)
            .map_err(runtime_err)?;
        Ok(r.gold_log_probs)
    }

    /// Trains in place on JSONL sample lines and returns the step records
    /// as JSON lines.
    #[pyo3(signature = (samples, train_config_json=None))]
    fn train(&mut self, py: Python<'_>, samples: Vec<String>, train_config_json: Option<&str>) -> PyResult<Vec<String>> {
        let data = parse_samples(samples)?;
        let tc: TrainConfig = parse_or_default(train_config_json)?;
        let mc = self.inner.config.clone();
        let model = &mut self.inner;
        let log = py
            .detach(|| {
                Trainer {
                    model_config: &mc,
                    train_config: &tc,
                    specials: SpecialTokens::default(),
                    start_step: 0,
                }
                .train(model, &data, |_| {})
            })
            .map_err(runtime_err)?;
        self.meta = serde_json::json!({
            "next_step": log.records.len(),
            "loss_mode": tc.loss_mode.as_str(),
        });
        Ok(log
            .records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes"))
            .collect())
    }

    /// Runs the shuffle protocol and returns the report file as JSON.
    #[pyo3(signature = (samples, protocol_json=None, loss_mode="unknown"))]
    fn shuffle_eval(&self, py: Python<'_>, samples: Vec<String>, protocol_json: Option<&str>, loss_mode: &str) -> PyResult<String> {
        let data = parse_samples(samples)?;
        let protocol: ShuffleProtocol = parse_or_default(protocol_json)?;
        let responder = ModelResponder {
            model: &self.inner,
            specials: SpecialTokens::default(),
            decode: protocol.decode,
            max_new_tokens: protocol.max_new_tokens,
        };
        let labels = RunLabels {
            scheme: self.inner.config.scheme.label(),
            loss_mode: loss_mode.to_string(),
        };
        let reports = py
            .detach(|| harness::shuffle_eval(&responder, &data, &protocol, &labels))
            .map_err(runtime_err)?;
        Ok(serde_json::to_string(&ReportFile::new(reports)).expect("report serializes"))
    }
}

/// Synthetic corpus as JSONL lines; `test=True` gives the held-out split.
#[pyfunction]
#[pyo3(signature = (config_json=None, test=false))]
fn generate_corpus(config_json: Option<&str>, test: bool) -> PyResult<Vec<String>> {
    let cfg: CorpusConfig = parse_or_default(config_json)?;
    let samples = if test {
        synth::generate_test_corpus(&cfg)
    } else {
        synth::generate_corpus(&cfg)
    }
    .map_err(value_err)?;
    Ok(samples.iter().map(|s| sample_to_json(s).to_string()).collect())
}

/// Id sequences for one sample. `context_only` stops at the response
/// speaker token.
#[pyfunction]
#[pyo3(signature = (sample_json, scheme="sequential", isolate_knowledge=false, context_only=false, max_dialog_positions=128, max_knowledge_positions=16, n_knowledge_slots=8))]
#[allow(clippy::too_many_arguments)]
fn assemble<'py>(
    py: Python<'py>,
    sample_json: &str,
    scheme: &str,
    isolate_knowledge: bool,
    context_only: bool,
    max_dialog_positions: usize,
    max_knowledge_positions: usize,
    n_knowledge_slots: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let s = sample_from_json(sample_json).map_err(value_err)?;
    let kind: SchemeKind = scheme.parse().map_err(value_err)?;
    let scheme = PositionScheme {
        kind,
        isolate_knowledge,
    };
    let limits = ModelConfig {
        max_dialog_positions,
        max_knowledge_positions,
        n_knowledge_slots,
        ..ModelConfig::default()
    }
    .limits();
    let specials = SpecialTokens::default();
    let a = if context_only {
        assemble_context(&s, scheme, &specials, &limits)
    } else {
        assemble_full(&s, scheme, &specials, &limits)
    }
    .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("word_ids", &a.word_ids)?;
    d.set_item("position_ids", &a.position_ids)?;
    let tables: Vec<String> = a
        .table_ids
        .iter()
        .map(|t| match t {
            TableId::Dialog => "dialog".to_string(),
            TableId::KnowledgeShared => "knowledge".to_string(),
            TableId::KnowledgeSlot(i) => format!("knowledge_{i}"),
        })
        .collect();
    d.set_item("table_ids", tables)?;
    d.set_item("segment_ids", &a.segment_ids)?;
    d.set_item("lm_label_mask", &a.lm_label_mask)?;
    d.set_item("knowledge_spans", &a.knowledge_spans)?;
    d.set_item("response_start", a.response_start)?;
    Ok(d)
}

#[pyfunction]
fn max_min_gap(values: Vec<f64>) -> Option<f64> {
    harness::max_min_gap(&values)
}

/// Perplexity from per-token natural-log probabilities.
#[pyfunction]
fn perplexity(log_probs: Vec<f64>) -> Option<f64> {
    harness::perplexity_from_log_probs(&log_probs).map(|p| p.value)
}

#[pyfunction]
#[pyo3(signature = (responses, max_n=4))]
fn self_bleu(responses: Vec<Vec<u32>>, max_n: usize) -> Option<f64> {
    harness::self_bleu(&responses, max_n).map(|b| b.score)
}

/// Classification loss for one gold score against distractor scores.
#[pyfunction]
fn nsp_loss(gold: f64, distractors: Vec<f64>) -> f64 {
    trainer::nsp_loss_value(gold, &distractors)
}

/// Side-by-side comparison of two report files given as JSON.
#[pyfunction]
fn compare_reports(a_json: &str, b_json: &str) -> PyResult<String> {
    let a: ReportFile = serde_json::from_str(a_json).map_err(value_err)?;
    let b: ReportFile = serde_json::from_str(b_json).map_err(value_err)?;
    let c = harness::compare(&a, &b).map_err(value_err)?;
    Ok(harness::format_comparison(&c))
}

#[pymodule]
#[pyo3(name = "knowpos")]
fn knowpos_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(max_min_gap, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(nsp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compare_reports, m)?)?;
    Ok(())
}
