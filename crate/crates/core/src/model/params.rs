use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assembly::{AssemblyLimits, PositionScheme, SchemeKind, TableId, N_SEGMENTS};
use crate::nn::Tensor;
use crate::rng::rng_from;

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_dialog_positions: usize,
    pub max_knowledge_positions: usize,
    pub n_knowledge_slots: usize,
    pub scheme: PositionScheme,
    pub init_std: f64,
    pub position_init: PositionInit,
    pub seed: u64,
}

/// Starting values of the (learned) position tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionInit {
    /// Gaussian, like every other table.
    Random,
    /// Sine/cosine rows with the same per-coordinate RMS as the Gaussian.
    Sinusoidal,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 320,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_dialog_positions: 64,
            max_knowledge_positions: 16,
            n_knowledge_slots: 5,
            scheme: PositionScheme::new(SchemeKind::Sequential),
            init_std: 0.02,
            position_init: PositionInit::Random,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 7 {
            return bad(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive".into());
        }
        if self.max_dialog_positions == 0 {
            return bad("max_dialog_positions must be positive".into());
        }
        if self.scheme.kind.restarts() && self.max_knowledge_positions == 0 {
            return bad("restart schemes need max_knowledge_positions > 0".into());
        }
        if self.scheme.kind == SchemeKind::RestartPerSlot && self.n_knowledge_slots == 0 {
            return bad("restart-per-slot needs n_knowledge_slots > 0".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of knowledge position tables the scheme allocates.
    pub fn n_knowledge_tables(&self) -> usize {
        match self.scheme.kind {
            SchemeKind::Sequential => 0,
            SchemeKind::RestartShared => 1,
            SchemeKind::RestartPerSlot => self.n_knowledge_slots,
        }
    }

    pub fn limits(&self) -> AssemblyLimits {
        AssemblyLimits {
            max_dialog_positions: self.max_dialog_positions,
            max_knowledge_positions: self.max_knowledge_positions,
            n_knowledge_slots: self.n_knowledge_slots,
        }
    }

    /// Row of the stacked position tables that `(table, pos)` refers to.
    pub fn position_row(&self, table: TableId, pos: usize) -> Result<usize, ModelError> {
        let (offset, len) = match (table, self.scheme.kind) {
            (TableId::Dialog, _) => (0, self.max_dialog_positions),
            (TableId::KnowledgeShared, SchemeKind::RestartShared) => {
                (self.max_dialog_positions, self.max_knowledge_positions)
            }
            (TableId::KnowledgeSlot(i), SchemeKind::RestartPerSlot) if i < self.n_knowledge_slots => (
                self.max_dialog_positions + i * self.max_knowledge_positions,
                self.max_knowledge_positions,
            ),
            (t, kind) => {
                return Err(ModelError::TableMismatch(format!(
                    "table {t:?} is not available under {kind} ({} knowledge tables)",
                    self.n_knowledge_tables()
                )))
            }
        };
        if pos >= len {
            return Err(ModelError::TableMismatch(format!(
                "position {pos} outside {table:?} table of {len} rows"
            )));
        }
        Ok(offset + pos)
    }
}

/// Indices of one transformer block's tensors inside [`ModelParams`].
/// Keys carry no bias: it would shift every score of a row equally.
#[derive(Clone, Copy, Debug)]
pub struct LayerSlots {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Declared order of every learnable table.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub word: usize,
    pub segment: usize,
    pub dialog_pos: usize,
    pub knowledge_pos: Vec<usize>,
    pub layers: Vec<LayerSlots>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub nsp_weight: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let word = add("word".into(), vec![cfg.vocab_size, d]);
        let segment = add("segment".into(), vec![N_SEGMENTS, d]);
        let dialog_pos = add("position.dialog".into(), vec![cfg.max_dialog_positions, d]);
        let knowledge_pos = (0..cfg.n_knowledge_tables())
            .map(|i| add(format!("position.knowledge.{i}"), vec![cfg.max_knowledge_positions, d]))
            .collect();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut p = |n: &str, s: Vec<usize>| add(format!("layer.{l}.{n}"), s);
                LayerSlots {
                    ln1_gain: p("ln1.gain", vec![d]),
                    ln1_bias: p("ln1.bias", vec![d]),
                    w_q: p("attn.w_q", vec![d, d]),
                    b_q: p("attn.b_q", vec![d]),
                    w_k: p("attn.w_k", vec![d, d]),
                    w_v: p("attn.w_v", vec![d, d]),
                    b_v: p("attn.b_v", vec![d]),
                    w_o: p("attn.w_o", vec![d, d]),
                    b_o: p("attn.b_o", vec![d]),
                    ln2_gain: p("ln2.gain", vec![d]),
                    ln2_bias: p("ln2.bias", vec![d]),
                    w_fc: p("mlp.w_fc", vec![d, cfg.d_ff]),
                    b_fc: p("mlp.b_fc", vec![cfg.d_ff]),
                    w_proj: p("mlp.w_proj", vec![cfg.d_ff, d]),
                    b_proj: p("mlp.b_proj", vec![d]),
                }
            })
            .collect();
        let final_gain = add("final_ln.gain".into(), vec![d]);
        let final_bias = add("final_ln.bias".into(), vec![d]);
        let nsp_weight = add("nsp.weight".into(), vec![d, 1]);
        Self {
            word,
            segment,
            dialog_pos,
            knowledge_pos,
            layers,
            final_gain,
            final_bias,
            nsp_weight,
            names,
            shapes,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// All learnable tensors, in [`ParamLayout`] order. The LM head reuses the
/// word table, so there is no separate output matrix. The classification
/// head has no bias since only differences between candidates matter.
fn sinusoid(rows: usize, d: usize, amplitude: f64) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for p in 0..rows {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = p as f64 * freq;
            data[p * d + i] = amplitude * if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![rows, d], data).expect("shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Gaussian init for matrices and tables, unit gains, zero biases.
    /// Every per-slot knowledge table receives the same draw.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        let mut rng = rng_from(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
        let mut draw = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let mut tensors = Vec::with_capacity(layout.len());
        let mut knowledge_draw: Option<Tensor> = None;
        for (name, shape) in layout.names.iter().zip(&layout.shapes) {
            let t = if name.ends_with(".gain") {
                Tensor::filled(shape, 1.0)
            } else if name.contains("bias") || name.contains(".b_") {
                Tensor::zeros(shape)
            } else if name.starts_with("position.") && cfg.position_init == PositionInit::Sinusoidal {
                sinusoid(shape[0], shape[1], cfg.init_std * std::f64::consts::SQRT_2)
            } else if name.starts_with("position.knowledge") {
                knowledge_draw.get_or_insert_with(|| draw(shape)).clone()
            } else {
                draw(shape)
            };
            tensors.push(t);
        }
        Ok(Self { tensors })
    }

    /// Zero-filled parameters with the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layout = ParamLayout::new(cfg);
        Self {
            tensors: layout.shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
