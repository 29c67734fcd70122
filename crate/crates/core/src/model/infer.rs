//! Incremental (key/value cached) evaluation that reuses the graph's row
//! kernels in the same order, so every row matches the graph forward exactly.

use crate::nn::kernels;

use super::{Model, ModelError};

/// Per-layer key/value caches for one sequence.
pub struct Session<'m> {
    model: &'m Model,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    kernels::matmul_acc(x, w, &mut out, 1, x.len(), n);
    for (o, bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    out
}

fn norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_row(x, &mut out);
    for ((o, g), b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
    out
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every cached row from index `n` on.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len {
            return;
        }
        let d = self.model.config.d_model;
        for c in self.keys.iter_mut().chain(self.values.iter_mut()) {
            c.truncate(n * d);
        }
        self.len = n;
    }

    /// Appends one token and returns its final-normalized hidden row.
    /// `allowed[s]` says whether the new row may attend to row `s`; its
    /// length must be `len() + 1`.
    pub fn push(
        &mut self,
        word: usize,
        position_row: usize,
        segment: usize,
        allowed: &[bool],
    ) -> Result<Vec<f64>, ModelError> {
        let m = self.model;
        let cfg = &m.config;
        let lay = m.layout();
        let t = self.len;
        if allowed.len() != t + 1 || !allowed.contains(&true) {
            return Err(ModelError::Config(format!(
                "attention row for position {t} has length {} or allows nothing",
                allowed.len()
            )));
        }
        let d = cfg.d_model;
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let tensor = |i: usize| m.params.tensors[i].data();
        if word >= cfg.vocab_size {
            return Err(ModelError::Config(format!("token {word} outside vocabulary")));
        }
        let pos_table = if position_row < cfg.max_dialog_positions {
            &tensor(lay.dialog_pos)[position_row * d..(position_row + 1) * d]
        } else {
            let r = position_row - cfg.max_dialog_positions;
            let (tab, row) = (r / cfg.max_knowledge_positions, r % cfg.max_knowledge_positions);
            &tensor(lay.knowledge_pos[tab])[row * d..(row + 1) * d]
        };
        let w = &tensor(lay.word)[word * d..(word + 1) * d];
        let s = &tensor(lay.segment)[segment * d..(segment + 1) * d];
        let mut x: Vec<f64> = w.iter().zip(pos_table).zip(s).map(|((a, b), c)| a + b + c).collect();

        for (li, l) in lay.layers.iter().enumerate() {
            let h = norm(&x, tensor(l.ln1_gain), tensor(l.ln1_bias));
            let q = affine(&h, tensor(l.w_q), tensor(l.b_q), d);
            let k = affine(&h, tensor(l.w_k), &[], d);
            let v = affine(&h, tensor(l.w_v), tensor(l.b_v), d);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (keys, vals) = (&self.keys[li], &self.values[li]);
            let mut cat = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            let mut att = vec![0.0; t + 1];
            for hd in 0..cfg.n_heads {
                let (a, b) = (hd * dh, (hd + 1) * dh);
                for (s, sc) in scores.iter_mut().enumerate() {
                    *sc = kernels::dot(&q[a..b], &keys[s * d + a..s * d + b]) * scale;
                }
                kernels::softmax_row(&scores, Some(allowed), &mut att);
                let out = &mut cat[a..b];
                for (s, &av) in att.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (o, vv) in out.iter_mut().zip(&vals[s * d + a..s * d + b]) {
                        *o += av * vv;
                    }
                }
            }
            let proj = affine(&cat, tensor(l.w_o), tensor(l.b_o), d);
            for (xv, p) in x.iter_mut().zip(&proj) {
                *xv += p;
            }
            let h2 = norm(&x, tensor(l.ln2_gain), tensor(l.ln2_bias));
            let mut f = affine(&h2, tensor(l.w_fc), tensor(l.b_fc), cfg.d_ff);
            for v in f.iter_mut() {
                *v = kernels::gelu(*v);
            }
            let mlp = affine(&f, tensor(l.w_proj), tensor(l.b_proj), d);
            for (xv, p) in x.iter_mut().zip(&mlp) {
                *xv += p;
            }
            if !x.iter().all(|v| v.is_finite()) {
                self.truncate_layers_after_failure(t);
                return Err(ModelError::NonFinite { layer: li });
            }
        }
        self.len += 1;
        Ok(norm(&x, tensor(lay.final_gain), tensor(lay.final_bias)))
    }

    fn truncate_layers_after_failure(&mut self, t: usize) {
        let d = self.model.config.d_model;
        for c in self.keys.iter_mut().chain(self.values.iter_mut()) {
            c.truncate(t * d);
        }
    }
}
