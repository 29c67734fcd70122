//! Differentiable forward pass recorded on an autodiff [`Graph`].

use std::rc::Rc;

use crate::assembly::{attention_mask, AssembledInput};
use crate::nn::{Graph, NodeId};

use super::{Model, ModelError, ModelParams};

/// Parameter leaves of one model registered on a graph.
pub struct GraphParams {
    pub ids: Vec<NodeId>,
}

impl GraphParams {
    /// Registers every tensor; `trainable` decides whether gradients flow.
    pub fn register(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let ids = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self { ids }
    }
}

/// Graph-building view of a model: configuration plus parameter leaves.
pub struct GraphModel<'a> {
    pub model: &'a Model,
    pub params: &'a GraphParams,
}

impl GraphModel<'_> {
    fn p(&self, i: usize) -> NodeId {
        self.params.ids[i]
    }

    fn norm(&self, g: &mut Graph, x: NodeId, gain: usize, bias: usize) -> Result<NodeId, ModelError> {
        let n = g.layer_norm(x)?;
        let s = g.mul_row(n, self.p(gain))?;
        Ok(g.add_row(s, self.p(bias))?)
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: usize, b: usize) -> Result<NodeId, ModelError> {
        let m = g.matmul(x, self.p(w))?;
        Ok(g.add_row(m, self.p(b))?)
    }

    /// Token embeddings: word + position (on the token's table) + segment.
    pub fn embed(&self, g: &mut Graph, input: &AssembledInput) -> Result<NodeId, ModelError> {
        let cfg = &self.model.config;
        let layout = self.model.layout();
        let words: Vec<usize> = input.word_ids.iter().map(|&w| w as usize).collect();
        let pos_rows = input
            .table_ids
            .iter()
            .zip(&input.position_ids)
            .map(|(&t, &p)| cfg.position_row(t, p))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tables = vec![self.p(layout.dialog_pos)];
        tables.extend(layout.knowledge_pos.iter().map(|&i| self.p(i)));
        let stacked = if tables.len() == 1 {
            tables[0]
        } else {
            g.concat_rows(&tables)?
        };
        let w = g.gather(self.p(layout.word), &words)?;
        let p = g.gather(stacked, &pos_rows)?;
        let s = g.gather(self.p(layout.segment), &input.segment_ids)?;
        let wp = g.add(w, p)?;
        Ok(g.add(wp, s)?)
    }

    /// Final-normalized hidden states `[L × d]`.
    pub fn hidden(&self, g: &mut Graph, input: &AssembledInput) -> Result<NodeId, ModelError> {
        let cfg = &self.model.config;
        let layout = self.model.layout();
        if input.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mask: Rc<[bool]> = attention_mask(input).as_slice().into();
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = self.embed(g, input)?;
        for (li, l) in layout.layers.iter().enumerate() {
            let h = self.norm(g, x, l.ln1_gain, l.ln1_bias)?;
            let q = self.linear(g, h, l.w_q, l.b_q)?;
            let k = g.matmul(h, self.p(l.w_k))?;
            let v = self.linear(g, h, l.w_v, l.b_v)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let (a, b) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, a, b)?;
                let kh = g.slice_cols(k, a, b)?;
                let vh = g.slice_cols(v, a, b)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let att = g.masked_softmax(scores, mask.clone())?;
                heads.push(g.matmul(att, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let proj = self.linear(g, cat, l.w_o, l.b_o)?;
            x = g.add(x, proj)?;

            let h2 = self.norm(g, x, l.ln2_gain, l.ln2_bias)?;
            let f = self.linear(g, h2, l.w_fc, l.b_fc)?;
            let f = g.gelu(f);
            let m = self.linear(g, f, l.w_proj, l.b_proj)?;
            x = g.add(x, m)?;
            if !g.value(x).all_finite() {
                return Err(ModelError::NonFinite { layer: li });
            }
        }
        self.norm(g, x, layout.final_gain, layout.final_bias)
    }

    /// LM logits `[rows × V]` for the selected hidden rows (tied to the word table).
    pub fn lm_logits(&self, g: &mut Graph, hidden: NodeId, rows: &[usize]) -> Result<NodeId, ModelError> {
        let sel = g.gather(hidden, rows)?;
        Ok(g.matmul_nt(sel, self.p(self.model.layout().word))?)
    }

    /// LM logits for every position.
    pub fn all_lm_logits(&self, g: &mut Graph, hidden: NodeId) -> Result<NodeId, ModelError> {
        Ok(g.matmul_nt(hidden, self.p(self.model.layout().word))?)
    }

    /// Next-response logit read from the last token's hidden state.
    pub fn nsp_logit(&self, g: &mut Graph, hidden: NodeId) -> Result<NodeId, ModelError> {
        let layout = self.model.layout();
        let last = g.value(hidden).rows() - 1;
        let h = g.gather(hidden, &[last])?;
        Ok(g.matmul(h, self.p(layout.nsp_weight))?)
    }
}
