#![allow(dead_code)]

use knowpos::assembly::{assemble, assemble_with_response, PositionScheme, SchemeKind, SpecialTokens};
use knowpos::data::{DialogueSample, Speaker, Turn};
use knowpos::model::{GraphModel, GraphParams, Model, ModelConfig, ModelError};
use knowpos::nn::{Graph, NodeId};
use knowpos::trainer::{lm_targets, nsp_loss};

/// Twelve tokens once assembled: bos, two statements, one partner turn,
/// and a two-token response closed by eos.
pub fn grad_sample() -> DialogueSample {
    DialogueSample {
        knowledge: vec![vec![7], vec![8, 9]],
        history: vec![Turn {
            speaker: Speaker::Partner,
            tokens: vec![10],
        }],
        response: vec![11, 12],
        gold_grounding: Some(0),
        facts: None,
    }
}

pub fn grad_config(kind: SchemeKind, isolate: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        max_dialog_positions: 16,
        max_knowledge_positions: 6,
        n_knowledge_slots: 3,
        scheme: PositionScheme {
            kind,
            isolate_knowledge: isolate,
        },
        init_std: 0.5,
        seed: 21,
        ..ModelConfig::default()
    }
}

pub fn grad_loss(model: &Model, g: &mut Graph, ids: &[NodeId]) -> Result<NodeId, ModelError> {
    let sp = SpecialTokens::default();
    let cfg = &model.config;
    let gp = GraphParams { ids: ids.to_vec() };
    let gm = GraphModel { model, params: &gp };
    let gold = assemble(&grad_sample(), cfg.scheme, &sp, &cfg.limits())?;
    assert_eq!(gold.len(), 12);
    let h = gm.hidden(g, &gold)?;
    let (rows, targets) = lm_targets(&gold.word_ids, &gold.lm_label_mask).unwrap();
    let logits = gm.lm_logits(g, h, &rows)?;
    let lm = g.cross_entropy(logits, &targets)?;
    let nsp_gold = gm.nsp_logit(g, h)?;
    let other = assemble_with_response(&grad_sample(), &[13, 14], cfg.scheme, &sp, &cfg.limits())?;
    let hd = gm.hidden(g, &other)?;
    let nsp_other = gm.nsp_logit(g, hd)?;
    let nsp = nsp_loss(g, nsp_gold, &[nsp_other]).unwrap();
    let scaled = g.scale(lm, 2.0);
    Ok(g.add(scaled, nsp)?)
}
