//! Fuses a [`DialogueSample`] into parallel word / position / segment id
//! sequences, plus the position-table selector for every token.
//!
//! Layout: `[bos][tag stmt₁]…[tag stmtₖ][speaker turn]…[self response eos]`.
//!
//! Under `Sequential` every token sits on the dialogue position table with
//! ids `0..L`. Under the restart schemes each statement's positions restart
//! at zero on a knowledge table (one shared table, or one table per slot),
//! and the dialogue region (bos plus every turn) runs its own ramp from zero
//! on the dialogue table, so it is identical for any knowledge order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{DialogueSample, Speaker, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub speaker_self: TokenId,
    pub speaker_other: TokenId,
    pub knowledge_tag: TokenId,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            pad: 0,
            bos: 1,
            eos: 2,
            speaker_self: 3,
            speaker_other: 4,
            knowledge_tag: 5,
        }
    }
}

impl SpecialTokens {
    pub fn all(&self) -> [TokenId; 6] {
        [
            self.pad,
            self.bos,
            self.eos,
            self.speaker_self,
            self.speaker_other,
            self.knowledge_tag,
        ]
    }

    pub fn contains(&self, t: TokenId) -> bool {
        self.all().contains(&t)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), AssemblyError> {
        let all = self.all();
        for (i, &a) in all.iter().enumerate() {
            if a as usize >= vocab_size {
                return Err(AssemblyError::BadSpecials(format!(
                    "token {a} outside vocabulary of {vocab_size}"
                )));
            }
            if all[..i].contains(&a) {
                return Err(AssemblyError::BadSpecials(format!("token {a} used twice")));
            }
        }
        Ok(())
    }

    pub fn speaker_token(&self, s: Speaker) -> TokenId {
        match s {
            Speaker::Agent => self.speaker_self,
            Speaker::Partner => self.speaker_other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Sequential,
    RestartShared,
    RestartPerSlot,
}

impl SchemeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Sequential => "sequential",
            SchemeKind::RestartShared => "restart-shared",
            SchemeKind::RestartPerSlot => "restart-per-slot",
        }
    }

    pub fn restarts(self) -> bool {
        self != SchemeKind::Sequential
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(SchemeKind::Sequential),
            "restart-shared" => Ok(SchemeKind::RestartShared),
            "restart-per-slot" => Ok(SchemeKind::RestartPerSlot),
            _ => Err(format!(
                "unknown scheme `{s}` (expected sequential, restart-shared or restart-per-slot)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionScheme {
    pub kind: SchemeKind,
    /// Extension: knowledge tokens attend only within their own statement.
    #[serde(default)]
    pub isolate_knowledge: bool,
}

impl PositionScheme {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            isolate_knowledge: false,
        }
    }

    pub fn isolated(kind: SchemeKind) -> Self {
        Self {
            kind,
            isolate_knowledge: true,
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        if self.isolate_knowledge {
            MaskSpec::CausalIsolatedKnowledge
        } else {
            MaskSpec::Causal
        }
    }

    pub fn label(&self) -> String {
        if self.isolate_knowledge {
            format!("{}+isolated", self.kind)
        } else {
            self.kind.to_string()
        }
    }
}

/// Which position table a token's position id indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableId {
    Dialog,
    KnowledgeShared,
    KnowledgeSlot(usize),
}

pub const SEG_KNOWLEDGE: usize = 0;
pub const SEG_SELF: usize = 1;
pub const SEG_OTHER: usize = 2;
pub const N_SEGMENTS: usize = 3;

pub fn segment_of(s: Speaker) -> usize {
    match s {
        Speaker::Agent => SEG_SELF,
        Speaker::Partner => SEG_OTHER,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSpec {
    Causal,
    CausalIsolatedKnowledge,
}

/// Table capacities an assembled input must fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssemblyLimits {
    pub max_dialog_positions: usize,
    pub max_knowledge_positions: usize,
    pub n_knowledge_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledInput {
    pub word_ids: Vec<TokenId>,
    pub position_ids: Vec<usize>,
    pub table_ids: Vec<TableId>,
    pub segment_ids: Vec<usize>,
    /// True over response tokens and the closing eos.
    pub lm_label_mask: Vec<bool>,
    /// Half-open `[start, end)` token ranges, one per statement (tag included).
    pub knowledge_spans: Vec<(usize, usize)>,
    pub mask_spec: MaskSpec,
    /// Index of the first token after the response speaker token.
    pub response_start: usize,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    /// End of the knowledge region (start of the dialogue turns).
    pub fn knowledge_end(&self) -> usize {
        self.knowledge_spans.last().map_or(1, |s| s.1)
    }

    /// Position id the next appended dialogue token would receive.
    pub fn next_dialog_position(&self) -> usize {
        self.position_ids.last().map_or(0, |p| p + 1)
    }

    /// Appends one dialogue token from the responding speaker.
    pub fn push_response_token(&mut self, token: TokenId, labelled: bool) {
        let pos = self.next_dialog_position();
        self.word_ids.push(token);
        self.position_ids.push(pos);
        self.table_ids.push(TableId::Dialog);
        self.segment_ids.push(SEG_SELF);
        self.lm_label_mask.push(labelled);
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AssemblyError {
    #[error("sample has no knowledge statements")]
    EmptyKnowledge,
    #[error("knowledge statement {0} is empty")]
    EmptyStatement(usize),
    #[error("assembled length {length} exceeds the {limit} available {table} positions")]
    Overflow {
        length: usize,
        limit: usize,
        table: &'static str,
    },
    #[error("{count} statements but only {slots} per-slot position tables")]
    TooManySlots { count: usize, slots: usize },
    #[error("segment lengths must be at least 1")]
    ZeroLength,
    #[error("permutation {perm:?} is not a permutation of 0..{k}")]
    BadPermutation { perm: Vec<usize>, k: usize },
    #[error("invalid special tokens: {0}")]
    BadSpecials(String),
}

/// Position ids and table selectors for the layout
/// `[segment₀]…[segmentₖ₋₁][dialogue]`.
pub fn position_ids(
    segment_lengths: &[usize],
    dialogue_length: usize,
    scheme: SchemeKind,
    knowledge_table_len: usize,
) -> Result<(Vec<usize>, Vec<TableId>), AssemblyError> {
    if segment_lengths.contains(&0) || dialogue_length == 0 {
        return Err(AssemblyError::ZeroLength);
    }
    let total = segment_lengths.iter().sum::<usize>() + dialogue_length;
    let mut pos = Vec::with_capacity(total);
    let mut tab = Vec::with_capacity(total);
    match scheme {
        SchemeKind::Sequential => {
            pos.extend(0..total);
            tab.resize(total, TableId::Dialog);
        }
        SchemeKind::RestartShared | SchemeKind::RestartPerSlot => {
            for (i, &len) in segment_lengths.iter().enumerate() {
                if len > knowledge_table_len {
                    return Err(AssemblyError::Overflow {
                        length: len,
                        limit: knowledge_table_len,
                        table: "knowledge",
                    });
                }
                let table = if scheme == SchemeKind::RestartShared {
                    TableId::KnowledgeShared
                } else {
                    TableId::KnowledgeSlot(i)
                };
                pos.extend(0..len);
                tab.extend(std::iter::repeat_n(table, len));
            }
            pos.extend(0..dialogue_length);
            tab.extend(std::iter::repeat_n(TableId::Dialog, dialogue_length));
        }
    }
    Ok((pos, tab))
}

/// Full training layout including the gold response and closing eos.
pub fn assemble(
    sample: &DialogueSample,
    scheme: PositionScheme,
    specials: &SpecialTokens,
    limits: &AssemblyLimits,
) -> Result<AssembledInput, AssemblyError> {
    assemble_parts(sample, Some(&sample.response), scheme, specials, limits)
}

/// Same as [`assemble`] but with `response` substituted for the gold one.
pub fn assemble_with_response(
    sample: &DialogueSample,
    response: &[TokenId],
    scheme: PositionScheme,
    specials: &SpecialTokens,
    limits: &AssemblyLimits,
) -> Result<AssembledInput, AssemblyError> {
    assemble_parts(sample, Some(response), scheme, specials, limits)
}

/// Generation context: ends at the responding speaker token.
pub fn assemble_context(
    sample: &DialogueSample,
    scheme: PositionScheme,
    specials: &SpecialTokens,
    limits: &AssemblyLimits,
) -> Result<AssembledInput, AssemblyError> {
    assemble_parts(sample, None, scheme, specials, limits)
}

fn assemble_parts(
    sample: &DialogueSample,
    response: Option<&[TokenId]>,
    scheme: PositionScheme,
    specials: &SpecialTokens,
    limits: &AssemblyLimits,
) -> Result<AssembledInput, AssemblyError> {
    if sample.knowledge.is_empty() {
        return Err(AssemblyError::EmptyKnowledge);
    }
    if let Some(i) = sample.knowledge.iter().position(|s| s.is_empty()) {
        return Err(AssemblyError::EmptyStatement(i));
    }
    let k = sample.knowledge.len();
    if scheme.kind == SchemeKind::RestartPerSlot && k > limits.n_knowledge_slots {
        return Err(AssemblyError::TooManySlots {
            count: k,
            slots: limits.n_knowledge_slots,
        });
    }

    let mut words = vec![specials.bos];
    let mut segments = vec![SEG_KNOWLEDGE];
    let mut spans = Vec::with_capacity(k);
    let mut seg_lens = Vec::with_capacity(k);
    for stmt in &sample.knowledge {
        let start = words.len();
        words.push(specials.knowledge_tag);
        words.extend_from_slice(stmt);
        spans.push((start, words.len()));
        seg_lens.push(stmt.len() + 1);
    }
    segments.resize(words.len(), SEG_KNOWLEDGE);

    let knowledge_end = words.len();
    for turn in &sample.history {
        words.push(specials.speaker_token(turn.speaker));
        words.extend_from_slice(&turn.tokens);
        segments.resize(words.len(), segment_of(turn.speaker));
    }
    words.push(specials.speaker_self);
    segments.push(SEG_SELF);
    let response_start = words.len();
    if let Some(resp) = response {
        words.extend_from_slice(resp);
        words.push(specials.eos);
        segments.resize(words.len(), SEG_SELF);
    }
    let mut label = vec![false; words.len()];
    if response.is_some() {
        label[response_start..].iter_mut().for_each(|l| *l = true);
    }

    let total = words.len();
    // bos counts as the first token of the dialogue region
    let dialogue_len = 1 + total - knowledge_end;
    let (position_ids, table_ids) = match scheme.kind {
        SchemeKind::Sequential => {
            if total > limits.max_dialog_positions {
                return Err(AssemblyError::Overflow {
                    length: total,
                    limit: limits.max_dialog_positions,
                    table: "dialog",
                });
            }
            position_ids(&[total - 1], 1, SchemeKind::Sequential, 0)?
        }
        kind => {
            if dialogue_len > limits.max_dialog_positions {
                return Err(AssemblyError::Overflow {
                    length: dialogue_len,
                    limit: limits.max_dialog_positions,
                    table: "dialog",
                });
            }
            let (p, t) = position_ids(&seg_lens, dialogue_len, kind, limits.max_knowledge_positions)?;
            // move the dialogue ramp's first entry (bos) to the front
            let split = knowledge_end - 1;
            let mut pos = Vec::with_capacity(total);
            let mut tab = Vec::with_capacity(total);
            pos.push(p[split]);
            tab.push(t[split]);
            pos.extend_from_slice(&p[..split]);
            tab.extend_from_slice(&t[..split]);
            pos.extend_from_slice(&p[split + 1..]);
            tab.extend_from_slice(&t[split + 1..]);
            (pos, tab)
        }
    };

    Ok(AssembledInput {
        word_ids: words,
        position_ids,
        table_ids,
        segment_ids: segments,
        lm_label_mask: label,
        knowledge_spans: spans,
        mask_spec: scheme.mask_spec(),
        response_start,
    })
}

/// Reorders knowledge so that new slot `j` holds old statement `perm[j]`.
/// The gold index and fact annotations follow their statements.
pub fn permute_knowledge(sample: &DialogueSample, perm: &[usize]) -> Result<DialogueSample, AssemblyError> {
    let k = sample.knowledge.len();
    let mut seen = vec![false; k];
    let valid = perm.len() == k
        && perm.iter().all(|&p| {
            if p < k && !seen[p] {
                seen[p] = true;
                true
            } else {
                false
            }
        });
    if !valid {
        return Err(AssemblyError::BadPermutation {
            perm: perm.to_vec(),
            k,
        });
    }
    let mut out = sample.clone();
    out.knowledge = perm.iter().map(|&p| sample.knowledge[p].clone()).collect();
    out.facts = sample
        .facts
        .as_ref()
        .map(|f| perm.iter().map(|&p| f[p]).collect());
    out.gold_grounding = sample
        .gold_grounding
        .map(|g| perm.iter().position(|&p| p == g).expect("valid permutation"));
    Ok(out)
}

/// Inverse of a permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Dense reachability matrix: `allows(t, s)` iff token `t` may attend to `s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, t: usize, s: usize) -> bool {
        self.allowed[t * self.len + s]
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.allowed[t * self.len..(t + 1) * self.len]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Causal mask; under isolation a knowledge token additionally sees only
/// bos and earlier tokens of its own statement.
pub fn attention_mask(input: &AssembledInput) -> AttentionMask {
    let len = input.len();
    let mut allowed = vec![false; len * len];
    let mut owner = vec![None; len];
    if input.mask_spec == MaskSpec::CausalIsolatedKnowledge {
        for &(a, b) in &input.knowledge_spans {
            for o in owner.iter_mut().take(b).skip(a) {
                *o = Some(a);
            }
        }
    }
    for t in 0..len {
        let row = &mut allowed[t * len..(t + 1) * len];
        match owner[t] {
            Some(start) => {
                row[0] = true;
                row[start..=t].iter_mut().for_each(|x| *x = true);
            }
            None => row[..=t].iter_mut().for_each(|x| *x = true),
        }
    }
    AttentionMask { len, allowed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Turn;

    const D: TableId = TableId::Dialog;
    const K: TableId = TableId::KnowledgeShared;

    fn limits() -> AssemblyLimits {
        AssemblyLimits {
            max_dialog_positions: 64,
            max_knowledge_positions: 16,
            n_knowledge_slots: 5,
        }
    }

    /// Statements of 3 and 2 tokens (tag included). In context form the
    /// dialogue region is bos, `[other 20]`, `[self]`: 4 tokens.
    fn small_sample() -> DialogueSample {
        DialogueSample {
            knowledge: vec![vec![10, 11], vec![12]],
            history: vec![Turn {
                speaker: Speaker::Partner,
                tokens: vec![20],
            }],
            response: vec![30],
            gold_grounding: Some(0),
            facts: None,
        }
    }

    #[test]
    fn position_ids_examples() {
        assert_eq!(
            position_ids(&[3], 2, SchemeKind::Sequential, 8).unwrap(),
            (vec![0, 1, 2, 3, 4], vec![D; 5])
        );
        assert_eq!(
            position_ids(&[2, 2], 3, SchemeKind::RestartShared, 8).unwrap(),
            (vec![0, 1, 0, 1, 0, 1, 2], vec![K, K, K, K, D, D, D])
        );
        assert_eq!(
            position_ids(&[1, 1, 1], 1, SchemeKind::RestartPerSlot, 8).unwrap(),
            (
                vec![0, 0, 0, 0],
                vec![
                    TableId::KnowledgeSlot(0),
                    TableId::KnowledgeSlot(1),
                    TableId::KnowledgeSlot(2),
                    D
                ]
            )
        );
        assert_eq!(
            position_ids(&[9], 1, SchemeKind::RestartShared, 8).unwrap_err(),
            AssemblyError::Overflow {
                length: 9,
                limit: 8,
                table: "knowledge"
            }
        );
    }

    #[test]
    fn assemble_layouts_match_examples() {
        // knowledge spans of 3 and 2 tokens; dialogue region bos + [other 20] + [self] = 4
        let s = small_sample();
        let seq = assemble_context(&s, PositionScheme::new(SchemeKind::Sequential), &SpecialTokens::default(), &limits())
            .unwrap();
        assert_eq!(seq.word_ids, vec![1, 5, 10, 11, 5, 12, 4, 20, 3]);
        assert_eq!(seq.position_ids, (0..9).collect::<Vec<_>>());
        assert!(seq.table_ids.iter().all(|&t| t == D));
        assert_eq!(seq.knowledge_spans, vec![(1, 4), (4, 6)]);

        let rs = assemble_context(&s, PositionScheme::new(SchemeKind::RestartShared), &SpecialTokens::default(), &limits())
            .unwrap();
        assert_eq!(rs.position_ids, vec![0, 0, 1, 2, 0, 1, 1, 2, 3]);
        assert_eq!(rs.table_ids, vec![D, K, K, K, K, K, D, D, D]);

        let ps = assemble_context(&s, PositionScheme::new(SchemeKind::RestartPerSlot), &SpecialTokens::default(), &limits())
            .unwrap();
        assert_eq!(ps.position_ids, rs.position_ids);
        let s0 = TableId::KnowledgeSlot(0);
        let s1 = TableId::KnowledgeSlot(1);
        assert_eq!(ps.table_ids, vec![D, s0, s0, s0, s1, s1, D, D, D]);
    }

    #[test]
    fn label_mask_covers_response_and_eos_only() {
        let a = assemble(&small_sample(), PositionScheme::new(SchemeKind::RestartShared), &SpecialTokens::default(), &limits())
            .unwrap();
        let n = a.len();
        assert_eq!(a.word_ids[n - 1], 2);
        assert_eq!(a.response_start, n - 2);
        let labelled: Vec<usize> = (0..n).filter(|&i| a.lm_label_mask[i]).collect();
        assert_eq!(labelled, vec![n - 2, n - 1]);
        assert_eq!(a.segment_ids[n - 1], SEG_SELF);
        assert_eq!(a.segment_ids[7], SEG_OTHER);
    }

    #[test]
    fn overflow_and_empty_rejected() {
        let s = small_sample();
        let tight = AssemblyLimits {
            max_dialog_positions: 5,
            ..limits()
        };
        let err = assemble(&s, PositionScheme::new(SchemeKind::Sequential), &SpecialTokens::default(), &tight)
            .unwrap_err();
        assert_eq!(
            err,
            AssemblyError::Overflow {
                length: 11,
                limit: 5,
                table: "dialog"
            }
        );
        let mut e = s.clone();
        e.knowledge.clear();
        assert_eq!(
            assemble(&e, PositionScheme::new(SchemeKind::Sequential), &SpecialTokens::default(), &limits()).unwrap_err(),
            AssemblyError::EmptyKnowledge
        );
    }

    #[test]
    fn per_slot_needs_enough_tables() {
        let s = small_sample();
        let few = AssemblyLimits {
            n_knowledge_slots: 1,
            ..limits()
        };
        assert_eq!(
            assemble(&s, PositionScheme::new(SchemeKind::RestartPerSlot), &SpecialTokens::default(), &few).unwrap_err(),
            AssemblyError::TooManySlots { count: 2, slots: 1 }
        );
    }

    #[test]
    fn permutation_examples() {
        let mut s = small_sample();
        s.knowledge.push(vec![13]);
        assert_eq!(permute_knowledge(&s, &[0, 1, 2]).unwrap(), s);
        let p = permute_knowledge(&s, &[2, 1, 0]).unwrap();
        assert_eq!(p.gold_grounding, Some(2));
        assert_eq!(p.knowledge[0], vec![13]);
        let perm = [1, 2, 0];
        let back = permute_knowledge(&permute_knowledge(&s, &perm).unwrap(), &invert_permutation(&perm)).unwrap();
        assert_eq!(back, s);
        assert!(permute_knowledge(&s, &[0, 1]).is_err());
        assert!(permute_knowledge(&s, &[0, 0, 1]).is_err());
    }

    #[test]
    fn causal_and_isolated_masks() {
        let mut a = assemble(&small_sample(), PositionScheme::new(SchemeKind::RestartShared), &SpecialTokens::default(), &limits())
            .unwrap();
        let m = attention_mask(&a);
        for t in 0..a.len() {
            for s in 0..a.len() {
                assert_eq!(m.allows(t, s), s <= t);
            }
        }
        // spans (1,3),(3,5) as in the isolated-mask examples
        a.knowledge_spans = vec![(1, 3), (3, 5)];
        a.mask_spec = MaskSpec::CausalIsolatedKnowledge;
        let m = attention_mask(&a);
        assert!(!m.allows(3, 1) && !m.allows(3, 2));
        assert!(m.allows(3, 0) && m.allows(3, 3));
        assert!(m.allows(4, 3));
        assert!((0..=6).all(|s| m.allows(6, s)));
    }
}
