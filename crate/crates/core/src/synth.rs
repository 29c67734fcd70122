//! Synthetic knowledge-grounded dialogues with exact grounding labels.
//!
//! Token ids are laid out in disjoint blocks: specials, function words,
//! subjects, relations, objects, filler. Every sample holds `k` facts whose
//! subjects, relations and objects are each distinct within the sample; the
//! partner asks about one subject and the gold response restates that fact.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::assembly::SpecialTokens;
use crate::data::{DialogueSample, FactTriple, Speaker, TokenId, Turn, Vocab};
use crate::rng::derived_rng;

/// Function words, in block order.
pub const FUNCTION_WORDS: [&str; 8] = ["is", "the", "about", "tell", "so", "well", "yes", "of"];
const FW_IS: usize = 0;
const FW_THE: usize = 1;
const FW_ABOUT: usize = 2;
const FW_TELL: usize = 3;
const FW_SO: usize = 4;
const FW_WELL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_samples: usize,
    /// Held-out samples written next to the training file by `gen-data`.
    pub n_test: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    pub n_filler: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub filler_len_min: usize,
    pub filler_len_max: usize,
    /// How many statement templates are in use (1 to 3): `s r o`,
    /// `s r is o`, `the s r o`.
    pub template_variants: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_test: 200,
            k_min: 4,
            k_max: 5,
            n_subjects: 64,
            n_relations: 32,
            n_objects: 128,
            n_filler: 64,
            history_min: 1,
            history_max: 3,
            filler_len_min: 2,
            filler_len_max: 4,
            template_variants: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid corpus config: {0}")]
pub struct CorpusError(pub String);

/// First id of every vocabulary block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabBlocks {
    pub function: TokenId,
    pub subjects: TokenId,
    pub relations: TokenId,
    pub objects: TokenId,
    pub filler: TokenId,
    pub end: TokenId,
}

impl CorpusConfig {
    pub fn blocks(&self) -> VocabBlocks {
        let specials = SpecialTokens::default().all().len() as TokenId;
        let function = specials;
        let subjects = function + FUNCTION_WORDS.len() as TokenId;
        let relations = subjects + self.n_subjects as TokenId;
        let objects = relations + self.n_relations as TokenId;
        let filler = objects + self.n_objects as TokenId;
        VocabBlocks {
            function,
            subjects,
            relations,
            objects,
            filler,
            end: filler + self.n_filler as TokenId,
        }
    }

    /// Number of ids the corpus uses.
    pub fn vocab_size(&self) -> usize {
        self.blocks().end as usize
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError(m));
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad(format!(
                "need 1 <= k_min <= k_max, got k_min={} k_max={}",
                self.k_min, self.k_max
            ));
        }
        if self.n_subjects < self.k_max || self.n_relations < self.k_max || self.n_objects < self.k_max {
            return bad(format!(
                "n_subjects ({}), n_relations ({}) and n_objects ({}) must be at least k_max ({}) for unique facts",
                self.n_subjects, self.n_relations, self.n_objects, self.k_max
            ));
        }
        if self.n_filler == 0 {
            return bad("n_filler must be positive".into());
        }
        if !(1..=3).contains(&self.template_variants) {
            return bad(format!("template_variants must be 1, 2 or 3, got {}", self.template_variants));
        }
        if self.history_min > self.history_max || self.filler_len_min == 0 || self.filler_len_min > self.filler_len_max {
            return bad("history and filler length ranges must be non-empty".into());
        }
        Ok(())
    }

    /// Longest statement the templates produce.
    pub const MAX_STATEMENT_LEN: usize = 4;

    /// Upper bounds on `(knowledge tokens, dialogue tokens)` of an assembled
    /// sample, counting tags, speaker markers, bos and eos.
    pub fn max_assembled_lengths(&self) -> (usize, usize) {
        let knowledge = self.k_max * (1 + Self::MAX_STATEMENT_LEN);
        let history = self.history_max * (1 + self.filler_len_max) + 1 + 3;
        let response = 1 + 4 + 1;
        (knowledge, 1 + history + response)
    }

    /// Words for every id, usable for decoding generated responses.
    pub fn vocab(&self) -> Vocab {
        let b = self.blocks();
        let mut words: Vec<String> = ["<pad>", "<bos>", "<eos>", "<self>", "<other>", "<know>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        words.extend((0..b.relations - b.subjects).map(|i| format!("s{i}")));
        words.extend((0..b.objects - b.relations).map(|i| format!("r{i}")));
        words.extend((0..b.filler - b.objects).map(|i| format!("o{i}")));
        words.extend((0..b.end - b.filler).map(|i| format!("w{i}")));
        Vocab::from_words(words)
    }
}

fn statement(fact: FactTriple, fw: TokenId, template: usize) -> Vec<TokenId> {
    let FactTriple {
        subject: s,
        relation: r,
        object: o,
    } = fact;
    match template {
        0 => vec![s, r, o],
        1 => vec![s, r, fw + FW_IS as TokenId, o],
        _ => vec![fw + FW_THE as TokenId, s, r, o],
    }
}

/// Generates sample `index` of the corpus; a pure function of
/// `(config, index)`.
pub fn generate_sample(cfg: &CorpusConfig, index: usize) -> DialogueSample {
    let b = cfg.blocks();
    let mut rng = derived_rng(cfg.seed, &[index as u64]);
    let n_k = cfg.k_max - cfg.k_min + 1;
    let k = cfg.k_min + index % n_k;
    // Within a k stratum the target cycles through 0..k.
    let target = (index / n_k) % k;

    let subjects: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.n_subjects, k).into_vec();
    let objects: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.n_objects, k).into_vec();
    let relations: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.n_relations, k).into_vec();
    let facts: Vec<FactTriple> = (0..k)
        .map(|i| FactTriple {
            subject: b.subjects + subjects[i] as TokenId,
            relation: b.relations + relations[i] as TokenId,
            object: b.objects + objects[i] as TokenId,
        })
        .collect();
    let knowledge = facts
        .iter()
        .map(|&f| statement(f, b.function, rng.random_range(0..cfg.template_variants)))
        .collect();

    let n_filler = rng.random_range(cfg.history_min..=cfg.history_max);
    let mut history = Vec::with_capacity(n_filler + 1);
    for t in 0..n_filler {
        // Speakers alternate so that the partner asks the final question.
        let speaker = if (n_filler - t) % 2 == 1 {
            Speaker::Agent
        } else {
            Speaker::Partner
        };
        let len = rng.random_range(cfg.filler_len_min..=cfg.filler_len_max);
        let tokens = (0..len)
            .map(|_| b.filler + rng.random_range(0..cfg.n_filler) as TokenId)
            .collect();
        history.push(Turn { speaker, tokens });
    }
    let fact = facts[target];
    let fw = |i: usize| b.function + i as TokenId;
    let query = if rng.random_bool(0.5) {
        vec![fw(FW_TELL), fw(FW_ABOUT), fact.subject]
    } else {
        vec![fw(FW_ABOUT), fact.subject]
    };
    history.push(Turn {
        speaker: Speaker::Partner,
        tokens: query,
    });
    let lead = *[fw(FW_SO), fw(FW_WELL)].choose(&mut rng).expect("non-empty");
    let response = vec![lead, fact.subject, fact.relation, fact.object];

    DialogueSample {
        knowledge,
        history,
        response,
        gold_grounding: Some(target),
        facts: Some(facts),
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<DialogueSample>, CorpusError> {
    cfg.validate()?;
    Ok((0..cfg.n_samples).map(|i| generate_sample(cfg, i)).collect())
}

/// Held-out split: same generator under a seed derived from the training one.
pub fn generate_test_corpus(cfg: &CorpusConfig) -> Result<Vec<DialogueSample>, CorpusError> {
    let test = CorpusConfig {
        n_samples: cfg.n_test,
        seed: crate::rng::derive_seed(cfg.seed, &[u64::from_le_bytes(*b"test\0\0\0\0")]),
        ..cfg.clone()
    };
    generate_corpus(&test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, n: usize) -> CorpusConfig {
        CorpusConfig {
            n_samples: n,
            k_min: k,
            k_max: k,
            seed: 11,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn balanced_targets_k4() {
        let c = generate_corpus(&cfg(4, 1000)).unwrap();
        assert_eq!(c.len(), 1000);
        let mut hist = [0usize; 4];
        for s in &c {
            assert_eq!(s.k(), 4);
            hist[s.gold_grounding.unwrap()] += 1;
        }
        assert_eq!(hist, [250; 4]);
    }

    #[test]
    fn single_statement_always_targets_zero() {
        for s in generate_corpus(&cfg(1, 50)).unwrap() {
            assert_eq!(s.gold_grounding, Some(0));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_corpus(&cfg(4, 30)).unwrap();
        assert_eq!(a, generate_corpus(&cfg(4, 30)).unwrap());
        let other = CorpusConfig { seed: 12, ..cfg(4, 30) };
        assert_ne!(a, generate_corpus(&other).unwrap());
    }

    #[test]
    fn responses_name_only_the_queried_fact() {
        let conf = CorpusConfig::default();
        let b = conf.blocks();
        for s in generate_corpus(&CorpusConfig { n_samples: 300, ..conf }).unwrap() {
            let facts = s.facts.as_ref().unwrap();
            let g = s.gold_grounding.unwrap();
            let f = facts[g];
            for t in [f.subject, f.relation, f.object] {
                assert!(s.response.contains(&t));
                assert!(s.knowledge[g].contains(&t));
            }
            for (i, other) in facts.iter().enumerate() {
                if i != g {
                    assert!(!s.response.contains(&other.object));
                    assert_ne!(other.subject, f.subject);
                }
            }
            assert_eq!(s.history.last().unwrap().speaker, Speaker::Partner);
            // Filler never overlaps fact tokens.
            for t in &s.history[..s.history.len() - 1] {
                assert!(t.tokens.iter().all(|&w| w >= b.filler && w < b.end));
            }
            s.validate(None).unwrap();
        }
    }

    #[test]
    fn mixed_k_is_balanced_per_stratum() {
        let c = generate_corpus(&CorpusConfig {
            n_samples: 400,
            ..CorpusConfig::default()
        })
        .unwrap();
        let mut h4 = [0; 4];
        let mut h5 = [0; 5];
        for s in &c {
            match s.k() {
                4 => h4[s.gold_grounding.unwrap()] += 1,
                5 => h5[s.gold_grounding.unwrap()] += 1,
                k => panic!("unexpected k {k}"),
            }
        }
        assert_eq!(h4, [50; 4]);
        assert_eq!(h5, [40; 5]);
    }

    #[test]
    fn rejects_impossible_uniqueness() {
        let c = CorpusConfig {
            n_objects: 3,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&c).is_err());
        assert!(generate_corpus(&CorpusConfig { k_min: 6, ..CorpusConfig::default() }).is_err());
    }

    #[test]
    fn vocab_names_blocks() {
        let c = CorpusConfig::default();
        let v = c.vocab();
        assert_eq!(v.len(), c.vocab_size());
        assert!(c.vocab_size() <= 320);
        assert_eq!(v.word(c.blocks().subjects), Some("s0"));
        assert_eq!(v.word(c.blocks().filler), Some("w0"));
    }
}
