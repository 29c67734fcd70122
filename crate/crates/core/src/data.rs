//! Dialogue samples and their JSONL representation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    /// The model's own side of the conversation.
    #[serde(rename = "self")]
    Agent,
    #[serde(rename = "other")]
    Partner,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<TokenId>,
}

/// Annotation of the fact a knowledge statement expresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: TokenId,
    pub relation: TokenId,
    pub object: TokenId,
}

/// One grounded exchange.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSample {
    pub knowledge: Vec<Vec<TokenId>>,
    pub history: Vec<Turn>,
    pub response: Vec<TokenId>,
    pub gold_grounding: Option<usize>,
    /// Per-statement fact annotations, parallel to `knowledge`.
    pub facts: Option<Vec<FactTriple>>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("sample has no knowledge statements")]
    EmptyKnowledge,
    #[error("knowledge statement {0} is empty")]
    EmptyStatement(usize),
    #[error("response is empty")]
    EmptyResponse,
    #[error("{count} knowledge statements exceed the {max} available slots")]
    TooManyStatements { count: usize, max: usize },
    #[error("gold_grounding {index} out of range for {count} statements")]
    BadGrounding { index: usize, count: usize },
    #[error("{facts} fact annotations for {statements} statements")]
    FactCount { facts: usize, statements: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DialogueSample {
    /// Checks structural invariants; `max_slots` bounds the statement count.
    pub fn validate(&self, max_slots: Option<usize>) -> Result<(), DataError> {
        if self.knowledge.is_empty() {
            return Err(DataError::EmptyKnowledge);
        }
        if let Some(max) = max_slots {
            if self.knowledge.len() > max {
                return Err(DataError::TooManyStatements {
                    count: self.knowledge.len(),
                    max,
                });
            }
        }
        if let Some(i) = self.knowledge.iter().position(|s| s.is_empty()) {
            return Err(DataError::EmptyStatement(i));
        }
        if self.response.is_empty() {
            return Err(DataError::EmptyResponse);
        }
        if let Some(g) = self.gold_grounding {
            if g >= self.knowledge.len() {
                return Err(DataError::BadGrounding {
                    index: g,
                    count: self.knowledge.len(),
                });
            }
        }
        if let Some(f) = &self.facts {
            if f.len() != self.knowledge.len() {
                return Err(DataError::FactCount {
                    facts: f.len(),
                    statements: self.knowledge.len(),
                });
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.knowledge.len()
    }
}

/// Word ↔ id table used to read whitespace-tokenized text fields.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let words: Vec<String> = words.into_iter().collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self { words, index }
    }

    /// One word per line; the line number is the id.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(Self::from_words(text.lines().map(str::to_owned)))
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).map_or_else(|| i.to_string(), str::to_owned))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sample_to_json(s: &DialogueSample) -> Value {
    let mut obj = json!({
        "knowledge": s.knowledge,
        "history": s.history,
        "response": s.response,
        "gold_grounding": s.gold_grounding,
    });
    if let Some(f) = &s.facts {
        obj["facts"] = json!(f);
    }
    obj
}

/// Parses and validates one sample in the JSONL line format.
pub fn sample_from_json(text: &str) -> Result<DialogueSample, DataError> {
    let sample = parse_line(text, None).map_err(|message| DataError::Parse { line: 1, message })?;
    sample.validate(None)?;
    Ok(sample)
}

/// Writes one JSON object per line.
pub fn save_jsonl(samples: &[DialogueSample], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = sample_to_json(s).to_string();
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<DialogueSample>, DataError> {
    load_jsonl_with_vocab(path, None)
}

/// Loads samples; text-valued token fields are split on whitespace and
/// each word is read as a numeric id or looked up in `vocab`.
pub fn load_jsonl_with_vocab(path: &Path, vocab: Option<&Vocab>) -> Result<Vec<DialogueSample>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let sample = parse_line(&line, vocab).map_err(|message| DataError::Parse {
            line: lineno,
            message,
        })?;
        sample.validate(None).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

const KNOWN_FIELDS: [&str; 5] = ["knowledge", "history", "response", "gold_grounding", "facts"];

fn parse_line(line: &str, vocab: Option<&Vocab>) -> Result<DialogueSample, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    for key in obj.keys() {
        if !KNOWN_FIELDS.contains(&key.as_str()) {
            log::warn!("ignoring unknown field `{key}`");
        }
    }
    let knowledge = field(obj, "knowledge")?
        .as_array()
        .ok_or("`knowledge` must be a list")?
        .iter()
        .map(|v| tokens(v, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let history = match obj.get("history") {
        None | Some(Value::Null) => Vec::new(),
        Some(h) => h
            .as_array()
            .ok_or("`history` must be a list")?
            .iter()
            .map(|t| {
                let t = t.as_object().ok_or("history turn must be an object")?;
                let speaker: Speaker = serde_json::from_value(field(t, "speaker")?.clone())
                    .map_err(|e| format!("speaker: {e}"))?;
                Ok(Turn {
                    speaker,
                    tokens: tokens(field(t, "tokens")?, vocab)?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?,
    };
    let response = tokens(field(obj, "response")?, vocab)?;
    let gold_grounding = match obj.get("gold_grounding") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or("`gold_grounding` must be a non-negative integer")? as usize),
    };
    let facts = match obj.get("facts") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| format!("facts: {e}"))?),
    };
    Ok(DialogueSample {
        knowledge,
        history,
        response,
        gold_grounding,
        facts,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, String> {
    obj.get(name).ok_or_else(|| format!("missing field `{name}`"))
}

fn tokens(v: &Value, vocab: Option<&Vocab>) -> Result<Vec<TokenId>, String> {
    match v {
        Value::Array(items) => items
            .iter()
            .map(|t| {
                t.as_u64()
                    .and_then(|x| TokenId::try_from(x).ok())
                    .ok_or_else(|| format!("invalid token id {t}"))
            })
            .collect(),
        Value::String(s) => s
            .split_whitespace()
            .map(|w| {
                w.parse::<TokenId>()
                    .ok()
                    .or_else(|| vocab.and_then(|voc| voc.id(w)))
                    .ok_or_else(|| format!("unknown word `{w}`"))
            })
            .collect(),
        _ => Err(format!("expected token list or string, got {v}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DialogueSample {
        DialogueSample {
            knowledge: vec![vec![10, 11, 12], vec![13, 14]],
            history: vec![Turn {
                speaker: Speaker::Partner,
                tokens: vec![20, 21],
            }],
            response: vec![10, 11, 12],
            gold_grounding: Some(0),
            facts: Some(vec![
                FactTriple {
                    subject: 10,
                    relation: 11,
                    object: 12,
                },
                FactTriple {
                    subject: 13,
                    relation: 14,
                    object: 15,
                },
            ]),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut s2 = sample();
        s2.gold_grounding = None;
        s2.facts = None;
        let all = vec![sample(), s2];
        save_jsonl(&all, &p).unwrap();
        assert_eq!(load_jsonl(&p).unwrap(), all);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        File::create(&p).unwrap();
        assert!(load_jsonl(&p).unwrap().is_empty());
    }

    #[test]
    fn empty_knowledge_names_invariant_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let mut f = File::create(&p).unwrap();
        writeln!(f, "{}", sample_to_json(&sample())).unwrap();
        writeln!(f, r#"{{"knowledge": [], "history": [], "response": [1]}}"#).unwrap();
        let err = load_jsonl(&p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("no knowledge"), "{err}");
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{not json}\n").unwrap();
        let err = load_jsonl(&p).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_fields_ignored_and_text_tokens_resolved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(
            &p,
            r#"{"knowledge": ["cat likes fish", "7 8"], "history": [{"speaker": "other", "tokens": "cat"}], "response": "cat likes fish", "gold_grounding": 0, "topic": "pets"}"#,
        )
        .unwrap();
        let vocab = Vocab::from_words(["cat", "likes", "fish"].map(String::from));
        let s = load_jsonl_with_vocab(&p, Some(&vocab)).unwrap();
        assert_eq!(s[0].knowledge, vec![vec![0, 1, 2], vec![7, 8]]);
        assert_eq!(s[0].history[0].speaker, Speaker::Partner);
        assert!(load_jsonl(&p).is_err());
    }
}
