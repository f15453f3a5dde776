//! Utterances with intent and IBO slot labels: ATIS-format files, the
//! synthetic coupled-task generator, vocabularies and padded batches.

mod atis;
mod batch;
mod synthetic;
mod vocab;

pub use atis::{load_atis_format, read_atis_format, write_atis_format, LineError, LoadOptions, LoadReport};
pub use batch::{batch, Batch};
pub use synthetic::{gen_synthetic, slot_signature, SyntheticSpec};
pub use vocab::{build_vocab, LabelVocab, Vocab, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};

/// The three supervised tasks of spoken language understanding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Intent detection: one label per utterance.
    #[serde(alias = "id")]
    Intent,
    /// Slot filling: one IBO label per token.
    #[serde(alias = "sf")]
    Slot,
    /// Next-word prediction: the following token at every position.
    #[serde(alias = "nwp")]
    NextWord,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Intent => "intent",
            TaskKind::Slot => "slot",
            TaskKind::NextWord => "next-word",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, slots: Vec<String>, intent: impl Into<String>) -> Self {
        Utterance { tokens, slots, intent: intent.into() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Slot type of a `B-x` / `I-x` label.
pub fn slot_type(label: &str) -> Option<&str> {
    label.strip_prefix("B-").or_else(|| label.strip_prefix("I-"))
}

/// Checks IBO well-formedness: every label is `O`, `B-x` or `I-x`, and an
/// `I-x` directly continues a span of type `x`.
pub fn validate_ibo(slots: &[String]) -> Result<(), String> {
    let mut open: Option<&str> = None;
    for (i, label) in slots.iter().enumerate() {
        if label == "O" {
            open = None;
        } else if let Some(t) = label.strip_prefix("B-") {
            if t.is_empty() {
                return Err(format!("position {i}: empty slot type in {label:?}"));
            }
            open = Some(t);
        } else if let Some(t) = label.strip_prefix("I-") {
            if open != Some(t) {
                return Err(format!("position {i}: {label:?} does not continue a span of type {t:?}"));
            }
        } else {
            return Err(format!("position {i}: {label:?} is not an IBO label"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn ibo_grammar() {
        assert!(validate_ibo(&labels("O O O B-fromloc O B-toloc I-toloc B-depart_date")).is_ok());
        assert!(validate_ibo(&labels("O I-toloc")).is_err());
        assert!(validate_ibo(&labels("B-a I-b")).is_err());
        assert!(validate_ibo(&labels("B-a I-a I-a")).is_ok());
        assert!(validate_ibo(&labels("X")).is_err());
    }
}
