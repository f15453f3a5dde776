use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::Utterance;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Dense bidirectional label <-> id map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = LabelVocab::default();
        for l in labels {
            v.insert(l.into());
        }
        v
    }

    pub fn insert(&mut self, label: String) -> usize {
        if let Some(&i) = self.index.get(&label) {
            return i;
        }
        self.index.insert(label.clone(), self.labels.len());
        self.labels.push(label);
        self.labels.len() - 1
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `label<TAB>id` per line.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(f, "{l}\t{i}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (label, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::data(format!("{}:{}: expected label<TAB>id", path.display(), n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::data(format!("{}:{}: bad id {id:?}", path.display(), n + 1)))?;
            pairs.push((id, label.to_string()));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::data(format!("{}: ids are not dense from 0", path.display())));
        }
        Ok(LabelVocab::from_labels(pairs.into_iter().map(|(_, l)| l)))
    }
}

/// Word, slot and intent vocabularies of a corpus.
///
/// Word ids 0..4 are reserved for padding, unknown, begin- and
/// end-of-sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub words: LabelVocab,
    pub slots: LabelVocab,
    pub intents: LabelVocab,
}

impl Vocab {
    pub fn word_id(&self, token: &str) -> usize {
        self.words.id(token).unwrap_or(UNK)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.word_id(t)).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.words.write(dir.join("words.vocab"))?;
        self.slots.write(dir.join("slots.vocab"))?;
        self.intents.write(dir.join("intents.vocab"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let words = LabelVocab::read(dir.join("words.vocab"))?;
        if words.len() < SPECIALS.len() || SPECIALS.iter().enumerate().any(|(i, s)| words.label(i) != *s) {
            return Err(Error::data("word vocabulary does not start with the special tokens"));
        }
        Ok(Vocab {
            words,
            slots: LabelVocab::read(dir.join("slots.vocab"))?,
            intents: LabelVocab::read(dir.join("intents.vocab"))?,
        })
    }
}

/// Builds vocabularies from a corpus. Words seen fewer than `min_freq` times
/// map to the unknown id; words are ordered by descending frequency, then
/// lexicographically. Slot labels put `O` first, then sort; intents sort.
pub fn build_vocab(data: &[Utterance], min_freq: usize) -> Result<Vocab> {
    if data.is_empty() {
        return Err(Error::data("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut slot_set = std::collections::BTreeSet::new();
    let mut intent_set = std::collections::BTreeSet::new();
    for u in data {
        for t in &u.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        slot_set.extend(u.slots.iter().map(String::as_str));
        intent_set.insert(u.intent.as_str());
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIALS.contains(w))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let words = LabelVocab::from_labels(SPECIALS.iter().copied().chain(kept.into_iter().map(|(w, _)| w)));
    let o_first = slot_set.contains("O");
    let slots = LabelVocab::from_labels(
        o_first
            .then_some("O")
            .into_iter()
            .chain(slot_set.into_iter().filter(|s| *s != "O")),
    );
    let intents = LabelVocab::from_labels(intent_set);
    Ok(Vocab { words, slots, intents })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_line_corpus() {
        let u = Utterance::new(vec!["show".into(), "flights".into()], vec!["O".into(), "O".into()], "flight");
        let v = build_vocab(&[u], 1).unwrap();
        assert_eq!(v.words.labels(), &["<pad>", "<unk>", "<bos>", "<eos>", "flights", "show"]);
        assert_eq!(v.slots.labels(), &["O"]);
        assert_eq!(v.intents.labels(), &["flight"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_vocab(&[], 1).is_err());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let u = Utterance::new(vec!["a".into()], vec!["O".into()], "i");
        let v = build_vocab(&[u], 1).unwrap();
        assert_eq!(v.word_id("zzz"), UNK);
        assert_eq!(v.word_id("a"), 4);
    }
}
