use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, EOS, PAD};
use super::Utterance;
use crate::tensor::Segments;

/// Right-padded minibatch. Matrices are row-major `[examples x max_len]`.
///
/// Targets are `None` at padding and for labels missing from the
/// vocabulary. Next-word targets are the tokens shifted left by one, with
/// the end-of-sentence id after the last token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub max_len: usize,
    pub word_ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub mask: Vec<bool>,
    pub slot_ids: Vec<Option<usize>>,
    pub next_word_ids: Vec<Option<usize>>,
    pub intent_ids: Vec<Option<usize>>,
    /// Position of each example in the source corpus.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.word_ids[i * self.max_len..i * self.max_len + self.lengths[i]]
    }

    /// One row group per example over the unpadded token rows.
    pub fn segments(&self) -> Segments {
        Segments::from_lengths(&self.lengths)
    }

    fn flatten<T: Copy>(&self, padded: &[T]) -> Vec<T> {
        (0..self.len())
            .flat_map(|i| padded[i * self.max_len..i * self.max_len + self.lengths[i]].iter().copied())
            .collect()
    }

    pub fn flat_word_ids(&self) -> Vec<usize> {
        self.flatten(&self.word_ids)
    }

    pub fn flat_slot_ids(&self) -> Vec<Option<usize>> {
        self.flatten(&self.slot_ids)
    }

    pub fn flat_next_word_ids(&self) -> Vec<Option<usize>> {
        self.flatten(&self.next_word_ids)
    }

    pub fn mask_sums(&self) -> Vec<usize> {
        self.mask.chunks(self.max_len).map(|r| r.iter().filter(|&&m| m).count()).collect()
    }
}

/// Splits `data` into batches of at most `size` examples. With a seed the
/// order is a deterministic shuffle; without one it is the corpus order.
pub fn batch(data: &[Utterance], size: usize, vocab: &Vocab, shuffle_seed: Option<u64>) -> Vec<Batch> {
    assert!(size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(size).map(|idx| make_batch(data, idx, vocab)).collect()
}

fn make_batch(data: &[Utterance], indices: &[usize], vocab: &Vocab) -> Batch {
    let max_len = indices.iter().map(|&i| data[i].len()).max().unwrap_or(0);
    let cells = indices.len() * max_len;
    let mut b = Batch {
        max_len,
        word_ids: vec![PAD; cells],
        lengths: Vec::with_capacity(indices.len()),
        mask: vec![false; cells],
        slot_ids: vec![None; cells],
        next_word_ids: vec![None; cells],
        intent_ids: Vec::with_capacity(indices.len()),
        indices: indices.to_vec(),
    };
    for (r, &i) in indices.iter().enumerate() {
        let u = &data[i];
        let ids = vocab.encode_tokens(&u.tokens);
        let base = r * max_len;
        for (t, &id) in ids.iter().enumerate() {
            b.word_ids[base + t] = id;
            b.mask[base + t] = true;
            b.slot_ids[base + t] = vocab.slots.id(&u.slots[t]);
            b.next_word_ids[base + t] = Some(ids.get(t + 1).copied().unwrap_or(EOS));
        }
        b.lengths.push(u.len());
        b.intent_ids.push(vocab.intents.id(&u.intent));
    }
    b
}
