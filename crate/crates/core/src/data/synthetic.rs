use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{slot_type, Utterance};
use crate::error::{Error, Result};

/// Fixed stream for the slot-signature -> intent table, so every seed
/// generates samples of the same task.
const TABLE_SEED: u64 = 0x5eed_7ab1e;

/// Generator settings for the coupled intent / slot corpus.
///
/// Each utterance plants at most one span per slot type. A span is a
/// trigger word `t<s>` followed by a value word `v<i>` (`B-type<s>`) and
/// optionally a continuation word `x<i>` (`I-type<s>`). Triggers also appear
/// before ordinary words and values also appear without a trigger, so a
/// slot is present only when a trigger is directly followed by a value.
///
/// With probability `coupling` the intent is a fixed function of which slot
/// types are present. Otherwise it is drawn uniformly and revealed by a cue
/// word `c<intent>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Number of filler words.
    pub vocab_size: usize,
    pub value_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub intent_count: usize,
    pub slot_types: usize,
    pub coupling: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 2500,
            vocab_size: 40,
            value_words: 12,
            min_len: 6,
            max_len: 12,
            intent_count: 4,
            slot_types: 3,
            coupling: 0.9,
            label_noise: 0.0,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::config(format!("coupling must lie in [0, 1], got {}", self.coupling)));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config(format!("label noise must lie in [0, 1], got {}", self.label_noise)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("sequence length range must satisfy 1 <= min <= max"));
        }
        if self.intent_count < 2 || self.slot_types == 0 || self.slot_types > 16 {
            return Err(Error::config("need >= 2 intents and 1..=16 slot types"));
        }
        if (1usize << (self.slot_types - 1)) < self.intent_count.div_ceil(2) {
            return Err(Error::config("2^(slot_types - 1) must be at least half the intent count"));
        }
        if self.vocab_size == 0 || self.value_words == 0 {
            return Err(Error::config("vocabulary sizes must be positive"));
        }
        Ok(())
    }

    /// Intent index for each slot-presence bitmask. Bit 0 (slot type 0) is
    /// the designated type: masks with it map to the lower half of the
    /// intents, masks without it to the upper half, so the intent also
    /// reveals whether a type-0 span is present.
    pub fn intent_table(&self) -> Vec<usize> {
        let masks = 1usize << self.slot_types;
        let upper = self.intent_count.div_ceil(2);
        let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED ^ ((self.slot_types as u64) << 8) ^ self.intent_count as u64);
        let mut table = vec![0; masks];
        for (bit, group) in [(1, 0..upper), (0, upper..self.intent_count)] {
            let ids: Vec<usize> = group.collect();
            let mut members: Vec<usize> = (0..masks).filter(|m| m & 1 == bit).collect();
            members.shuffle(&mut rng);
            for (j, m) in members.into_iter().enumerate() {
                table[m] = ids[j % ids.len()];
            }
        }
        table
    }

    pub fn intent_name(i: usize) -> String {
        format!("intent{i}")
    }

    pub fn slot_type_name(s: usize) -> String {
        format!("type{s}")
    }
}

/// Sorted span types of an utterance (its slot-span multiset).
pub fn slot_signature(u: &Utterance) -> Vec<String> {
    let mut types: Vec<String> = u
        .slots
        .iter()
        .filter(|l| l.starts_with("B-"))
        .filter_map(|l| slot_type(l).map(String::from))
        .collect();
    types.sort();
    types
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let table = spec.intent_table();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        out.push(generate_one(spec, &table, &mut rng));
    }
    Ok(out)
}

fn generate_one(spec: &SyntheticSpec, table: &[usize], rng: &mut ChaCha8Rng) -> Utterance {
    let target_len = rng.gen_range(spec.min_len..=spec.max_len);
    let coupled = rng.gen::<f64>() < spec.coupling;

    let mut units: Vec<Vec<(String, String)>> = Vec::new();
    let mut mask = 0usize;
    for s in 0..spec.slot_types {
        if rng.gen_bool(0.5) {
            mask |= 1 << s;
            let ty = SyntheticSpec::slot_type_name(s);
            let mut unit = vec![
                (format!("t{s}"), "O".to_string()),
                (format!("v{}", rng.gen_range(0..spec.value_words)), format!("B-{ty}")),
            ];
            if rng.gen_bool(0.5) {
                unit.push((format!("x{}", rng.gen_range(0..spec.value_words)), format!("I-{ty}")));
            }
            units.push(unit);
        }
    }
    if rng.gen_bool(0.5) {
        let s = rng.gen_range(0..spec.slot_types);
        units.push(vec![
            (format!("t{s}"), "O".into()),
            (format!("w{}", rng.gen_range(0..spec.vocab_size)), "O".into()),
        ]);
    }
    if rng.gen_bool(0.5) {
        units.push(vec![(format!("v{}", rng.gen_range(0..spec.value_words)), "O".into())]);
    }

    let mut intent = if coupled {
        table[mask]
    } else {
        let i = rng.gen_range(0..spec.intent_count);
        units.push(vec![(format!("c{i}"), "O".into())]);
        i
    };
    if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
        intent = rng.gen_range(0..spec.intent_count);
    }

    let planted: usize = units.iter().map(Vec::len).sum();
    for _ in planted..target_len {
        units.push(vec![(format!("w{}", rng.gen_range(0..spec.vocab_size)), "O".into())]);
    }
    units.shuffle(rng);

    let (tokens, slots) = units.into_iter().flatten().unzip();
    Utterance { tokens, slots, intent: SyntheticSpec::intent_name(intent) }
}
