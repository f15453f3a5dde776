use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use feedback_mtl::data::{
    batch, build_vocab, gen_synthetic, load_atis_format, read_atis_format, slot_signature, write_atis_format,
    LoadOptions, SyntheticSpec, Utterance, PAD, UNK,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// An ATIS-shaped corpus: `intents` intent names and `types` slot types,
/// each used at least once so the label inventories are exact.
fn fixture(count: usize, intents: usize, types: usize, seed: u64) -> Vec<Utterance> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = r.gen_range(3..12);
            let tokens: Vec<String> = (0..n).map(|_| format!("w{}", r.gen_range(0..300))).collect();
            let mut slots = vec!["O".to_string(); n];
            // Cycle through the types so every B and I label occurs.
            let ty = i % types;
            let start = r.gen_range(0..n - 1);
            slots[start] = format!("B-s{ty}");
            slots[start + 1] = format!("I-s{ty}");
            Utterance::new(tokens, slots, format!("i{}", i % intents))
        })
        .collect()
}

#[test]
fn atis_sized_fixture_loads_with_exact_inventories() {
    let dir = tempfile::tempdir().unwrap();
    let train = fixture(4978, 12, 63, 1);
    let test = fixture(893, 12, 63, 2);
    write_atis_format(dir.path().join("train.tsv"), &train).unwrap();
    write_atis_format(dir.path().join("test.tsv"), &test).unwrap();

    let tr = load_atis_format(dir.path().join("train.tsv"), &LoadOptions::default()).unwrap();
    let te = load_atis_format(dir.path().join("test.tsv"), &LoadOptions::default()).unwrap();
    assert_eq!(tr.utterances.len(), 4978);
    assert_eq!(te.utterances.len(), 893);
    assert_eq!(tr.skipped() + te.skipped(), 0);
    assert_eq!(tr.utterances, train);

    let v = build_vocab(&tr.utterances, 1).unwrap();
    assert_eq!(v.intents.len(), 12);
    assert_eq!(v.slots.len(), 127);
    assert_eq!(v.slots.label(0), "O");
}

#[test]
fn minimal_and_ibo_lines() {
    let r = read_atis_format("show flights\tO O\tflight", &LoadOptions::default());
    assert_eq!(r.utterances.len(), 1);
    assert_eq!(r.utterances[0].intent, "flight");

    let line = "flights from boston to new york\tO O B-fromloc.city_name O B-toloc.city_name I-toloc.city_name\tatis_flight\n";
    let r = read_atis_format(line, &LoadOptions::default());
    assert_eq!(r.skipped(), 0);
    let u = &r.utterances[0];
    assert_eq!(u.tokens.len(), 6);
    assert_eq!(u.slots[4], "B-toloc.city_name");
    assert_eq!(u.slots[5], "I-toloc.city_name");
}

#[test]
fn malformed_lines_are_counted_not_fatal() {
    let text = "\
a b\tO O\tx
a b\tO\tx
only one field
a\tI-t\tx

c d\tB-t I-t\ty
e\tO\t
";
    let r = read_atis_format(text, &LoadOptions::default());
    assert_eq!(r.utterances.len(), 2);
    assert_eq!(r.skipped(), 4);
    let lines: Vec<usize> = r.errors.iter().map(|e| e.line).collect();
    assert_eq!(lines, vec![2, 3, 4, 7]);
}

#[test]
fn missing_file_is_a_data_error() {
    let err = load_atis_format("/nonexistent/file.tsv", &LoadOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn invalid_utf8_is_a_data_error() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(&[0x66, 0xff, 0x09, 0x4f, 0x09, 0x78]).unwrap();
    assert!(load_atis_format(f.path(), &LoadOptions::default()).is_err());
}

#[test]
fn synthetic_is_deterministic_per_seed() {
    let spec = SyntheticSpec { count: 400, ..SyntheticSpec::default() };
    let a = gen_synthetic(&spec).unwrap();
    assert_eq!(a, gen_synthetic(&spec).unwrap());
    let b = gen_synthetic(&SyntheticSpec { seed: 2, ..spec }).unwrap();
    assert_ne!(a, b);
}

/// Plug-in mutual information in nats between intent and slot signature.
fn mutual_information(data: &[Utterance]) -> f64 {
    let n = data.len() as f64;
    let mut joint: HashMap<(String, Vec<String>), f64> = HashMap::new();
    let mut pi: HashMap<String, f64> = HashMap::new();
    let mut ps: HashMap<Vec<String>, f64> = HashMap::new();
    for u in data {
        let s = slot_signature(u);
        *joint.entry((u.intent.clone(), s.clone())).or_default() += 1.0;
        *pi.entry(u.intent.clone()).or_default() += 1.0;
        *ps.entry(s).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|((i, s), &c)| {
            let p = c / n;
            p * (p / ((pi[i] / n) * (ps[s] / n))).ln()
        })
        .sum()
}

/// Accuracy of predicting the intent as the majority intent of its slot
/// signature, with the table fit on the same data.
fn decision_table_accuracy(data: &[Utterance]) -> f64 {
    let mut counts: HashMap<Vec<String>, BTreeMap<String, usize>> = HashMap::new();
    for u in data {
        *counts.entry(slot_signature(u)).or_default().entry(u.intent.clone()).or_default() += 1;
    }
    let hits: usize = counts.values().map(|m| m.values().max().copied().unwrap()).sum();
    hits as f64 / data.len() as f64
}

#[test]
fn coupling_controls_dependence() {
    let base = SyntheticSpec { count: 10_000, ..SyntheticSpec::default() };
    let independent = gen_synthetic(&SyntheticSpec { coupling: 0.0, ..base.clone() }).unwrap();
    let mi = mutual_information(&independent);
    assert!(mi < 0.02, "MI at zero coupling: {mi}");

    let coupled = gen_synthetic(&SyntheticSpec { coupling: 1.0, ..base.clone() }).unwrap();
    assert_eq!(decision_table_accuracy(&coupled), 1.0);
    assert!(mutual_information(&coupled) > 0.5);

    let partial = gen_synthetic(&SyntheticSpec { coupling: 0.9, ..base }).unwrap();
    let acc = decision_table_accuracy(&partial);
    assert!(acc > 0.88 && acc < 0.97, "decision table accuracy {acc}");
}

#[test]
fn vocab_min_freq_drops_hapaxes() {
    let u = |s: &str| {
        let t: Vec<String> = s.split(' ').map(String::from).collect();
        let n = t.len();
        Utterance::new(t, vec!["O".into(); n], "q")
    };
    let data = vec![u("a b c"), u("a b d"), u("a e")];
    let v = build_vocab(&data, 2).unwrap();
    assert_eq!(&v.words.labels()[4..], &["a", "b"]);
    for hapax in ["c", "d", "e"] {
        assert_eq!(v.word_id(hapax), UNK);
    }
    let all = build_vocab(&data, 1).unwrap();
    assert_eq!(all.words.len(), 4 + 5);
}

#[test]
fn vocab_round_trips_through_files() {
    let data = gen_synthetic(&SyntheticSpec { count: 50, ..SyntheticSpec::default() }).unwrap();
    let v = build_vocab(&data, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    v.save(dir.path()).unwrap();
    assert_eq!(feedback_mtl::data::Vocab::load(dir.path()).unwrap(), v);
}

#[test]
fn batches_pad_and_recover_examples() {
    let data = gen_synthetic(&SyntheticSpec { count: 37, min_len: 3, max_len: 9, ..SyntheticSpec::default() }).unwrap();
    let v = build_vocab(&data, 1).unwrap();
    let batches = batch(&data, 8, &v, Some(4));
    assert_eq!(batches.len(), 5);
    let mut seen = Vec::new();
    for b in &batches {
        assert_eq!(b.lengths, b.mask_sums());
        for (r, &i) in b.indices.iter().enumerate() {
            let u = &data[i];
            let row = b.row(r);
            assert_eq!(&row[..u.len()], v.encode_tokens(&u.tokens).as_slice());
            assert!(row[u.len()..].iter().all(|&w| w == PAD));
            let labels: Vec<&str> = b.slot_ids[r * b.max_len..r * b.max_len + u.len()]
                .iter()
                .map(|id| v.slots.label(id.unwrap()))
                .collect();
            assert_eq!(labels, u.slots);
            assert_eq!(v.intents.label(b.intent_ids[r].unwrap()), u.intent);
            seen.push(i);
        }
    }
    seen.sort();
    assert_eq!(seen, (0..37).collect::<Vec<_>>());
    // Same seed, same order; no seed, corpus order.
    assert_eq!(batch(&data, 8, &v, Some(4))[0].indices, batches[0].indices);
    assert_eq!(batch(&data, 8, &v, None)[0].indices, (0..8).collect::<Vec<_>>());
}
