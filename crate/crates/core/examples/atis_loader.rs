//! Reads ATIS-format lines, reports rejected ones and builds vocabularies.

use feedback_mtl::data::{build_vocab, read_atis_format, LoadOptions};

const SAMPLE: &str = "\
show me flights from boston to denver\tO O O O B-fromloc.city_name O B-toloc.city_name\tatis_flight
what is the fare to new york\tO O O B-fare O B-toloc.city_name I-toloc.city_name\tatis_airfare
list airlines\tO O O\tatis_airline
cheapest flight to dallas\tB-cost_relative O O I-toloc.city_name\tatis_flight
";

fn main() -> feedback_mtl::Result<()> {
    let strict = read_atis_format(SAMPLE, &LoadOptions::default());
    println!("strict: {} kept, {} skipped", strict.utterances.len(), strict.skipped());
    for e in &strict.errors {
        println!("  line {}: {}", e.line, e.reason);
    }

    let lenient = read_atis_format(SAMPLE, &LoadOptions { repair_ibo: true });
    println!("repairing IBO: {} kept, {} repaired", lenient.utterances.len(), lenient.repaired.len());

    let vocab = build_vocab(&lenient.utterances, 1)?;
    println!("intents: {:?}", vocab.intents.labels());
    println!("slot labels: {:?}", vocab.slots.labels());
    println!("words: {} (including 4 reserved)", vocab.words.len());
    Ok(())
}
