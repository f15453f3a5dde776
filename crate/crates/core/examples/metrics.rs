use feedback_mtl::metrics::{exact_match_accuracy, extract_spans, intent_accuracy, perplexity, setting_steps, slot_f1};
use feedback_mtl::tensor::Tensor;

fn labels(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn main() -> feedback_mtl::Result<()> {
    let gold = vec![labels("O B-from I-from O B-to"), labels("B-date O O")];
    let pred = vec![labels("O B-from O O B-to"), labels("B-date O B-to")];

    for (i, p) in pred.iter().enumerate() {
        println!("pred {i} spans: {:?}", extract_spans(p));
    }
    let prf = slot_f1(&pred, &gold)?;
    println!("slot P {:.3} R {:.3} F1 {:.3}", prf.precision, prf.recall, prf.f1);

    let (pi, gi) = (["flight", "fare"], ["flight", "fare"]);
    println!("intent acc {:.3}", intent_accuracy(&pi, &gi)?);
    println!("exact match {:.3}", exact_match_accuracy(&pi, &pred, &gi, &gold)?);

    let uniform = Tensor::filled(4, 10, -(10f64).ln());
    println!("uniform ppl over 10 words: {}", perplexity(&uniform, &[Some(1), Some(3), Some(5), Some(7)], &[true; 4])?);

    let curve = [(100, 0.62), (200, 0.81), (300, 0.90), (400, 0.915), (500, 0.92)];
    println!("setting steps (2% band): {}", setting_steps(&curve, 2.0)?);
    Ok(())
}
