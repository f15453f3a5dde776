//! Trains the coupled intent / slot benchmark with and without feedback.
//!
//! ```bash
//! cargo run --release -p feedback-mtl --example synthetic_feedback
//! ```

use feedback_mtl::train::{prepare_data, report_line, train, Ablation, RunConfig};

fn main() -> feedback_mtl::Result<()> {
    let base = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synthetic.toml"))?;
    let data = prepare_data(&base.data)?;
    println!("{} train / {} test utterances", data.train.len(), data.test.len());
    for flag in [Ablation::Triv, Ablation::Ful] {
        let cfg = base.with_ablation(flag, base.loss.conv_weight)?;
        let out = train(&cfg, 1, &data)?;
        println!("{flag:<5} {}", report_line(&out.report));
    }
    Ok(())
}
