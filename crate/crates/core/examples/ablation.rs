//! Small ablation grid on a reduced synthetic corpus. Prints the table with
//! one row per cell (median over seeds).

use feedback_mtl::train::{ablate, prepare_data, Ablation, RunConfig};

fn main() -> feedback_mtl::Result<()> {
    let mut cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synthetic.toml"))?;
    cfg.data.synthetic.as_mut().unwrap().count = 600;
    cfg.data.test_count = 200;
    cfg.optimizer.epochs = 4;
    let data = prepare_data(&cfg.data)?;
    let table = ablate(&cfg, &Ablation::ALL, &[1, 2], &data, None)?;
    print!("{}", table.to_text());
    Ok(())
}
