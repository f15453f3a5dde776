//! Samples infusion positions from a learned-logits gate and compares the
//! empirical frequencies with softmax(z).

use feedback_mtl::gate::{GateConfig, GateMode, GateState};
use feedback_mtl::model::{ParamStore, Session};
use feedback_mtl::tensor::{Segments, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> feedback_mtl::Result<()> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = GateConfig { mode: GateMode::LearnedLogits, ..GateConfig::default() };
    let mut gate = GateState::new(&mut store, &mut rng, 0, 3, &cfg)?;
    let z = [1f64.ln(), 2f64.ln(), 3f64.ln()];
    *store.value_mut(gate.logits_param().unwrap()) = Tensor::row(&z);

    let n = 60_000;
    let mut s = Session::new(&store);
    let y = s.constant(Tensor::uniform(n, 4, 1.0, &mut rng));
    gate.select(&mut s, y, &Segments::identity(n), Some(&mut rng))?;

    let total: f64 = z.iter().map(|v| v.exp()).sum();
    for (t, &count) in gate.histogram().iter().enumerate() {
        println!("position {}: {:.4} (softmax {:.4})", t + 1, count as f64 / n as f64, z[t].exp() / total);
    }

    // Without noise the gate is a plain argmax.
    let mut s = Session::new(&store);
    let y = s.constant(Tensor::uniform(2, 4, 1.0, &mut rng));
    gate.select(&mut s, y, &Segments::identity(2), None)?;
    println!("noise-free selection: {:?}", gate.last_selection());
    Ok(())
}
