//! Checks reverse-mode gradients of a small two-layer network against
//! central differences.
//!
//! ```bash
//! cargo run -p feedback-mtl --example gradcheck
//! ```

use feedback_mtl::tensor::{finite_diff_check, Axis, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> feedback_mtl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w1 = Tensor::uniform(4, 6, 0.8, &mut rng);
    let w2 = Tensor::uniform(6, 3, 0.8, &mut rng);
    let x = Tensor::uniform(5, 4, 1.0, &mut rng);
    let targets = [Some(0), Some(2), None, Some(1), Some(1)];

    // Gradient with respect to the first weight matrix.
    let check = finite_diff_check(
        |g, w| {
            let xv = g.constant(x.clone());
            let w2v = g.constant(w2.clone());
            let h = g.matmul(xv, w)?;
            let h = g.tanh(h);
            let logits = g.matmul(h, w2v)?;
            g.cross_entropy(logits, &targets)
        },
        &w1,
        1e-4,
    )?;
    println!("cross-entropy through tanh layer: max rel error {:.2e}", check.max_rel_error);

    let check = finite_diff_check(
        |g, v| {
            let p = g.softmax(v, Axis::Rows);
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-4,
    )?;
    println!("column softmax, squared sum:      max rel error {:.2e}", check.max_rel_error);
    Ok(())
}
