use feedback_mtl::loss::convergence_loss;
use feedback_mtl::tensor::{Graph, Segments, Tensor};

/// Discounted sum of step-to-step changes for a damped and an oscillating
/// trace, at several delay constants.
fn main() -> feedback_mtl::Result<()> {
    let damped: Vec<f64> = (0..=5).map(|k| 1.0 - 0.5f64.powi(k)).collect();
    let oscillating: Vec<f64> = (0..=5).map(|k| if k % 2 == 0 { 0.2 } else { 0.8 }).collect();
    for beta in [0.3, 0.5, 0.9] {
        let mut row = Vec::new();
        for trace in [&damped, &oscillating] {
            let mut g = Graph::new();
            let vars: Vec<_> = trace.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
            let l = convergence_loss(&mut g, &vars, beta, &Segments::single(1))?;
            row.push(g.value(l).item());
        }
        println!("beta {beta:.1}: damped {:.4}  oscillating {:.4}", row[0], row[1]);
    }
    Ok(())
}
