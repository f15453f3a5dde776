//! Two scalar tasks feeding each other:
//!
//!   y1 = a + b * y2,   y2 = c + d * y1
//!
//! Synchronous iteration converges to y1* = (a + b c) / (1 - b d) when
//! |b d| < 1. The residual shrinks by |b d| every two steps.

use feedback_mtl::gate::GateConfig;
use feedback_mtl::metrics::residual_curve;
use feedback_mtl::model::{
    BlockKind, BlockSpec, FeedbackModel, HeadOutput, Infusion, InitMode, IterateOptions, Level, ModelSpec, ParamStore,
    RouteSpec, Session, TaskSpec,
};
use feedback_mtl::tensor::{Segments, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> feedback_mtl::Result<()> {
    let (a, b, c, d) = (1.0, 0.5, 1.0, 0.5);
    let unit = |name: &str| TaskSpec {
        name: name.into(),
        level: Level::Token,
        blocks: vec![BlockSpec::new(BlockKind::Linear, 1)],
        output: HeadOutput::Identity,
    };
    let link = |from: &str, to: &str| RouteSpec { from: from.into(), to: to.into(), width: 1, position: Infusion::Fixed(1) };
    let spec = ModelSpec {
        input_width: 1,
        shared: vec![],
        tasks: vec![unit("y1"), unit("y2")],
        routes: vec![link("y2", "y1"), link("y1", "y2")],
        gate: GateConfig::default(),
    };

    let mut store = ParamStore::new();
    let mut model = FeedbackModel::new(&spec, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (t, (direct, fb)) in [(a, b), (c, d)].into_iter().enumerate() {
        let blk = &model.branches()[t].blocks[0];
        *store.value_mut(blk.weight()) = Tensor::scalar(direct);
        store.value_mut(blk.bias()).fill(0.0);
        *store.value_mut(blk.extra_weight(t).unwrap()) = Tensor::scalar(fb);
    }
    for r in model.routes() {
        *store.value_mut(r.amplifier.projection.weight()) = Tensor::scalar(1.0);
        store.value_mut(r.amplifier.projection.bias()).fill(0.0);
    }

    let k = 30;
    let mut s = Session::new(&store);
    let x = s.constant(Tensor::scalar(1.0));
    let opts = IterateOptions::new(k).init(InitMode::Zeros);
    let traces = model.iterate(&mut s, x, &Segments::single(1), &opts, &mut ChaCha8Rng::seed_from_u64(0))?;
    let y1: Vec<Tensor> = traces[0].outputs.iter().map(|&v| s.graph.value(v).clone()).collect();
    let res = residual_curve(&y1);

    println!("fixed point y1* = {}", (a + b * c) / (1.0 - b * d));
    println!("{:>3}  {:>12}  {:>10}", "k", "y1^k", "residual");
    for step in (1..=k).step_by(3) {
        println!("{step:>3}  {:>12.9}  {:>10.3e}", y1[step].item(), res[step - 1]);
    }
    Ok(())
}
