use feedback_mtl::gate::GateConfig;
use feedback_mtl::metrics::residual_curve;
use feedback_mtl::model::{
    BlockKind, BlockSpec, FeedbackModel, HeadOutput, Infusion, InitMode, IterateOptions, Level, ModelSpec,
    ParamStore, RouteSpec, Session, TaskSpec,
};
use feedback_mtl::tensor::{Segments, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn task(name: &str, level: Level, widths: &[usize]) -> TaskSpec {
    let mut blocks: Vec<BlockSpec> = widths.iter().map(|&w| BlockSpec::new(BlockKind::Tanh, w)).collect();
    blocks.last_mut().unwrap().kind = BlockKind::Linear;
    TaskSpec { name: name.into(), level, blocks, output: HeadOutput::Softmax }
}

fn route(from: &str, to: &str, position: Infusion) -> RouteSpec {
    RouteSpec { from: from.into(), to: to.into(), width: 3, position }
}

/// Token task `slot` (3 labels) and sentence task `intent` (4 labels) with
/// routes both ways.
fn two_task_spec(position: Infusion, shared: bool) -> ModelSpec {
    ModelSpec {
        input_width: 5,
        shared: if shared { vec![BlockSpec::new(BlockKind::Tanh, 6)] } else { vec![] },
        tasks: vec![task("slot", Level::Token, &[4, 3]), task("intent", Level::Sentence, &[5, 4])],
        routes: vec![route("slot", "intent", position), route("intent", "slot", position)],
        gate: GateConfig::default(),
    }
}

fn build(spec: &ModelSpec, seed: u64) -> (FeedbackModel, ParamStore) {
    let mut store = ParamStore::new();
    let model = FeedbackModel::new(spec, &mut store, &mut rng(seed)).unwrap();
    (model, store)
}

fn input(seed: u64) -> (Tensor, Segments) {
    let seg = Segments::from_lengths(&[3, 1, 4]);
    (Tensor::uniform(seg.total_rows(), 5, 1.0, &mut rng(seed + 1000)), seg)
}

fn randomize_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed + 77);
    for e in store.entries_mut() {
        if e.name.ends_with(".b") {
            let (rows, cols) = e.value.shape();
            e.value = Tensor::uniform(rows, cols, 0.5, &mut r);
        }
    }
}

fn zero(store: &mut ParamStore, ids: &[feedback_mtl::model::ParamId]) {
    for &id in ids {
        store.value_mut(id).fill(0.0);
    }
}

/// Values of every trace entry, per task.
fn trace_values(
    model: &mut FeedbackModel,
    store: &ParamStore,
    x: &Tensor,
    seg: &Segments,
    opts: &IterateOptions,
) -> Vec<Vec<Tensor>> {
    let mut s = Session::new(store);
    let xv = s.constant(x.clone());
    let traces = model.iterate(&mut s, xv, seg, opts, &mut rng(5)).unwrap();
    traces.iter().map(|t| t.outputs.iter().map(|&v| s.graph.value(v).clone()).collect()).collect()
}

fn static_values(model: &FeedbackModel, store: &ParamStore, x: &Tensor, seg: &Segments) -> Vec<Tensor> {
    let mut s = Session::new(store);
    let xv = s.constant(x.clone());
    let outs = model.static_forward(&mut s, xv, seg).unwrap();
    outs.iter().map(|&(_, y)| s.graph.value(y).clone()).collect()
}

#[test]
fn forward_shared_compositions() {
    let (x, seg) = input(0);
    let (model, store) = build(&two_task_spec(Infusion::Fixed(1), false), 0);
    let mut s = Session::new(&store);
    let xv = s.constant(x.clone());
    let yc = model.forward_shared(&mut s, xv, &seg).unwrap();
    assert_eq!(s.graph.value(yc), &x);

    // One tanh block with identity weight.
    let mut spec = two_task_spec(Infusion::Fixed(1), true);
    spec.shared = vec![BlockSpec::new(BlockKind::Tanh, 5)];
    let (model, mut store) = build(&spec, 1);
    let w = model.shared()[0].weight();
    *store.value_mut(w) = Tensor::identity(5);
    let mut s = Session::new(&store);
    let xv = s.constant(x.clone());
    let yc = model.forward_shared(&mut s, xv, &seg).unwrap();
    assert!(s.graph.value(yc).max_abs_diff(&x.map(f64::tanh)) < 1e-15);

    // Two blocks against a nested-call oracle.
    spec.shared = vec![BlockSpec::new(BlockKind::Tanh, 6), BlockSpec::new(BlockKind::Relu, 5)];
    let (model, mut store) = build(&spec, 2);
    randomize_biases(&mut store, 2);
    let layer = |t: &Tensor, i: usize, f: fn(f64) -> f64| {
        let b = &model.shared()[i];
        let mut h = t.matmul(store.value(b.weight()));
        let bias = store.value(b.bias());
        for r in 0..h.rows() {
            for c in 0..h.cols() {
                h.set(r, c, f(h.get(r, c) + bias.get(0, c)));
            }
        }
        h
    };
    let oracle = layer(&layer(&x, 0, f64::tanh), 1, |v| v.max(0.0));
    let mut s = Session::new(&store);
    let xv = s.constant(x.clone());
    let yc = model.forward_shared(&mut s, xv, &seg).unwrap();
    assert!(s.graph.value(yc).max_abs_diff(&oracle) < 1e-12);

    let bad = s.constant(Tensor::zeros(seg.total_rows(), 4));
    assert!(model.forward_shared(&mut s, bad, &seg).is_err());
}

#[test]
fn amplifier_projection() {
    let (model, mut store) = build(&two_task_spec(Infusion::Fixed(1), false), 3);
    randomize_biases(&mut store, 3);
    let amp = &model.routes()[0].amplifier;
    let y = Tensor::uniform(8, 3, 1.0, &mut rng(4));

    let run = |store: &ParamStore| {
        let mut s = Session::new(store);
        let v = s.constant(y.clone());
        let out = amp.amplify(&mut s, v).unwrap();
        s.graph.value(out).clone()
    };
    let mut oracle = y.matmul(store.value(amp.projection.weight()));
    let b = store.value(amp.projection.bias()).clone();
    for r in 0..oracle.rows() {
        for c in 0..oracle.cols() {
            oracle.set(r, c, oracle.get(r, c) + b.get(0, c));
        }
    }
    assert!(run(&store).max_abs_diff(&oracle) < 1e-12);

    *store.value_mut(amp.projection.weight()) = Tensor::identity(3);
    store.value_mut(amp.projection.bias()).fill(0.0);
    assert_eq!(run(&store), y);

    zero(&mut store, &amp.projection.param_ids());
    assert!(run(&store).data().iter().all(|&v| v == 0.0));

    let mut s = Session::new(&store);
    let wrong = s.constant(Tensor::zeros(2, 4));
    assert!(amp.amplify(&mut s, wrong).is_err());
}

#[test]
fn forward_branch_hand_case_and_infusion_placement() {
    // y = c * y_c + d * y_hat for a single linear unit with identity head.
    let spec = ModelSpec {
        input_width: 1,
        shared: vec![],
        tasks: vec![
            TaskSpec {
                name: "a".into(),
                level: Level::Token,
                blocks: vec![BlockSpec::new(BlockKind::Linear, 1)],
                output: HeadOutput::Identity,
            },
            TaskSpec {
                name: "b".into(),
                level: Level::Token,
                blocks: vec![BlockSpec::new(BlockKind::Linear, 1)],
                output: HeadOutput::Identity,
            },
        ],
        routes: vec![RouteSpec { from: "b".into(), to: "a".into(), width: 1, position: Infusion::Fixed(1) }],
        gate: GateConfig::default(),
    };
    let (model, mut store) = build(&spec, 0);
    let block = &model.branches()[0].blocks[0];
    *store.value_mut(block.weight()) = Tensor::scalar(0.5);
    *store.value_mut(block.extra_weight(0).unwrap()) = Tensor::scalar(0.25);
    let mut s = Session::new(&store);
    let yc = s.constant(Tensor::scalar(1.0));
    let yh = s.constant(Tensor::scalar(2.0));
    let seg = Segments::single(1);
    let (_, y) = model.forward_branch(&mut s, 0, yc, &seg, &[vec![(0, yh)]]).unwrap();
    assert!((s.graph.value(y).item() - 1.0).abs() < 1e-15);

    // Out-of-range infusion list and unknown route slot are errors.
    assert!(model.forward_branch(&mut s, 0, yc, &seg, &[vec![], vec![]]).is_err());
    assert!(model.forward_branch(&mut s, 1, yc, &seg, &[vec![(0, yh)]]).is_err());

    // Gated routes register a slot at every block: compare placements.
    let (model, mut store) = build(&two_task_spec(Infusion::Gated, false), 9);
    randomize_biases(&mut store, 9);
    let (x, seg) = input(9);
    let mut s = Session::new(&store);
    let xv = s.constant(x);
    let signal = s.constant(Tensor::uniform(seg.total_rows(), 3, 1.0, &mut rng(10)));
    let (_, first) = model.forward_branch(&mut s, 0, xv, &seg, &[vec![(1, signal)], vec![]]).unwrap();
    let (_, last) = model.forward_branch(&mut s, 0, xv, &seg, &[vec![], vec![(1, signal)]]).unwrap();
    let (_, plain) = model.forward_branch(&mut s, 0, xv, &seg, &[]).unwrap();
    assert!(s.graph.value(first).max_abs_diff(s.graph.value(last)) > 1e-3);

    // A zero extra-slot weight makes any infusion invisible.
    let slot_block = &model.branches()[0].blocks[0];
    let mut zeroed = store.clone();
    zero(&mut zeroed, &[slot_block.extra_weight(1).unwrap()]);
    let mut s2 = Session::new(&zeroed);
    let xv2 = s2.constant(s.graph.value(xv).clone());
    let sig2 = s2.constant(s.graph.value(signal).clone());
    let (_, z) = model.forward_branch(&mut s2, 0, xv2, &seg, &[vec![(1, sig2)], vec![]]).unwrap();
    assert!(s2.graph.value(z).max_abs_diff(s.graph.value(plain)) < 1e-15);
}

#[test]
fn trace_length_is_k_plus_one() {
    let (x, seg) = input(0);
    for position in [Infusion::Fixed(2), Infusion::Gated] {
        let (mut model, store) = build(&two_task_spec(position, true), 0);
        for k in [1, 2, 4, 7] {
            let vals = trace_values(&mut model, &store, &x, &seg, &IterateOptions::new(k));
            for (t, tr) in vals.iter().enumerate() {
                assert_eq!(tr.len(), k + 1);
                let rows = if t == 0 { seg.total_rows() } else { seg.count() };
                assert!(tr.iter().all(|y| y.rows() == rows));
            }
        }
    }
    let (mut model, store) = build(&two_task_spec(Infusion::Fixed(1), false), 0);
    let mut s = Session::new(&store);
    let xv = s.constant(x);
    assert!(model.iterate(&mut s, xv, &seg, &IterateOptions::new(0), &mut rng(0)).is_err());
}

#[test]
fn zero_amplifiers_collapse_to_static() {
    let (x, seg) = input(4);
    for position in [Infusion::Fixed(1), Infusion::Gated] {
        let (mut model, mut store) = build(&two_task_spec(position, true), 4);
        randomize_biases(&mut store, 4);
        let amp_ids: Vec<_> = model.routes().iter().flat_map(|r| r.amplifier.projection.param_ids()).collect();
        zero(&mut store, &amp_ids);
        let vals = trace_values(&mut model, &store, &x, &seg, &IterateOptions::new(4).init(InitMode::Random));
        for tr in &vals {
            for y in &tr[2..] {
                assert_eq!(y, &tr[1]);
            }
        }

        zero(&mut store, &model.feedback_params());
        let vals = trace_values(&mut model, &store, &x, &seg, &IterateOptions::new(4));
        let stat = static_values(&model, &store, &x, &seg);
        for (tr, st) in vals.iter().zip(&stat) {
            for y in &tr[1..] {
                assert!(y.max_abs_diff(st) < 1e-12);
            }
        }
    }
}

#[test]
fn static_forward_equals_one_step_from_zeros() {
    for seed in 0..20 {
        let (x, seg) = input(seed);
        let position = if seed % 2 == 0 { Infusion::Gated } else { Infusion::Fixed(2) };
        let (mut model, mut store) = build(&two_task_spec(position, seed % 3 != 0), seed);
        randomize_biases(&mut store, seed);
        // Amplifier biases stay zero so that y^0 = 0 produces a zero signal.
        let amp_bias: Vec<_> = model.routes().iter().map(|r| r.amplifier.projection.bias()).collect();
        zero(&mut store, &amp_bias);
        let vals = trace_values(&mut model, &store, &x, &seg, &IterateOptions::new(1).init(InitMode::Zeros));
        let stat = static_values(&model, &store, &x, &seg);
        for (tr, st) in vals.iter().zip(&stat) {
            assert_eq!(tr.len(), 2);
            assert!(tr[1].max_abs_diff(st) < 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn removed_routes_match_zeroed_feedback() {
    let (x, seg) = input(6);
    let with = two_task_spec(Infusion::Fixed(2), true);
    let mut without = with.clone();
    without.routes.clear();
    let (mut a, mut sa) = build(&with, 6);
    let (mut b, sb) = build(&without, 6);
    zero(&mut sa, &a.feedback_params());
    let va = trace_values(&mut a, &sa, &x, &seg, &IterateOptions::new(3));
    let vb = trace_values(&mut b, &sb, &x, &seg, &IterateOptions::new(3));
    assert_eq!(va, vb);
}

#[test]
fn iterate_is_bitwise_deterministic() {
    let (x, seg) = input(8);
    let run = || {
        let (mut m, s) = build(&two_task_spec(Infusion::Gated, true), 8);
        trace_values(&mut m, &s, &x, &seg, &IterateOptions::new(4).init(InitMode::Random).stochastic(true))
    };
    assert_eq!(run(), run());
}

/// Scalar two-task linear system with identity heads:
/// `y1 = a*yc + b*y2_prev`, `y2 = c*yc + d*y1_prev`.
fn linear_system(a: f64, b: f64, c: f64, d: f64) -> (FeedbackModel, ParamStore) {
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
    let (model, mut store) = build(&spec, 0);
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
    (model, store)
}

#[test]
fn linear_system_reaches_closed_form_fixed_point() {
    let (a, b, c, d) = (1.0, 0.5, 1.0, 0.5);
    let (mut model, store) = linear_system(a, b, c, d);
    let x = Tensor::scalar(1.0);
    let seg = Segments::single(1);
    let vals = trace_values(&mut model, &store, &x, &seg, &IterateOptions::new(60).init(InitMode::Zeros));
    let y1_star = (a + b * c) / (1.0 - b * d);
    assert!((y1_star - 2.0).abs() < 1e-15);
    assert!((vals[0][60].item() - y1_star).abs() < 1e-6);
    assert!((vals[1][60].item() - (c + d * a) / (1.0 - b * d)).abs() < 1e-6);

    let res = residual_curve(&vals[0]);
    assert_eq!(res.len(), 60);
    assert!(res[59] < 1e-6);
    // Synchronous updates contract by sqrt(|bd|) per step and |bd| per two steps.
    for k in 1..20 {
        let two = res[k + 2] / res[k];
        assert!((two - b * d).abs() <= 0.1 * b * d, "k={k}: {two}");
        let one = res[k + 1] / res[k];
        assert!((one - (b * d).sqrt()).abs() <= 0.1 * (b * d).sqrt());
    }
}

#[test]
fn asymmetric_linear_system_two_step_ratio() {
    let (a, b, c, d) = (0.3, 0.8, -1.2, 0.6);
    let (mut model, store) = linear_system(a, b, c, d);
    let vals =
        trace_values(&mut model, &store, &Tensor::scalar(1.0), &Segments::single(1), &IterateOptions::new(80).init(InitMode::Zeros));
    assert!((vals[0][80].item() - (a + b * c) / (1.0 - b * d)).abs() < 1e-6);
    let res = residual_curve(&vals[0]);
    for k in 2..30 {
        let two = res[k + 2] / res[k];
        assert!((two - b * d).abs() <= 0.1 * b * d, "k={k}: {two}");
    }
}

fn task_loss_grads(k: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    let (mut model, mut store) = build(&two_task_spec(Infusion::Fixed(1), true), seed);
    randomize_biases(&mut store, seed);
    let (x, seg) = input(seed);
    let mut s = Session::new(&store);
    let xv = s.constant(x);
    let traces = model.iterate(&mut s, xv, &seg, &IterateOptions::new(k), &mut rng(0)).unwrap();
    let loss = s.graph.cross_entropy(traces[1].final_logits(), &[Some(0), Some(3), Some(1)]).unwrap();
    s.backward(loss).unwrap();
    let slot_grads = model.branch_params(0).iter().map(|&id| s.grad_of(id)).collect();
    let intent_grads = model.branch_params(1).iter().map(|&id| s.grad_of(id)).collect();
    (slot_grads, intent_grads)
}

#[test]
fn gradients_flow_through_feedback_only_when_k_exceeds_one() {
    for seed in 0..5 {
        let (slot, intent) = task_loss_grads(1, seed);
        assert!(slot.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(intent.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
        for k in [2, 4] {
            let (slot, _) = task_loss_grads(k, seed);
            let norm: f64 = slot.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
            assert!(norm > 1e-12, "seed {seed}, k {k}");
        }
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let (mut model, mut store) = build(&two_task_spec(Infusion::Fixed(1), true), seed);
        randomize_biases(&mut store, seed);
        let (x, seg) = input(seed);
        let opts = IterateOptions::new(4);
        let slot_t: Vec<Option<usize>> = (0..seg.total_rows()).map(|i| Some(i % 3)).collect();
        let mut loss_at = |store: &ParamStore, grads: bool| {
            let mut s = Session::new(store);
            let xv = s.constant(x.clone());
            let tr = model.iterate(&mut s, xv, &seg, &opts, &mut rng(0)).unwrap();
            let l1 = s.graph.cross_entropy(tr[0].final_logits(), &slot_t).unwrap();
            let l2 = s.graph.cross_entropy(tr[1].final_logits(), &[Some(2), None, Some(0)]).unwrap();
            let diff = s.graph.sub(tr[1].outputs[4], tr[1].outputs[3]).unwrap();
            let conv = s.graph.segment_norm(diff, &Segments::identity(3)).unwrap();
            let conv = s.graph.mean(conv, None);
            let a = s.graph.add(l1, l2).unwrap();
            let total = s.graph.add(a, conv).unwrap();
            let value = s.graph.value(total).item();
            if grads {
                s.backward(total).unwrap();
                (value, store.ids().map(|id| s.grad_of(id)).collect::<Vec<_>>())
            } else {
                (value, vec![])
            }
        };
        let (_, analytic) = loss_at(&store, true);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (p, ga) in analytic.iter().enumerate() {
            for j in 0..ga.len() {
                let mut plus = store.clone();
                plus.entries_mut()[p].value.data_mut()[j] += eps;
                let mut minus = store.clone();
                minus.entries_mut()[p].value.data_mut()[j] -= eps;
                let num = (loss_at(&plus, false).0 - loss_at(&minus, false).0) / (2.0 * eps);
                worst = worst.max((ga.data()[j] - num).abs() / num.abs().max(1.0));
            }
        }
        assert!(worst < 1e-5, "seed {seed}: {worst}");
    }
}

#[test]
fn fully_connected_topology_has_t_times_t_minus_one_amplifiers() {
    for t in 2..=5 {
        let tasks: Vec<TaskSpec> = (0..t).map(|i| task(&format!("t{i}"), Level::Token, &[4, 2])).collect();
        let routes = ModelSpec::fully_connected_routes(&tasks, 3, Infusion::Gated);
        let spec = ModelSpec { input_width: 2, shared: vec![], tasks, routes, gate: GateConfig::default() };
        let (model, _) = build(&spec, 0);
        assert_eq!(model.amplifier_count(), t * (t - 1));
    }
}

#[test]
fn invalid_topologies_are_rejected() {
    let mut spec = two_task_spec(Infusion::Fixed(3), false);
    assert!(FeedbackModel::new(&spec, &mut ParamStore::new(), &mut rng(0)).is_err());
    spec.routes[0].position = Infusion::Fixed(0);
    assert!(FeedbackModel::new(&spec, &mut ParamStore::new(), &mut rng(0)).is_err());
    let mut spec = two_task_spec(Infusion::Gated, false);
    spec.routes[0].to = "slot".into();
    assert!(FeedbackModel::new(&spec, &mut ParamStore::new(), &mut rng(0)).is_err());
}
