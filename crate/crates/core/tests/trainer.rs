use feedback_mtl::data::{batch, gen_synthetic, SyntheticSpec};
use feedback_mtl::gate::argmax;
use feedback_mtl::metrics::{intent_accuracy, slot_f1};
use feedback_mtl::model::{ParamStore, Session};
use feedback_mtl::tensor::Tensor;
use feedback_mtl::train::{
    ablate, evaluate, median, route_grid, sweep, train, train_to_dir, Ablation, Dataset, Optimizer, RunConfig,
    SweepParam, TaskConfig, Trained,
};
use feedback_mtl::data::TaskKind;
use feedback_mtl::Error;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.k = 3;
    c.optimizer.lr = 0.01;
    c.optimizer.epochs = 2;
    c.eval_every = 1000;
    c.data.synthetic = Some(SyntheticSpec { count: 200, ..SyntheticSpec::default() });
    c.data.test_count = 100;
    c
}

fn small_data(train: usize, test: usize) -> Dataset {
    let spec = SyntheticSpec { count: train, ..SyntheticSpec::default() };
    let test_spec = SyntheticSpec { count: test, seed: 99, ..SyntheticSpec::default() };
    Dataset::new(gen_synthetic(&spec).unwrap(), gen_synthetic(&test_spec).unwrap(), 1).unwrap()
}

#[test]
fn overfits_a_single_batch() {
    let train_set = gen_synthetic(&SyntheticSpec { count: 32, ..SyntheticSpec::default() }).unwrap();
    let data = Dataset::new(train_set.clone(), train_set, 1).unwrap();
    let mut c = small_config();
    c.k = 2;
    c.optimizer.epochs = 300;
    c.optimizer.batch_size = 32;
    c.loss.conv_weight = 0.0;
    let out = train(&c, 7, &data).unwrap();
    assert_eq!(out.log.records.len(), 300);
    let last = out.log.records.last().unwrap();
    for (task, loss) in &last.losses {
        assert!(*loss < 0.05, "{task} loss {loss} after 300 steps");
    }
    assert_eq!(out.report.intent_acc, Some(1.0));
    assert_eq!(out.report.slot_f1, Some(1.0));
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = small_data(120, 60);
    let c = small_config();
    let a = train(&c, 3, &data).unwrap();
    let b = train(&c, 3, &data).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.log.total_losses(), b.log.total_losses());
    for (x, y) in a.trained.store.entries().iter().zip(b.trained.store.entries()) {
        assert_eq!(x.value, y.value);
    }
    let other = train(&c, 4, &data).unwrap();
    assert_ne!(a.log.total_losses(), other.log.total_losses());
}

#[test]
fn evaluation_is_repeatable() {
    let data = small_data(120, 60);
    let mut out = train(&small_config(), 1, &data).unwrap();
    let first = evaluate(&mut out.trained, &data.test).unwrap();
    let second = evaluate(&mut out.trained, &data.test).unwrap();
    assert_eq!(first, second);
    assert!(evaluate(&mut out.trained, &[]).is_err());
}

#[test]
fn trivial_cell_matches_a_direct_static_pass() {
    let data = small_data(120, 60);
    let c = small_config().with_ablation(Ablation::Triv, 0.1).unwrap();
    assert_eq!(c.k, 1);
    let mut out = train(&c, 2, &data).unwrap();
    let report = evaluate(&mut out.trained, &data.test).unwrap();

    let t = &out.trained;
    let (mut intents, mut slots) = (Vec::new(), Vec::new());
    for b in batch(&data.test, 17, &t.vocab, None) {
        let mut s = Session::new(&t.store);
        let x = t.model.encode(&mut s, &b).unwrap();
        let outs = t.model.net.static_forward(&mut s, x, &b.segments()).unwrap();
        let intent_out = s.graph.value(outs[t.model.task_index(TaskKind::Intent).unwrap()].1);
        for r in 0..intent_out.rows() {
            intents.push(t.vocab.intents.label(argmax(intent_out.row_slice(r))).to_string());
        }
        let slot_out = s.graph.value(outs[t.model.task_index(TaskKind::Slot).unwrap()].1);
        let mut row = 0;
        for &len in &b.lengths {
            slots.push((row..row + len).map(|r| t.vocab.slots.label(argmax(slot_out.row_slice(r))).to_string()).collect());
            row += len;
        }
    }
    let gold_i: Vec<String> = data.test.iter().map(|u| u.intent.clone()).collect();
    let gold_s: Vec<Vec<String>> = data.test.iter().map(|u| u.slots.clone()).collect();
    assert_eq!(report.intent_acc, Some(intent_accuracy(&intents, &gold_i).unwrap()));
    assert_eq!(report.slot_f1, Some(slot_f1(&slots, &gold_s).unwrap().f1));
}

#[test]
fn report_carries_the_expected_keys() {
    let data = small_data(120, 60);
    let c = small_config();
    let out = train(&c, 1, &data).unwrap();
    let r = &out.report;
    for key in ["intent_acc", "slot_p", "slot_r", "slot_f1", "ema"] {
        let v = r.get(key).unwrap_or_else(|| panic!("missing {key}"));
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(r.ppl.is_none());
    for task in ["intent", "slot"] {
        assert_eq!(r.residual_curves[task].len(), c.k);
    }
    for key in ["intent_acc", "slot_f1", "ema"] {
        assert!(r.setting_steps.contains_key(key), "no setting steps for {key}");
    }
    assert!(r.final_residual().unwrap() >= 0.0);
}

#[test]
fn run_directory_round_trips() {
    let data = small_data(120, 60);
    let dir = tempfile::tempdir().unwrap();
    let mut out = train_to_dir(&small_config(), 1, &data, dir.path()).unwrap();
    for f in ["config.toml", "final.ckpt", "best.ckpt", "metrics.json", "log.jsonl", "words.vocab"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let mut loaded = Trained::load(dir.path(), "final.ckpt").unwrap();
    assert_eq!(evaluate(&mut loaded, &data.test).unwrap(), evaluate(&mut out.trained, &data.test).unwrap());

    let mut other = small_config();
    other.model.route_width = 5;
    let err = Trained::load_with_config(dir.path(), "final.ckpt", &other).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn sgd_on_a_quadratic() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(&[3.0, -2.0])).unwrap();
    let mut sgd = Optimizer::sgd(0.1);
    for _ in 0..50 {
        let mut s = Session::new(&store);
        let v = s.param(w);
        let sq = s.graph.mul(v, v).unwrap();
        let l = s.graph.sum(sq);
        s.backward(l).unwrap();
        let g = s.gradients();
        drop(s);
        store.zero_grad();
        store.accumulate(g);
        sgd.step(&mut store);
    }
    // Each step multiplies w by 1 - 2 * lr.
    let expect = 0.8f64.powi(50);
    assert!((store.value(w).data()[0] - 3.0 * expect).abs() < 1e-12);
    assert!((store.value(w).data()[1] + 2.0 * expect).abs() < 1e-12);
}

#[test]
fn ablation_flags_are_validated() {
    let mut c = small_config();
    c.ablation = Some(Ablation::Triv);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.k = 1;
    c.model.routes.clear();
    assert!(c.validate().is_ok());

    let base = small_config();
    assert!(base.with_ablation(Ablation::Iter, 0.1).unwrap().loss.conv_weight == 0.0);
    assert!(base.with_ablation(Ablation::Ful, 0.1).unwrap().loss.conv_weight == 0.1);
    let mut no_fixed = base.clone();
    no_fixed.model.routes[0].fixed_position = None;
    assert!(no_fixed.with_ablation(Ablation::Iter, 0.1).is_err());
    assert!(no_fixed.with_ablation(Ablation::Ful, 0.1).is_ok());
}

#[test]
fn sweeps() {
    let data = small_data(100, 200);
    let mut c = small_config();
    c.optimizer.epochs = 1;

    let ks = sweep(&c, SweepParam::K, &[1.0, 8.0], 1, &data, None).unwrap();
    let per: Vec<f64> = ks.rows.iter().map(|r| r.secs_per_prediction.unwrap()).collect();
    assert!(per[0] < per[1], "prediction time by K: {per:?}");

    let mut k1 = c.clone();
    k1.k = 1;
    let betas = sweep(&k1, SweepParam::Beta, &[0.2, 0.5, 0.9], 1, &data, None).unwrap();
    for r in &betas.rows {
        assert_eq!(r.final_conv_loss, Some(0.0), "beta {}", r.value);
    }

    let single = sweep(&c, SweepParam::K, &[3.0], 5, &data, None).unwrap();
    let direct = train(&c, 5, &data).unwrap();
    assert_eq!(single.rows[0].report.as_ref().unwrap(), &direct.report);

    let bad = sweep(&c, SweepParam::K, &[0.5], 1, &data, None).unwrap();
    assert!(bad.rows[0].error.is_some());
    assert!(sweep(&c, SweepParam::K, &[], 1, &data, None).is_err());
}

#[test]
fn ablation_table_cardinality_and_medians() {
    let data = small_data(100, 60);
    let mut c = small_config();
    c.optimizer.epochs = 1;
    let table = ablate(&c, &[Ablation::Triv, Ablation::Ful], &[1, 2, 3], &data, None).unwrap();
    assert_eq!(table.cells.len(), 2);
    for (cell, name) in table.cells.iter().zip(["TRIV", "FUL"]) {
        assert_eq!(cell.name, name);
        assert_eq!(cell.reports.len(), 3);
        assert!(cell.succeeded());
        let mut accs: Vec<f64> = cell.reports.iter().map(|r| r.as_ref().unwrap().intent_acc.unwrap()).collect();
        accs.sort_by(f64::total_cmp);
        assert_eq!(cell.median["intent_acc"], accs[1]);
        assert_eq!(median(&accs), Some(accs[1]));
    }
    // Each cell equals the corresponding single run.
    let ful = c.with_ablation(Ablation::Ful, c.loss.conv_weight).unwrap();
    assert_eq!(table.cell("FUL").unwrap().reports[1].as_ref().unwrap(), &train(&ful, 2, &data).unwrap().report);
}

#[test]
fn route_grid_rows() {
    let mut base = small_config();
    base.model.tasks.push(TaskConfig { kind: TaskKind::NextWord, blocks: vec![] });
    base.model.window = vec![-2, -1, 0];
    let grid = route_grid(&base).unwrap();
    assert_eq!(grid.len(), 7);
    assert_eq!(grid[0].0, "BASIC");
    assert_eq!(grid[0].1.k, 1);
    for (name, cfg) in &grid[1..] {
        let into_nwp = cfg.model.routes.iter().filter(|r| r.to == TaskKind::NextWord).count();
        let from_nwp = cfg.model.routes.iter().filter(|r| r.from == TaskKind::NextWord).count();
        assert!(into_nwp >= 1);
        assert_eq!(from_nwp > 0, name.ends_with("w/ feedback"), "{name}");
        assert_eq!(from_nwp, if from_nwp > 0 { into_nwp } else { 0 });
    }
    assert!(route_grid(&small_config()).is_err());
}
