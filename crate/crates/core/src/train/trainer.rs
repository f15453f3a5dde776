use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Snapshot};
use super::config::{DataConfig, RunConfig};
use super::log::{RunLog, RunSummary, StepRecord};
use super::optim::{clip_grad_norm, Optimizer};
use super::slu::SluModel;
use crate::data::{batch, build_vocab, gen_synthetic, load_atis_format, Batch, LoadOptions, TaskKind, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::loss::{convergence_loss, task_loss, LossWeighting};
use crate::metrics::{
    exact_match_accuracy, intent_accuracy, residual_curve_sum, setting_steps, slot_f1, MetricsReport,
    PerplexityAccumulator,
};
use crate::model::{IterateOptions, ParamStore, Session};
use crate::tensor::Tensor;

/// Stream for `y^0` draws during evaluation, fixed so reports repeat.
const EVAL_SEED: u64 = 0xe7a1;
const EVAL_BATCH: usize = 128;
/// Band for setting steps, in percent of the final value.
pub const SETTING_RANGE_PCT: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn new(train: Vec<Utterance>, test: Vec<Utterance>, min_freq: usize) -> Result<Self> {
        let vocab = build_vocab(&train, min_freq)?;
        Ok(Dataset { train, test, vocab })
    }

    /// Holds out the tail `fraction` of the training set as the test set.
    pub fn validation_split(&self, fraction: f64) -> Result<Dataset> {
        let n_valid = ((self.train.len() as f64) * fraction).round() as usize;
        if n_valid == 0 || n_valid >= self.train.len() {
            return Err(Error::data(format!(
                "validation fraction {fraction} leaves no train or validation data"
            )));
        }
        let cut = self.train.len() - n_valid;
        Ok(Dataset { train: self.train[..cut].to_vec(), test: self.train[cut..].to_vec(), vocab: self.vocab.clone() })
    }
}

pub fn prepare_data(cfg: &DataConfig) -> Result<Dataset> {
    let load = |p: &Path| -> Result<Vec<Utterance>> {
        let report = load_atis_format(p, &LoadOptions { repair_ibo: cfg.repair_ibo })?;
        for e in &report.errors {
            warn!("{}:{}: skipped: {}", p.display(), e.line, e.reason);
        }
        if report.utterances.is_empty() {
            return Err(Error::data(format!("{} has no usable lines", p.display())));
        }
        Ok(report.utterances)
    };
    let (train, test) = match (&cfg.train, &cfg.synthetic) {
        (Some(path), _) => {
            let train = load(path)?;
            let test = match &cfg.test {
                Some(t) => load(t)?,
                None => return Err(Error::config("data.train given without data.test")),
            };
            (train, test)
        }
        (None, Some(spec)) => {
            let train = gen_synthetic(spec)?;
            let test_spec = crate::data::SyntheticSpec {
                count: cfg.test_count,
                seed: spec.seed.wrapping_add(1),
                ..spec.clone()
            };
            (train, gen_synthetic(&test_spec)?)
        }
        (None, None) => return Err(Error::config("no data source configured")),
    };
    Dataset::new(train, test, cfg.min_freq)
}

/// A model with its parameters and the settings it was trained under.
#[derive(Clone, Debug)]
pub struct Trained {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: SluModel,
    pub store: ParamStore,
}

impl Trained {
    /// Fresh parameters for `config` drawn from `seed`.
    pub fn init(config: &RunConfig, vocab: &Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = SluModel::new(&config.model, &config.gate, vocab, &mut store, &mut rng)?;
        Ok(Trained { config: config.clone(), vocab: vocab.clone(), model, store })
    }

    pub fn iterate_options(&self, stochastic: bool) -> IterateOptions {
        IterateOptions::new(self.config.k).init(self.config.init).feedback(true).stochastic(stochastic)
    }

    /// Writes `config.toml`, the vocabularies and a checkpoint into `dir`.
    pub fn save(&self, dir: &Path, checkpoint_name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        self.vocab.save(dir)?;
        checkpoint::save(&self.store, dir.join(checkpoint_name))
    }

    /// Rebuilds the model described by `dir/config.toml` and loads a
    /// checkpoint into it.
    pub fn load(dir: &Path, checkpoint_name: &str) -> Result<Self> {
        let config = RunConfig::load(dir.join("config.toml"))?;
        let vocab = Vocab::load(dir)?;
        let mut t = Trained::init(&config, &vocab, 0)?;
        checkpoint::load(&mut t.store, dir.join(checkpoint_name))?;
        Ok(t)
    }

    /// Like [`Trained::load`] but with the topology of `config`, which must
    /// match the checkpoint.
    pub fn load_with_config(dir: &Path, checkpoint_name: &str, config: &RunConfig) -> Result<Self> {
        let vocab = Vocab::load(dir)?;
        let mut t = Trained::init(config, &vocab, 0)?;
        checkpoint::load(&mut t.store, dir.join(checkpoint_name))?;
        Ok(t)
    }
}

/// Per-example predictions of an evaluation pass.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub intents: Vec<String>,
    pub slots: Vec<Vec<String>>,
}

/// Noise-free evaluation with the configured `K`.
pub fn evaluate(trained: &mut Trained, data: &[Utterance]) -> Result<MetricsReport> {
    evaluate_with_predictions(trained, data).map(|(r, _)| r)
}

pub fn evaluate_with_predictions(trained: &mut Trained, data: &[Utterance]) -> Result<(MetricsReport, Predictions)> {
    if data.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let opts = trained.iterate_options(false);
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let tasks = trained.model.tasks.clone();
    let mut preds = Predictions::default();
    let mut ppl = PerplexityAccumulator::default();
    let mut residual_sums: Vec<Vec<f64>> = vec![vec![0.0; opts.steps]; tasks.len()];

    for b in batch(data, EVAL_BATCH, &trained.vocab, None) {
        let mut s = Session::new(&trained.store);
        let traces = trained.model.forward(&mut s, &b, &opts, &mut rng)?;
        for (t, tr) in traces.iter().enumerate() {
            let values: Vec<Tensor> = tr.outputs.iter().map(|&v| s.graph.value(v).clone()).collect();
            let curve = residual_curve_sum(&values, &trained.model.output_segments(t, &b));
            residual_sums[t].iter_mut().zip(curve).for_each(|(a, c)| *a += c);
            let out = s.graph.value(tr.final_output());
            match tasks[t] {
                TaskKind::Intent => {
                    for r in 0..out.rows() {
                        let id = crate::gate::argmax(out.row_slice(r));
                        preds.intents.push(trained.vocab.intents.label(id).to_string());
                    }
                }
                TaskKind::Slot => {
                    let mut row = 0;
                    for &len in &b.lengths {
                        let labels = (row..row + len)
                            .map(|r| trained.vocab.slots.label(crate::gate::argmax(out.row_slice(r))).to_string())
                            .collect();
                        preds.slots.push(labels);
                        row += len;
                    }
                }
                TaskKind::NextWord => {
                    let logp = log_softmax(s.graph.value(tr.final_logits()));
                    let targets = b.flat_next_word_ids();
                    ppl.add(&logp, &targets, &vec![true; targets.len()])?;
                }
            }
        }
    }

    let mut report = MetricsReport::default();
    let gold_intents: Vec<String> = data.iter().map(|u| u.intent.clone()).collect();
    let gold_slots: Vec<Vec<String>> = data.iter().map(|u| u.slots.clone()).collect();
    if tasks.contains(&TaskKind::Intent) {
        report.intent_acc = Some(intent_accuracy(&preds.intents, &gold_intents)?);
    }
    if tasks.contains(&TaskKind::Slot) {
        let prf = slot_f1(&preds.slots, &gold_slots)?;
        report.slot_p = Some(prf.precision);
        report.slot_r = Some(prf.recall);
        report.slot_f1 = Some(prf.f1);
    }
    if tasks.contains(&TaskKind::Intent) && tasks.contains(&TaskKind::Slot) {
        report.ema = Some(exact_match_accuracy(&preds.intents, &preds.slots, &gold_intents, &gold_slots)?);
    }
    if tasks.contains(&TaskKind::NextWord) {
        report.ppl = Some(ppl.perplexity()?);
    }
    for (t, sums) in residual_sums.into_iter().enumerate() {
        let n = data.len() as f64;
        report.residual_curves.insert(tasks[t].name().to_string(), sums.into_iter().map(|v| v / n).collect());
    }
    Ok((report, preds))
}

pub fn log_softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Score used to pick the best checkpoint: EMA when both intent and slots
/// are predicted, otherwise the available accuracy, F1 or negative PPL.
pub fn selection_score(r: &MetricsReport) -> f64 {
    r.ema
        .or(r.intent_acc)
        .or(r.slot_f1)
        .or(r.ppl.map(|p| -p))
        .unwrap_or(f64::NEG_INFINITY)
}

pub struct TrainOutcome {
    pub trained: Trained,
    pub log: RunLog,
    /// Evaluation of the final parameters on the test set.
    pub report: MetricsReport,
    pub best: Option<(usize, Snapshot)>,
}

/// Minibatch training of one `(config, seed)` cell, evaluated on
/// `data.test` every `eval_every` steps and at the end.
pub fn train(config: &RunConfig, seed: u64, data: &Dataset) -> Result<TrainOutcome> {
    train_inner(config, seed, data, None)
}

/// [`train`] writing the log, metrics, vocabularies and `final.ckpt` /
/// `best.ckpt` into `out`. A diverged run still writes its log.
pub fn train_to_dir(config: &RunConfig, seed: u64, data: &Dataset, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let outcome = train_inner(config, seed, data, Some(out))?;
    outcome.trained.save(out, "final.ckpt")?;
    if let Some((_, snap)) = &outcome.best {
        let mut best = outcome.trained.clone();
        checkpoint::restore(&mut best.store, snap)?;
        checkpoint::save(&best.store, out.join("best.ckpt"))?;
    }
    fs::write(out.join("metrics.json"), outcome.report.to_json())?;
    outcome.log.write_jsonl(out.join("log.jsonl"))?;
    Ok(outcome)
}

fn train_inner(config: &RunConfig, seed: u64, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let started = Instant::now();
    let mut trained = Trained::init(config, &data.vocab, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let task_names: Vec<String> = trained.model.tasks.iter().map(|t| t.name().to_string()).collect();
    let mut weighting = LossWeighting::new(config.loss.clone(), &task_names)?;
    let mut optimizer = Optimizer::from_config(&config.optimizer);
    let mut log = RunLog::new(config.hash(), seed);
    let opts = trained.iterate_options(true);
    let mut best: Option<(usize, f64, Snapshot)> = None;
    let mut step = 0;

    for epoch in 0..config.optimizer.epochs {
        let shuffle = seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        for b in batch(&data.train, config.optimizer.batch_size, &data.vocab, Some(shuffle)) {
            step += 1;
            let record = match train_step(&mut trained, &mut weighting, &b, &opts, &mut rng, step, epoch) {
                Ok(r) => r,
                Err(e @ Error::Divergence { .. }) => {
                    log.summary = Some(RunSummary {
                        steps: step,
                        wall_clock_secs: started.elapsed().as_secs_f64(),
                        best_step: best.as_ref().map(|b| b.0),
                        final_eval: MetricsReport::default(),
                        diverged: Some(e.to_string()),
                    });
                    if let Some(dir) = out {
                        log.write_jsonl(dir.join("log.jsonl"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            clip_grad_norm(&mut trained.store, config.optimizer.clip_norm);
            optimizer.step(&mut trained.store);
            log.push(record)?;
            if step % config.eval_every == 0 {
                eval_into_log(&mut trained, data, &mut log, &mut best, step)?;
            }
        }
    }
    if step % config.eval_every != 0 {
        eval_into_log(&mut trained, data, &mut log, &mut best, step)?;
    }

    let mut report = log.records.last().and_then(|r| r.eval.clone()).expect("final step is evaluated");
    for key in ["intent_acc", "slot_f1", "ema", "ppl"] {
        let curve = log.eval_curve(key);
        if !curve.is_empty() {
            report.setting_steps.insert(key.to_string(), setting_steps(&curve, SETTING_RANGE_PCT)?);
        }
    }
    report.setting_steps_source = Some("eval".into());
    let wall = started.elapsed().as_secs_f64();
    info!("seed {seed}: {step} steps in {wall:.1}s, final {}", report_line(&report));
    log.summary = Some(RunSummary {
        steps: step,
        wall_clock_secs: wall,
        best_step: best.as_ref().map(|b| b.0),
        final_eval: report.clone(),
        diverged: None,
    });
    Ok(TrainOutcome { trained, log, report, best: best.map(|(s, _, snap)| (s, snap)) })
}

fn train_step(
    trained: &mut Trained,
    weighting: &mut LossWeighting,
    b: &Batch,
    opts: &IterateOptions,
    rng: &mut ChaCha8Rng,
    step: usize,
    epoch: usize,
) -> Result<StepRecord> {
    let beta = weighting.config().beta;
    let mut s = Session::new(&trained.store);
    let traces = trained.model.forward(&mut s, b, opts, rng)?;
    let mut task_losses = Vec::with_capacity(traces.len());
    let mut conv_losses = Vec::with_capacity(traces.len());
    for (t, tr) in traces.iter().enumerate() {
        let targets = trained.model.targets(t, b);
        task_losses.push(task_loss(&mut s.graph, trained.model.tasks[t], tr, &targets)?);
        let segments = trained.model.output_segments(t, b);
        conv_losses.push(convergence_loss(&mut s.graph, &tr.outputs, beta, &segments)?);
    }
    let total = weighting.combine(&mut s.graph, &task_losses, &conv_losses)?;
    let total_value = s.graph.value(total).item();
    let named = |vars: &[_]| -> BTreeMap<String, f64> {
        trained
            .model
            .tasks
            .iter()
            .zip(vars)
            .map(|(k, &v)| (k.name().to_string(), s.graph.value(v).item()))
            .collect()
    };
    let losses = named(&task_losses);
    let conv = named(&conv_losses);
    if !total_value.is_finite() {
        return Err(Error::Divergence { step, detail: format!("total loss {total_value}, task losses {losses:?}") });
    }
    s.backward(total)?;
    let grads = s.gradients();
    drop(s);
    trained.store.zero_grad();
    trained.store.accumulate(grads);
    if !trained.store.grad_norm().is_finite() {
        return Err(Error::Divergence { step, detail: "non-finite gradient".into() });
    }
    Ok(StepRecord { step, epoch, losses, conv, total: total_value, eval: None, gates: BTreeMap::new() })
}

fn eval_into_log(
    trained: &mut Trained,
    data: &Dataset,
    log: &mut RunLog,
    best: &mut Option<(usize, f64, Snapshot)>,
    step: usize,
) -> Result<()> {
    let names: Vec<&str> = trained.model.tasks.iter().map(|t| t.name()).collect();
    let mut gates = BTreeMap::new();
    for r in trained.model.net.routes() {
        if let Some(g) = &r.gate {
            gates.insert(format!("{}->{}", names[r.source], names[r.target]), g.histogram().to_vec());
        }
    }
    let report = evaluate(trained, &data.test)?;
    for r in trained.model.net.routes_mut() {
        if let Some(g) = r.gate.as_mut() {
            g.reset_histogram();
        }
    }
    let score = selection_score(&report);
    if best.as_ref().map_or(true, |b| score > b.1) {
        *best = Some((step, score, checkpoint::snapshot(&trained.store)));
    }
    let rec = log.last_mut().expect("a step precedes every evaluation");
    rec.eval = Some(report);
    rec.gates = gates;
    Ok(())
}

pub fn report_line(r: &MetricsReport) -> String {
    let mut parts = Vec::new();
    for key in ["intent_acc", "slot_f1", "ema", "ppl"] {
        if let Some(v) = r.get(key) {
            parts.push(format!("{key}={v:.4}"));
        }
    }
    if let Some(res) = r.final_residual() {
        parts.push(format!("residual={res:.3e}"));
    }
    parts.join(" ")
}
