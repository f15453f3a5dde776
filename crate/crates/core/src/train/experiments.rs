use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{Ablation, RunConfig, RouteConfig};
use super::trainer::{evaluate, selection_score, train, train_to_dir, Dataset, Trained};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Infusion;

/// Runs `jobs` on up to `workers` threads; results keep the input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every item ran")).collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub const REPORT_KEYS: [&str; 6] = ["slot_f1", "intent_acc", "ema", "ppl", "slot_p", "slot_r"];

/// Median over seeds of every metric present in all reports, plus the
/// final residual.
pub fn median_report(reports: &[MetricsReport]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for key in REPORT_KEYS {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(key)).collect();
        if !vals.is_empty() && vals.len() == reports.len() {
            out.insert(key.to_string(), median(&vals).expect("non-empty"));
        }
    }
    let res: Vec<f64> = reports.iter().filter_map(|r| r.final_residual()).collect();
    if !res.is_empty() && res.len() == reports.len() {
        out.insert("final_residual".into(), median(&res).expect("non-empty"));
    }
    out
}

/// One configuration trained under several seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<Option<MetricsReport>>,
    pub errors: Vec<String>,
    pub median: BTreeMap<String, f64>,
}

impl Cell {
    fn from_runs(name: String, seeds: &[u64], runs: Vec<Result<MetricsReport>>) -> Self {
        let mut errors = Vec::new();
        let reports: Vec<Option<MetricsReport>> = runs
            .into_iter()
            .zip(seeds)
            .map(|(r, s)| match r {
                Ok(r) => Some(r),
                Err(e) => {
                    warn!("{name} seed {s} failed: {e}");
                    errors.push(format!("seed {s}: {e}"));
                    None
                }
            })
            .collect();
        let ok: Vec<MetricsReport> = reports.iter().flatten().cloned().collect();
        Cell { name, seeds: seeds.to_vec(), median: median_report(&ok), reports, errors }
    }

    pub fn succeeded(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsTable {
    pub title: String,
    pub cells: Vec<Cell>,
}

impl ResultsTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::data(format!("bad results table: {e}")))
    }

    pub fn cell(&self, name: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.name == name)
    }

    /// Aligned text with Slot/F1, Intent/ACC and EMA columns (percent), and
    /// LM/PPL when any cell reports perplexity.
    pub fn to_text(&self) -> String {
        let with_ppl = self.cells.iter().any(|c| c.median.contains_key("ppl"));
        let mut cols = vec![("Slot/F1", "slot_f1", true), ("Intent/ACC", "intent_acc", true), ("EMA", "ema", true)];
        if with_ppl {
            cols.push(("LM/PPL", "ppl", false));
        }
        let name_w = self.cells.iter().map(|c| c.name.len()).max().unwrap_or(0).max("Method".len());
        let mut s = String::new();
        writeln!(s, "{}", self.title).unwrap();
        write!(s, "{:>2}  {:<name_w$}", "#", "Method").unwrap();
        for (h, _, _) in &cols {
            write!(s, "  {h:>10}").unwrap();
        }
        writeln!(s).unwrap();
        for (i, c) in self.cells.iter().enumerate() {
            write!(s, "{:>2}  {:<name_w$}", i + 1, c.name).unwrap();
            for (_, key, pct) in &cols {
                let cell = match c.median.get(*key) {
                    Some(v) if *pct => format!("{:.1}", v * 100.0),
                    Some(v) => format!("{v:.2}"),
                    None => "-".into(),
                };
                write!(s, "  {cell:>10}").unwrap();
            }
            if !c.succeeded() {
                write!(s, "  ({} failed)", c.errors.len()).unwrap();
            }
            writeln!(s).unwrap();
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }
}

/// Trains every `(config, seed)` pair; failures are kept per run.
pub fn run_cells(
    named: &[(String, RunConfig)],
    seeds: &[u64],
    data: &Dataset,
    out: Option<&Path>,
    workers: usize,
) -> Vec<Cell> {
    let jobs: Vec<(usize, u64)> = (0..named.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results = parallel_map(&jobs, workers, |&(c, seed)| {
        let (name, cfg) = &named[c];
        let started = Instant::now();
        let r = match out {
            Some(dir) => train_to_dir(cfg, seed, data, &dir.join(sanitize(name)).join(format!("seed{seed}"))),
            None => train(cfg, seed, data),
        }
        .map(|o| o.report);
        info!("{name} seed {seed}: {:.1}s", started.elapsed().as_secs_f64());
        r
    });
    let mut results = results.into_iter();
    named
        .iter()
        .map(|(name, _)| Cell::from_runs(name.clone(), seeds, results.by_ref().take(seeds.len()).collect()))
        .collect()
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// The ablation grid: one cell per flag, median over `seeds`. The
/// convergence-loss weight of CONV cells is the base config's weight.
pub fn ablate(
    base: &RunConfig,
    flags: &[Ablation],
    seeds: &[u64],
    data: &Dataset,
    out: Option<&Path>,
) -> Result<ResultsTable> {
    if flags.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one flag and one seed"));
    }
    let conv = if base.loss.conv_weight > 0.0 { base.loss.conv_weight } else { 0.1 };
    let mut named = Vec::new();
    let mut failed = Vec::new();
    for &f in flags {
        match base.with_ablation(f, conv) {
            Ok(c) => named.push((f.label().to_string(), c)),
            Err(e) => {
                let runs = seeds.iter().map(|_| Err(Error::Config(e.to_string()))).collect();
                failed.push(Cell::from_runs(f.label().to_string(), seeds, runs));
            }
        }
    }
    let mut cells = run_cells(&named, seeds, data, out, default_workers());
    cells.extend(failed);
    cells.sort_by_key(|c| flags.iter().position(|f| f.label() == c.name));
    let table = ResultsTable { title: "Ablation (median over seeds)".into(), cells };
    if let Some(dir) = out {
        table.write(dir, "ablation")?;
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "K")]
    K,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "conv_weight")]
    ConvWeight,
    #[serde(rename = "gate.temperature")]
    Temperature,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(SweepParam::K),
            "beta" | "loss.beta" => Ok(SweepParam::Beta),
            "conv_weight" | "loss.conv_weight" => Ok(SweepParam::ConvWeight),
            "gate.temperature" | "temperature" => Ok(SweepParam::Temperature),
            _ => Err(Error::config(format!("cannot sweep {s:?}; use K, beta, conv_weight or gate.temperature"))),
        }
    }
}

impl SweepParam {
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = base.clone();
        match self {
            SweepParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::config(format!("K must be a positive integer, got {value}")));
                }
                c.k = value as usize;
            }
            SweepParam::Beta => c.loss.beta = value,
            SweepParam::ConvWeight => c.loss.conv_weight = value,
            SweepParam::Temperature => c.gate.temperature = value,
        }
        // A swept value may leave the flag's semantics; the run then
        // carries no ablation label.
        if c.ablation.is_some() && c.validate().is_err() {
            c.ablation = None;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    /// Mean over tasks of `||y^K - y^{K-1}||` on the test set.
    pub final_residual: Option<f64>,
    /// Mean convergence loss over the last epoch's steps.
    pub final_conv_loss: Option<f64>,
    /// Seconds per test prediction with the trained model.
    pub secs_per_prediction: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub param: SweepParam,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>10}  {:>10}  {:>10}  {:>12}  {:>12}  {:>12}", "value", "intent_acc", "slot_f1", "residual", "conv_loss", "us/pred")
            .unwrap();
        for r in &self.rows {
            let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
            let rep = r.report.as_ref();
            writeln!(
                s,
                "{:>10}  {:>10}  {:>10}  {:>12}  {:>12}  {:>12}",
                r.value,
                f(rep.and_then(|r| r.intent_acc), 4),
                f(rep.and_then(|r| r.slot_f1), 4),
                r.final_residual.map_or("-".into(), |v| format!("{v:.3e}")),
                r.final_conv_loss.map_or("-".into(), |v| format!("{v:.3e}")),
                f(r.secs_per_prediction.map(|v| v * 1e6), 1),
            )
            .unwrap();
            if let Some(e) = &r.error {
                writeln!(s, "{:>10}  error: {e}", "").unwrap();
            }
        }
        s
    }
}

/// Mean seconds per example of a noise-free prediction pass over `data`.
pub fn time_predictions(trained: &mut Trained, data: &Dataset, repeats: usize) -> Result<f64> {
    let started = Instant::now();
    for _ in 0..repeats.max(1) {
        evaluate(trained, &data.test)?;
    }
    Ok(started.elapsed().as_secs_f64() / (repeats.max(1) * data.test.len()) as f64)
}

/// One training run per value of `param` under `seed`.
pub fn sweep(base: &RunConfig, param: SweepParam, values: &[f64], seed: u64, data: &Dataset, out: Option<&Path>) -> Result<SweepSummary> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let rows = values
        .iter()
        .map(|&v| {
            let run = param.apply(base, v).and_then(|cfg| {
                let mut o = match out {
                    Some(dir) => train_to_dir(&cfg, seed, data, &dir.join(format!("value_{v}")))?,
                    None => train(&cfg, seed, data)?,
                };
                let per = time_predictions(&mut o.trained, data, 1)?;
                let last_epoch = o.log.records.last().map_or(0, |r| r.epoch);
                let conv: Vec<f64> = o
                    .log
                    .records
                    .iter()
                    .filter(|r| r.epoch == last_epoch)
                    .map(|r| r.conv.values().sum::<f64>())
                    .collect();
                Ok((o.report, per, conv.iter().sum::<f64>() / conv.len().max(1) as f64))
            });
            match run {
                Ok((report, per, conv)) => SweepRow {
                    value: v,
                    final_residual: report.final_residual(),
                    report: Some(report),
                    error: None,
                    final_conv_loss: Some(conv),
                    secs_per_prediction: Some(per),
                },
                Err(e) => {
                    warn!("sweep value {v} failed: {e}");
                    SweepRow {
                        value: v,
                        report: None,
                        error: Some(e.to_string()),
                        final_residual: None,
                        final_conv_loss: None,
                        secs_per_prediction: None,
                    }
                }
            }
        })
        .collect();
    let summary = SweepSummary { param, seed, rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&summary).expect("serializable"))?;
        std::fs::write(dir.join("sweep.txt"), summary.to_text())?;
    }
    Ok(summary)
}

/// Grid search over fixed infusion positions `t in [1, m_j]` of every
/// route, scored by validation EMA (or the closest available metric) on
/// the tail of the training set. Returns the best position per route.
pub fn select_fixed_positions(base: &RunConfig, seed: u64, data: &Dataset, max_combinations: usize) -> Result<Vec<usize>> {
    let depths: Vec<usize> = base
        .model
        .routes
        .iter()
        .map(|r| base.model.depth(r.to).expect("validated route"))
        .collect();
    if depths.is_empty() {
        return Ok(Vec::new());
    }
    let total: usize = depths.iter().product();
    if total > max_combinations {
        return Err(Error::config(format!("{total} position combinations exceed the limit {max_combinations}")));
    }
    let split = data.validation_split(base.data.valid_fraction.max(0.05))?;
    let mut combos = vec![Vec::new()];
    for &d in &depths {
        combos = combos
            .into_iter()
            .flat_map(|c: Vec<usize>| (1..=d).map(move |t| [c.clone(), vec![t]].concat()))
            .collect();
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for combo in combos {
        let mut cfg = base.clone();
        cfg.ablation = None;
        for (r, &t) in cfg.model.routes.iter_mut().zip(&combo) {
            r.position = Infusion::Fixed(t);
            r.fixed_position = Some(t);
        }
        let score = selection_score(&train(&cfg, seed, &split)?.report);
        info!("positions {combo:?}: validation score {score:.4}");
        if best.as_ref().map_or(true, |b| score > b.0) {
            best = Some((score, combo));
        }
    }
    Ok(best.expect("at least one combination").1)
}

/// Feedback-route variants of a three-task model: no routes, each
/// token-or-sentence task feeding next-word prediction, and the same with
/// the reverse route added so the pair forms a loop.
pub fn route_grid(base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    for t in [TaskKind::Intent, TaskKind::Slot, TaskKind::NextWord] {
        if !base.model.has_task(t) {
            return Err(Error::config(format!("route grid needs the {} task", t.name())));
        }
    }
    let route = |from, to| RouteConfig { from, to, position: Infusion::Fixed(1), fixed_position: Some(1), width: None };
    let variants: [(&str, &[TaskKind]); 3] = [
        ("LI", &[TaskKind::Intent]),
        ("LS", &[TaskKind::Slot]),
        ("LS & LI", &[TaskKind::Slot, TaskKind::Intent]),
    ];
    let mut basic = base.clone();
    basic.model.routes.clear();
    basic.k = 1;
    basic.ablation = None;
    let mut out = vec![("BASIC".to_string(), basic)];
    for (name, sources) in variants {
        for feedback in [false, true] {
            let mut c = base.clone();
            c.ablation = None;
            c.model.routes = sources.iter().map(|&s| route(s, TaskKind::NextWord)).collect();
            if feedback {
                c.model.routes.extend(sources.iter().map(|&s| route(TaskKind::NextWord, s)));
            }
            c.k = c.k.max(2);
            c.validate()?;
            out.push((format!("{name} {}", if feedback { "w/ feedback" } else { "w/o feedback" }), c));
        }
    }
    Ok(out)
}
