//! Evaluation quantities: intent accuracy, span F1, exact match, perplexity,
//! setting steps and per-iteration residual curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Segments, Tensor};

fn check_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::data(format!("{op}: {a} predictions but {b} references")));
    }
    Ok(())
}

pub fn intent_accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64> {
    check_len("intent_accuracy", pred.len(), gold.len())?;
    if gold.is_empty() {
        return Err(Error::data("intent_accuracy: empty input"));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// A labelled span `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Spans of an IBO sequence. A dangling `I-x` (after `O` or a span of
/// another type) opens a new span, as if it were `B-x`. Labels outside the
/// grammar count as `O`.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_ref();
        let (begin, kind) = if let Some(k) = l.strip_prefix("B-") {
            (true, Some(k))
        } else if let Some(k) = l.strip_prefix("I-") {
            (open.as_ref().map_or(true, |s| s.kind != k), Some(k))
        } else {
            (true, None)
        };
        if begin {
            spans.extend(open.take());
            open = kind.map(|k| Span { kind: k.to_string(), start: i, end: i + 1 });
        } else if let Some(s) = open.as_mut() {
            s.end = i + 1;
        }
    }
    spans.extend(open);
    spans
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Micro-averaged span precision, recall and F1. Spans must match in type
/// and both boundaries.
pub fn slot_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<Prf> {
    check_len("slot_f1", pred.len(), gold.len())?;
    let (mut matched, mut n_pred, mut n_gold) = (0, 0, 0);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::data(format!("slot_f1: example {i} has {} vs {} labels", p.len(), g.len())));
        }
        let ps = extract_spans(p);
        let gs = extract_spans(g);
        matched += ps.iter().filter(|s| gs.contains(s)).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    let precision = ratio(matched, n_pred);
    let recall = ratio(matched, n_gold);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Prf { precision, recall, f1 })
}

/// Fraction of utterances with the right intent and every slot label right.
pub fn exact_match_accuracy<T: PartialEq, S: PartialEq>(
    intent_pred: &[T],
    slot_pred: &[Vec<S>],
    intent_gold: &[T],
    slot_gold: &[Vec<S>],
) -> Result<f64> {
    let n = intent_gold.len();
    check_len("exact_match_accuracy", intent_pred.len(), n)?;
    check_len("exact_match_accuracy", slot_pred.len(), n)?;
    check_len("exact_match_accuracy", slot_gold.len(), n)?;
    if n == 0 {
        return Err(Error::data("exact_match_accuracy: empty input"));
    }
    let hits = (0..n)
        .filter(|&i| intent_pred[i] == intent_gold[i] && slot_pred[i] == slot_gold[i])
        .count();
    Ok(hits as f64 / n as f64)
}

/// Running sum of next-token negative log-likelihoods.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PerplexityAccumulator {
    pub nll: f64,
    pub count: usize,
}

impl PerplexityAccumulator {
    /// Adds rows of normalized log-distributions; masked rows and rows
    /// without a target are skipped.
    pub fn add(&mut self, log_probs: &Tensor, targets: &[Option<usize>], mask: &[bool]) -> Result<()> {
        check_len("perplexity", log_probs.rows(), targets.len())?;
        check_len("perplexity", mask.len(), targets.len())?;
        for (r, (t, &m)) in targets.iter().zip(mask).enumerate() {
            if let (Some(t), true) = (t, m) {
                if *t >= log_probs.cols() {
                    return Err(Error::Index { op: "perplexity", index: *t, bound: log_probs.cols() });
                }
                self.nll -= log_probs.get(r, *t);
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn perplexity(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::data("perplexity: no unmasked positions"));
        }
        Ok((self.nll / self.count as f64).exp())
    }
}

pub fn perplexity(log_probs: &Tensor, targets: &[Option<usize>], mask: &[bool]) -> Result<f64> {
    let mut acc = PerplexityAccumulator::default();
    acc.add(log_probs, targets, mask)?;
    acc.perplexity()
}

/// Smallest step from which every later value stays within `range_pct`
/// percent of the final value.
pub fn setting_steps(curve: &[(u64, f64)], range_pct: f64) -> Result<u64> {
    let (last_step, last) = *curve.last().ok_or_else(|| Error::data("setting_steps: empty curve"))?;
    if !(range_pct > 0.0) {
        return Err(Error::config(format!("setting_steps: range must be positive, got {range_pct}")));
    }
    let band = last.abs() * range_pct / 100.0;
    let mut step = last_step;
    for &(s, v) in curve.iter().rev() {
        if (v - last).abs() > band {
            break;
        }
        step = s;
    }
    Ok(step)
}

/// `||y^{k+1} - y^k||_F` for `k = 0..K-1` over whole trace values.
pub fn residual_curve(outputs: &[Tensor]) -> Vec<f64> {
    outputs
        .windows(2)
        .map(|w| w[1].data().iter().zip(w[0].data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect()
}

/// Per-example residual curve, summed over the row groups; divide by the
/// group count for the mean.
pub fn residual_curve_sum(outputs: &[Tensor], segments: &Segments) -> Vec<f64> {
    outputs
        .windows(2)
        .map(|w| {
            let cols = w[0].cols();
            segments
                .iter()
                .map(|r| {
                    let lo = r.start * cols;
                    let hi = r.end * cols;
                    w[1].data()[lo..hi]
                        .iter()
                        .zip(&w[0].data()[lo..hi])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum()
        })
        .collect()
}

/// Parses a `"828/1732"`-style pair of setting steps.
pub fn parse_step_pair(s: &str) -> Result<(u64, u64)> {
    let (a, b) = s
        .split_once('/')
        .ok_or_else(|| Error::data(format!("expected <steps>/<steps>, got {s:?}")))?;
    let parse = |x: &str| {
        x.trim()
            .parse::<u64>()
            .map_err(|_| Error::data(format!("bad step count {x:?} in {s:?}")))
    };
    Ok((parse(a)?, parse(b)?))
}

/// Evaluation summary. Fractions lie in [0, 1].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intent_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    /// Mean per-example residual curve of each task, length `K`.
    #[serde(default)]
    pub residual_curves: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub setting_steps: BTreeMap<String, u64>,
    /// Which curve the setting steps were measured on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting_steps_source: Option<String>,
}

impl MetricsReport {
    /// Metric by its report key (`intent_acc`, `slot_f1`, `ema`, `ppl`, ...).
    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "intent_acc" => self.intent_acc,
            "slot_p" => self.slot_p,
            "slot_r" => self.slot_r,
            "slot_f1" => self.slot_f1,
            "ema" => self.ema,
            "ppl" => self.ppl,
            _ => None,
        }
    }

    /// Mean over tasks of the last residual `||y^K - y^{K-1}||`.
    pub fn final_residual(&self) -> Option<f64> {
        let last: Vec<f64> = self.residual_curves.values().filter_map(|c| c.last().copied()).collect();
        (!last.is_empty()).then(|| last.iter().sum::<f64>() / last.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::data(format!("bad metrics report: {e}")))
    }
}
