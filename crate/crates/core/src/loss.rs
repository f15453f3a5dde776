//! Convergence loss over a prediction trace, supervised task losses, and the
//! weighted training objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::PredictionTrace;
use crate::tensor::{Graph, Segments, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Fixed,
    /// `w_i ∝ 1 / (EMA(|L_i|) + eps)`, normalized to sum to the task count.
    InverseMagnitude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Delay constant in (0, 1).
    pub beta: f64,
    /// Weight of the summed convergence losses.
    pub conv_weight: f64,
    pub weighting: Weighting,
    pub ema_decay: f64,
    pub epsilon: f64,
    /// Fixed per-task weights by task name; missing tasks weigh 1.
    pub task_weights: BTreeMap<String, f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.5,
            conv_weight: 0.1,
            weighting: Weighting::Fixed,
            ema_decay: 0.9,
            epsilon: 1e-8,
            task_weights: BTreeMap::new(),
        }
    }
}

impl LossConfig {
    pub fn new(beta: f64, conv_weight: f64) -> Result<Self> {
        let c = LossConfig { beta, conv_weight, ..LossConfig::default() };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(self.conv_weight >= 0.0 && self.conv_weight.is_finite()) {
            return Err(Error::config(format!("loss.conv_weight must be >= 0, got {}", self.conv_weight)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("loss.ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if self.epsilon < 0.0 {
            return Err(Error::config("loss.epsilon must be >= 0"));
        }
        if let Some((k, w)) = self.task_weights.iter().find(|(_, w)| !(**w >= 0.0)) {
            return Err(Error::config(format!("task weight for {k} must be >= 0, got {w}")));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("loss.beta must lie in (0, 1), got {beta}")))
    }
}

/// `sum_{k=1}^{K-1} beta^{K-k} ||y^{k+1} - y^k||_F` over trace entries
/// `y^0..y^K`, averaged over the row groups in `segments` (one group per
/// example). `y^0` does not enter; `K = 1` gives 0.
pub fn convergence_loss(g: &mut Graph, outputs: &[Var], beta: f64, segments: &Segments) -> Result<Var> {
    check_beta(beta)?;
    if outputs.is_empty() {
        return Err(Error::config("empty prediction trace"));
    }
    let k_max = outputs.len() - 1;
    let mut total: Option<Var> = None;
    for k in 1..k_max {
        let diff = g.sub(outputs[k + 1], outputs[k])?;
        let norms = g.segment_norm(diff, segments)?;
        let mean = g.mean(norms, None);
        let term = g.scale(mean, beta.powi((k_max - k) as i32));
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// Convergence loss of a trace holding a single prediction.
pub fn trace_convergence_loss(g: &mut Graph, trace: &PredictionTrace, beta: f64) -> Result<Var> {
    let rows = g.shape(trace.outputs[0]).0;
    convergence_loss(g, &trace.outputs, beta, &Segments::single(rows))
}

/// Cross-entropy of the final prediction `y^K` against per-row targets.
///
/// Intent rows are examples; slot and next-word rows are tokens, and the
/// result is the mean over all non-masked tokens.
pub fn task_loss(g: &mut Graph, kind: TaskKind, trace: &PredictionTrace, targets: &[Option<usize>]) -> Result<Var> {
    let logits = trace.final_logits();
    let rows = g.shape(logits).0;
    if rows != targets.len() {
        return Err(Error::data(format!(
            "{kind:?} loss: {rows} predictions but {} labels",
            targets.len()
        )));
    }
    g.cross_entropy(logits, targets)
}

/// Stateful task weighting for the combined objective.
#[derive(Clone, Debug)]
pub struct LossWeighting {
    config: LossConfig,
    fixed: Vec<f64>,
    ema: Vec<Option<f64>>,
}

impl LossWeighting {
    pub fn new(config: LossConfig, task_names: &[String]) -> Result<Self> {
        config.validate()?;
        let fixed = task_names
            .iter()
            .map(|n| config.task_weights.get(n).copied().unwrap_or(1.0))
            .collect();
        Ok(LossWeighting { config, fixed, ema: vec![None; task_names.len()] })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    /// Updates the running magnitudes with this step's task losses and
    /// returns the weights to use now.
    pub fn weights(&mut self, task_values: &[f64]) -> Result<Vec<f64>> {
        if task_values.len() != self.fixed.len() {
            return Err(Error::config(format!(
                "expected {} task losses, got {}",
                self.fixed.len(),
                task_values.len()
            )));
        }
        match self.config.weighting {
            Weighting::Fixed => Ok(self.fixed.clone()),
            Weighting::InverseMagnitude => {
                let d = self.config.ema_decay;
                for (e, v) in self.ema.iter_mut().zip(task_values) {
                    *e = Some(match *e {
                        None => v.abs(),
                        Some(prev) => d * prev + (1.0 - d) * v.abs(),
                    });
                }
                let inv: Vec<f64> =
                    self.ema.iter().map(|e| 1.0 / (e.unwrap() + self.config.epsilon)).collect();
                let z: f64 = inv.iter().sum();
                let n = inv.len() as f64;
                Ok(inv.iter().map(|w| w * n / z).collect())
            }
        }
    }

    /// `sum_i w_i L_task,i + conv_weight * sum_i L_conv,i`, weights held constant.
    pub fn combine(&mut self, g: &mut Graph, task_losses: &[Var], conv_losses: &[Var]) -> Result<Var> {
        if task_losses.is_empty() {
            return Err(Error::config("combined loss needs at least one task loss"));
        }
        let values: Vec<f64> = task_losses.iter().map(|&l| g.value(l).item()).collect();
        let weights = self.weights(&values)?;
        let mut total = g.scale(task_losses[0], weights[0]);
        for (&l, &w) in task_losses.iter().zip(&weights).skip(1) {
            let term = g.scale(l, w);
            total = g.add(total, term)?;
        }
        if self.config.conv_weight > 0.0 {
            for &c in conv_losses {
                let term = g.scale(c, self.config.conv_weight);
                total = g.add(total, term)?;
            }
        }
        Ok(total)
    }
}
