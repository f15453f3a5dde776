//! Gumbel-max selection of the feedback infusion position.
//!
//! In the forward pass a route's gate emits the one-hot vector of the
//! position maximizing `logit_t + G_t` with i.i.d. standard Gumbel noise
//! `G`. In the backward pass the gradient is taken through
//! `softmax((logit + G) / tau)` evaluated with the same draw
//! (straight-through pairing).
//!
//! Two logit sources are supported:
//!
//! * [`GateMode::Verbatim`]: every position gets the scalar `||y~||_inf`.
//!   Since the scalar is shared by all positions, the selection is uniform
//!   and the soft weights carry no gradient back to `y~`.
//! * [`GateMode::LearnedLogits`]: a trainable vector `z` with one logit per
//!   candidate position.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore, Session};
use crate::tensor::{Axis, Segments, Tensor, Var};

const U_MIN: f64 = 1e-12;
const U_MAX: f64 = 1.0 - 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    Verbatim,
    #[serde(alias = "learned")]
    LearnedLogits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateInit {
    Zeros,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub mode: GateMode,
    pub temperature: f64,
    pub init: GateInit,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { mode: GateMode::LearnedLogits, temperature: 1.0, init: GateInit::Zeros }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "gate.temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Standard Gumbel sample from a uniform draw: `-ln(-ln u)`, `u` clamped
/// into `[1e-12, 1 - 1e-12]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_MIN, U_MAX);
    -(-u.ln()).ln()
}

/// `m` i.i.d. standard Gumbel samples.
pub fn sample_gumbel<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    (0..m).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-route gate over `candidates` infusion positions.
#[derive(Clone, Debug)]
pub struct GateState {
    pub route: usize,
    pub candidates: usize,
    pub mode: GateMode,
    pub temperature: f64,
    logits: Option<ParamId>,
    last_draw: Option<Tensor>,
    last_selection: Vec<usize>,
    last_soft: Option<Tensor>,
    histogram: Vec<u64>,
}

impl GateState {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        route: usize,
        candidates: usize,
        config: &GateConfig,
    ) -> Result<Self> {
        if candidates == 0 {
            return Err(Error::config("gate needs at least one candidate position"));
        }
        config.validate()?;
        let logits = match config.mode {
            GateMode::Verbatim => None,
            GateMode::LearnedLogits => {
                let z = match config.init {
                    GateInit::Zeros => Tensor::zeros(1, candidates),
                    GateInit::Random => Tensor::uniform(1, candidates, 0.1, rng),
                };
                Some(store.add(format!("gate{route}.z"), z)?)
            }
        };
        Ok(GateState {
            route,
            candidates,
            mode: config.mode,
            temperature: config.temperature,
            logits,
            last_draw: None,
            last_selection: Vec::new(),
            last_soft: None,
            histogram: vec![0; candidates],
        })
    }

    pub fn logits_param(&self) -> Option<ParamId> {
        self.logits
    }

    pub fn last_draw(&self) -> Option<&Tensor> {
        self.last_draw.as_ref()
    }

    /// Selected positions (0-based) of the last call, one per example.
    pub fn last_selection(&self) -> &[usize] {
        &self.last_selection
    }

    pub fn last_soft(&self) -> Option<&Tensor> {
        self.last_soft.as_ref()
    }

    pub fn histogram(&self) -> &[u64] {
        &self.histogram
    }

    pub fn reset_histogram(&mut self) {
        self.histogram.iter_mut().for_each(|h| *h = 0);
    }

    fn base_logits(&self, s: &Session, y_tilde: &Tensor, segments: &Segments) -> Vec<Vec<f64>> {
        match self.mode {
            GateMode::Verbatim => {
                let c = y_tilde.cols();
                segments
                    .iter()
                    .map(|r| {
                        let m = y_tilde.data()[r.start * c..r.end * c]
                            .iter()
                            .fold(0.0f64, |a, v| a.max(v.abs()));
                        vec![m; self.candidates]
                    })
                    .collect()
            }
            GateMode::LearnedLogits => {
                let z = s.store().value(self.logits.expect("learned gate logits")).data().to_vec();
                vec![z; segments.count()]
            }
        }
    }

    /// Forward gate: draws fresh noise (or none when `rng` is `None`),
    /// selects one position per example and returns the `groups x m` gate
    /// matrix whose value is exactly one-hot and whose gradient is that of
    /// [`GateState::backward_weights`].
    pub fn select(
        &mut self,
        s: &mut Session,
        y_tilde: Var,
        segments: &Segments,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let (rows, cols) = s.graph.shape(y_tilde);
        if rows != segments.total_rows() {
            return Err(Error::shape("gate_select", (rows, cols), (segments.total_rows(), cols)));
        }
        let groups = segments.count();
        let m = self.candidates;
        let draw = match rng {
            Some(rng) => {
                let data = (0..groups).flat_map(|_| sample_gumbel(m, rng)).collect();
                Tensor::new(groups, m, data)
            }
            None => Tensor::zeros(groups, m),
        };
        let base = self.base_logits(s, s.graph.value(y_tilde), segments);
        let mut hard = Tensor::zeros(groups, m);
        self.last_selection.clear();
        for (g, b) in base.iter().enumerate() {
            let perturbed: Vec<f64> = b.iter().zip(draw.row_slice(g)).map(|(x, n)| x + n).collect();
            let t = argmax(&perturbed);
            hard.set(g, t, 1.0);
            self.histogram[t] += 1;
            self.last_selection.push(t);
        }
        self.last_draw = Some(draw);
        let soft = self.backward_weights(s, y_tilde, segments)?;
        s.graph.straight_through(hard, soft)
    }

    /// Backward surrogate `softmax((logits + G) / tau)` with the draw stored
    /// by the last [`GateState::select`].
    pub fn backward_weights(&mut self, s: &mut Session, y_tilde: Var, segments: &Segments) -> Result<Var> {
        let draw = self
            .last_draw
            .clone()
            .ok_or_else(|| Error::GateState("backward weights requested before a selection".into()))?;
        if draw.rows() != segments.count() {
            return Err(Error::GateState(format!(
                "stored draw covers {} examples, got {}",
                draw.rows(),
                segments.count()
            )));
        }
        let noise = s.constant(draw);
        let logits = match self.mode {
            GateMode::Verbatim => {
                let ymax = s.graph.segment_max_abs(y_tilde, segments)?;
                s.graph.add_col(noise, ymax)?
            }
            GateMode::LearnedLogits => {
                let z = s.param(self.logits.expect("learned gate logits"));
                s.graph.add_row(noise, z)?
            }
        };
        let scaled = s.graph.scale(logits, 1.0 / self.temperature);
        let soft = s.graph.softmax(scaled, Axis::Cols);
        self.last_soft = Some(s.graph.value(soft).clone());
        Ok(soft)
    }
}

/// Feedback signal for candidate position `t` (1-based): column `t` of the
/// gate matrix scales `y_tilde`. When `y_tilde` is token-level, pass the
/// token segments so each example's weight covers all of its rows.
pub fn infuse_gated(
    s: &mut Session,
    gamma: Var,
    y_tilde: Var,
    t: usize,
    token_segments: Option<&Segments>,
) -> Result<Var> {
    let m = s.graph.shape(gamma).1;
    if t == 0 || t > m {
        return Err(Error::Index { op: "infuse_gated", index: t, bound: m });
    }
    let mut col = s.graph.column(gamma, t - 1)?;
    if let Some(seg) = token_segments {
        col = s.graph.broadcast(col, seg)?;
    }
    s.graph.mul_col(y_tilde, col)
}
