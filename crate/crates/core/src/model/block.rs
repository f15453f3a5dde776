use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{Segments, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Affine map followed by tanh.
    Tanh,
    /// Affine map followed by ReLU.
    Relu,
    /// Elman cell run over each row group in order.
    Recurrent,
    /// Affine map only (task heads and amplifiers).
    Linear,
}

#[derive(Clone, Debug)]
struct ExtraInput {
    route: usize,
    width: usize,
    weight: ParamId,
}

/// One layer `f_i`, `g_i` or `h_j` of a feedback model.
///
/// A block that is an infusion candidate owns one extra weight matrix per
/// incoming route. Feeding a signal `s` through it is the same as
/// concatenating `[s, h]` and applying the stacked weight `[W_s; W]`.
#[derive(Clone, Debug)]
pub struct LayerBlock {
    pub name: String,
    pub kind: BlockKind,
    pub input_width: usize,
    pub output_width: usize,
    weight: ParamId,
    bias: ParamId,
    recurrent: Option<ParamId>,
    extra: Vec<ExtraInput>,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl LayerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: BlockKind,
        input_width: usize,
        output_width: usize,
    ) -> Result<Self> {
        if input_width == 0 || output_width == 0 {
            return Err(Error::config(format!("block {name} has a zero width")));
        }
        let bound = glorot(input_width, output_width);
        let weight = store.add(format!("{name}.w"), Tensor::uniform(input_width, output_width, bound, rng))?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(1, output_width))?;
        let recurrent = if kind == BlockKind::Recurrent {
            let b = 1.0 / (output_width as f64).sqrt();
            Some(store.add(format!("{name}.u"), Tensor::uniform(output_width, output_width, b, rng))?)
        } else {
            None
        };
        Ok(LayerBlock {
            name: name.to_string(),
            kind,
            input_width,
            output_width,
            weight,
            bias,
            recurrent,
            extra: Vec::new(),
        })
    }

    /// Registers an extra input slot for feedback arriving over `route`.
    pub fn add_extra_input<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rng: &mut R,
        route: usize,
        width: usize,
    ) -> Result<()> {
        if self.extra.iter().any(|e| e.route == route) {
            return Ok(());
        }
        let bound = glorot(width, self.output_width);
        let weight = store.add(
            format!("{}.fb{route}", self.name),
            Tensor::uniform(width, self.output_width, bound, rng),
        )?;
        self.extra.push(ExtraInput { route, width, weight });
        Ok(())
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn recurrent_weight(&self) -> Option<ParamId> {
        self.recurrent
    }

    pub fn extra_weight(&self, route: usize) -> Option<ParamId> {
        self.extra.iter().find(|e| e.route == route).map(|e| e.weight)
    }

    pub fn extra_width(&self, route: usize) -> Option<usize> {
        self.extra.iter().find(|e| e.route == route).map(|e| e.width)
    }

    /// Sum of all extra-input widths (the width of the concatenated feedback part).
    pub fn total_extra_width(&self) -> usize {
        self.extra.iter().map(|e| e.width).sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight, self.bias];
        ids.extend(self.recurrent);
        ids.extend(self.extra.iter().map(|e| e.weight));
        ids
    }

    /// Applies the block. `infusions` pairs a route index with its signal;
    /// `segments` is required by recurrent blocks.
    pub fn forward(
        &self,
        s: &mut Session,
        x: Var,
        segments: Option<&Segments>,
        infusions: &[(usize, Var)],
    ) -> Result<Var> {
        let (rows, width) = s.graph.shape(x);
        if width != self.input_width {
            return Err(Error::shape("block input", (rows, width), (rows, self.input_width)));
        }
        let w = s.param(self.weight);
        let mut pre = s.graph.matmul(x, w)?;
        for &(route, signal) in infusions {
            let slot = self.extra.iter().find(|e| e.route == route).ok_or_else(|| {
                Error::config(format!("block {} has no feedback slot for route {route}", self.name))
            })?;
            let ew = s.param(slot.weight);
            let contrib = s.graph.matmul(signal, ew)?;
            pre = s.graph.add(pre, contrib)?;
        }
        let b = s.param(self.bias);
        let pre = s.graph.add_row(pre, b)?;
        Ok(match self.kind {
            BlockKind::Tanh => s.graph.tanh(pre),
            BlockKind::Relu => s.graph.relu(pre),
            BlockKind::Linear => pre,
            BlockKind::Recurrent => {
                let seg = segments.ok_or_else(|| {
                    Error::config(format!("recurrent block {} needs row segments", self.name))
                })?;
                let u = s.param(self.recurrent.expect("recurrent weight"));
                s.graph.rnn_scan(pre, u, seg)?
            }
        })
    }
}
