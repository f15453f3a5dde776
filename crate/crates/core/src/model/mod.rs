//! The dynamic multi-task model: a shared stack, one branch per task, and
//! feedback routes that re-inject each task's prediction into a sibling
//! branch at every iteration step.

mod block;
mod feedback;
mod params;

pub use block::{BlockKind, LayerBlock};
pub use feedback::{
    Amplifier, Branch, FeedbackModel, InitMode, IterateOptions, PredictionTrace, Route,
};
pub use params::{ParamEntry, ParamId, ParamStore, Session};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateConfig;

/// Granularity of a task's predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    /// One prediction per example (row group).
    Sentence,
    /// One prediction per input row.
    Token,
}

/// What a branch head emits after its final affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadOutput {
    /// Probability vector over labels.
    #[default]
    Softmax,
    /// Raw affine output (used for linear analysis models).
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub width: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, width: usize) -> Self {
        BlockSpec { kind, width }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub level: Level,
    /// Branch blocks in order; the last one is the head and its width is the
    /// label count.
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub output: HeadOutput,
}

/// Where a route's feedback enters the target branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Infusion {
    /// Fixed 1-based block index of the target branch.
    Fixed(usize),
    /// Chosen per example and step by a Gumbel gate.
    Gated,
}

impl Serialize for Infusion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Infusion::Fixed(t) => s.serialize_u64(*t as u64),
            Infusion::Gated => s.serialize_str("gated"),
        }
    }
}

impl<'de> Deserialize<'de> for Infusion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(t) => Ok(Infusion::Fixed(t as usize)),
            Raw::Word(w) if w == "gated" => Ok(Infusion::Gated),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "infusion position must be an integer or \"gated\", got {w:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub from: String,
    pub to: String,
    /// Output width of the amplifier (the extra-input width at the target).
    pub width: usize,
    pub position: Infusion,
}

/// Topology of a [`FeedbackModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_width: usize,
    pub shared: Vec<BlockSpec>,
    pub tasks: Vec<TaskSpec>,
    pub routes: Vec<RouteSpec>,
    #[serde(default)]
    pub gate: GateConfig,
}

impl ModelSpec {
    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    /// Routes between every ordered pair of distinct tasks.
    pub fn fully_connected_routes(tasks: &[TaskSpec], width: usize, position: Infusion) -> Vec<RouteSpec> {
        let mut routes = Vec::new();
        for from in tasks {
            for to in tasks {
                if from.name != to.name {
                    routes.push(RouteSpec {
                        from: from.name.clone(),
                        to: to.name.clone(),
                        width,
                        position,
                    });
                }
            }
        }
        routes
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::config("model input width must be positive"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("model needs at least one task"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.blocks.is_empty() {
                return Err(Error::config(format!("task {} has no blocks", t.name)));
            }
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::config(format!("duplicate task name {}", t.name)));
            }
            if t.level == Level::Sentence && t.blocks.iter().any(|b| b.kind == BlockKind::Recurrent) {
                return Err(Error::config(format!(
                    "sentence-level task {} cannot contain recurrent blocks",
                    t.name
                )));
            }
        }
        for r in &self.routes {
            let target = self
                .task_index(&r.to)
                .ok_or_else(|| Error::config(format!("route target {} is not a task", r.to)))?;
            self.task_index(&r.from)
                .ok_or_else(|| Error::config(format!("route source {} is not a task", r.from)))?;
            if r.from == r.to {
                return Err(Error::config(format!("route {} -> {} is a self loop", r.from, r.to)));
            }
            if r.width == 0 {
                return Err(Error::config("route width must be positive"));
            }
            let depth = self.tasks[target].blocks.len();
            if let Infusion::Fixed(t) = r.position {
                if t == 0 || t > depth {
                    return Err(Error::config(format!(
                        "route {} -> {}: position {t} outside [1, {depth}]",
                        r.from, r.to
                    )));
                }
            }
        }
        self.gate.validate()
    }
}
