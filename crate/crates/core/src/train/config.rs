use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SyntheticSpec, TaskKind};
use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::loss::LossConfig;
use crate::model::{BlockKind, BlockSpec, Infusion, InitMode};

/// Cells of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// One step, no feedback.
    #[serde(rename = "TRIV")]
    Triv,
    /// Feedback at fixed positions, no convergence loss.
    #[serde(rename = "ITER")]
    Iter,
    #[serde(rename = "ITER+CONV")]
    IterConv,
    /// Gated positions, no convergence loss.
    #[serde(rename = "ITER+GG")]
    IterGg,
    /// Gated positions and convergence loss.
    #[serde(rename = "FUL")]
    Ful,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Triv, Ablation::Iter, Ablation::IterConv, Ablation::IterGg, Ablation::Ful];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Triv => "TRIV",
            Ablation::Iter => "ITER",
            Ablation::IterConv => "ITER+CONV",
            Ablation::IterGg => "ITER+GG",
            Ablation::Ful => "FUL",
        }
    }

    pub fn gated(self) -> bool {
        matches!(self, Ablation::IterGg | Ablation::Ful)
    }

    pub fn conv(self) -> bool {
        matches!(self, Ablation::IterConv | Ablation::Ful)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['.', ' '], "");
        Ablation::ALL
            .into_iter()
            .find(|a| a.label() == norm)
            .ok_or_else(|| Error::config(format!("unknown ablation flag {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 32,
            clip_norm: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Hidden blocks; a linear head sized to the label set is appended.
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteConfig {
    pub from: TaskKind,
    pub to: TaskKind,
    pub position: Infusion,
    /// Position used when the route runs without a gate; filled by the
    /// position grid search when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Token offsets whose embeddings are concatenated at each position.
    pub window: Vec<i64>,
    pub shared: Vec<BlockSpec>,
    pub tasks: Vec<TaskConfig>,
    pub routes: Vec<RouteConfig>,
    /// Default amplifier width.
    pub route_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let hidden = vec![BlockSpec::new(BlockKind::Tanh, 32)];
        ModelConfig {
            embed_dim: 16,
            window: vec![-1, 0, 1],
            shared: vec![BlockSpec::new(BlockKind::Tanh, 32)],
            tasks: vec![
                TaskConfig { kind: TaskKind::Intent, blocks: hidden.clone() },
                TaskConfig { kind: TaskKind::Slot, blocks: hidden },
            ],
            routes: vec![
                RouteConfig {
                    from: TaskKind::Slot,
                    to: TaskKind::Intent,
                    position: Infusion::Gated,
                    fixed_position: Some(1),
                    width: None,
                },
                RouteConfig {
                    from: TaskKind::Intent,
                    to: TaskKind::Slot,
                    position: Infusion::Gated,
                    fixed_position: Some(1),
                    width: None,
                },
            ],
            route_width: 8,
        }
    }
}

impl ModelConfig {
    pub fn has_task(&self, kind: TaskKind) -> bool {
        self.tasks.iter().any(|t| t.kind == kind)
    }

    /// Depth of a task branch including its head.
    pub fn depth(&self, kind: TaskKind) -> Option<usize> {
        self.tasks.iter().find(|t| t.kind == kind).map(|t| t.blocks.len() + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generate train and test data; the test set uses the next seed.
    pub synthetic: Option<SyntheticSpec>,
    pub test_count: usize,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub min_freq: usize,
    /// Tail fraction of the training data held out by the position search.
    pub valid_fraction: f64,
    pub repair_ibo: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: Some(SyntheticSpec { count: 2000, ..SyntheticSpec::default() }),
            test_count: 500,
            train: None,
            test: None,
            min_freq: 1,
            valid_fraction: 0.2,
            repair_ibo: false,
        }
    }
}

/// Everything that determines a training run besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Iteration budget.
    #[serde(alias = "K")]
    pub k: usize,
    pub init: InitMode,
    pub gate: GateConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    pub data: DataConfig,
    pub out: PathBuf,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            k: 4,
            init: InitMode::Random,
            gate: GateConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            seeds: vec![1, 2, 3],
            ablation: None,
            data: DataConfig::default(),
            out: PathBuf::from("runs/default"),
            eval_every: 50,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Loads a file (or the defaults) and applies `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Value>(&text).map_err(|e| Error::config(e.to_string()))?
            }
            None => toml::Value::try_from(RunConfig::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn task_kinds(&self) -> Vec<TaskKind> {
        self.model.tasks.iter().map(|t| t.kind).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        self.gate.validate()?;
        self.loss.validate()?;
        let m = &self.model;
        if m.embed_dim == 0 || m.window.is_empty() {
            return Err(Error::config("model.embed_dim and model.window must be non-empty"));
        }
        if m.tasks.is_empty() {
            return Err(Error::config("model.tasks is empty"));
        }
        for (i, t) in m.tasks.iter().enumerate() {
            if m.tasks[..i].iter().any(|o| o.kind == t.kind) {
                return Err(Error::config(format!("task {} listed twice", t.kind.name())));
            }
        }
        if m.has_task(TaskKind::NextWord) && m.window.iter().any(|&o| o > 0) {
            return Err(Error::config("next-word prediction needs a causal window (offsets <= 0)"));
        }
        for r in &m.routes {
            let depth = m
                .depth(r.to)
                .ok_or_else(|| Error::config(format!("route target {} is not a task", r.to.name())))?;
            m.depth(r.from)
                .ok_or_else(|| Error::config(format!("route source {} is not a task", r.from.name())))?;
            if r.from == r.to {
                return Err(Error::config(format!("route {0} -> {0} is a self loop", r.from.name())));
            }
            for t in [Some(r.position), r.fixed_position.map(Infusion::Fixed)].into_iter().flatten() {
                if let Infusion::Fixed(t) = t {
                    if t == 0 || t > depth {
                        return Err(Error::config(format!(
                            "route {} -> {}: position {t} outside [1, {depth}]",
                            r.from.name(),
                            r.to.name()
                        )));
                    }
                }
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::config("optimizer needs lr > 0, batch_size >= 1 and epochs >= 1"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds is empty"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        let d = &self.data;
        if d.synthetic.is_none() && d.train.is_none() {
            return Err(Error::config("data needs either a synthetic spec or a train path"));
        }
        if let Some(s) = &d.synthetic {
            s.validate()?;
        }
        if !(0.0..1.0).contains(&d.valid_fraction) {
            return Err(Error::config("data.valid_fraction must lie in [0, 1)"));
        }
        if let Some(flag) = self.ablation {
            self.check_ablation(flag)?;
        }
        Ok(())
    }

    fn check_ablation(&self, flag: Ablation) -> Result<()> {
        let bad = |why: &str| Err(Error::config(format!("ablation {flag}: {why}")));
        if flag == Ablation::Triv {
            if self.k != 1 {
                return bad("requires k = 1");
            }
            if !self.model.routes.is_empty() {
                return bad("uses no feedback routes");
            }
            return Ok(());
        }
        if self.k < 2 {
            return bad("requires k > 1");
        }
        if self.model.routes.is_empty() {
            return bad("needs at least one feedback route");
        }
        for r in &self.model.routes {
            match (flag.gated(), r.position) {
                (true, Infusion::Fixed(_)) => return bad("requires gated positions"),
                (false, Infusion::Gated) => return bad("requires fixed positions"),
                _ => {}
            }
        }
        match (flag.conv(), self.loss.conv_weight > 0.0) {
            (true, false) => bad("requires loss.conv_weight > 0"),
            (false, true) => bad("requires loss.conv_weight = 0"),
            _ => Ok(()),
        }
    }

    /// The cell of `flag` derived from this base config. Non-gated cells use
    /// each route's `fixed_position`; a missing one is a config error.
    pub fn with_ablation(&self, flag: Ablation, conv_weight: f64) -> Result<RunConfig> {
        let mut c = self.clone();
        c.ablation = Some(flag);
        if flag == Ablation::Triv {
            c.k = 1;
            c.model.routes.clear();
        } else {
            if c.k < 2 {
                return Err(Error::config(format!("ablation {flag} needs a base k > 1, got {}", c.k)));
            }
            for r in &mut c.model.routes {
                r.position = if flag.gated() {
                    Infusion::Gated
                } else {
                    Infusion::Fixed(r.fixed_position.ok_or_else(|| {
                        Error::config(format!(
                            "route {} -> {} has no fixed_position for {flag}",
                            r.from.name(),
                            r.to.name()
                        ))
                    })?)
                };
            }
        }
        c.loss.conv_weight = if flag.conv() { conv_weight } else { 0.0 };
        c.validate()?;
        Ok(c)
    }
}

/// Sets a dot-path key in a TOML tree, e.g. `loss.beta=0.7` or
/// `data.synthetic.coupling=0`. The value is parsed as TOML when possible,
/// otherwise taken as a string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p} is not a table")))?;
        node = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::config(format!("override {key:?}: parent is not a table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
