use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::block::{BlockKind, LayerBlock};
use super::params::{ParamId, ParamStore, Session};
use super::{HeadOutput, Infusion, Level, ModelSpec};
use crate::error::{Error, Result};
use crate::gate::{infuse_gated, GateState};
use crate::tensor::{Axis, Segments, Tensor, Var};

/// Initial task outputs `y^0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Zeros,
    /// Center of the label simplex.
    #[default]
    Uniform,
    /// Random point of the label simplex per row, drawn from the iteration rng.
    Random,
}

#[derive(Clone, Debug)]
pub struct IterateOptions {
    /// Iteration budget `K >= 1`.
    pub steps: usize,
    pub init: InitMode,
    /// When false the routes are ignored and every branch runs without
    /// infusion (the static model).
    pub feedback: bool,
    /// Draw Gumbel noise for gated routes (training); otherwise gates take
    /// the noise-free argmax.
    pub stochastic_gates: bool,
}

impl IterateOptions {
    pub fn new(steps: usize) -> Self {
        IterateOptions { steps, init: InitMode::Uniform, feedback: true, stochastic_gates: false }
    }

    pub fn init(mut self, init: InitMode) -> Self {
        self.init = init;
        self
    }

    pub fn feedback(mut self, on: bool) -> Self {
        self.feedback = on;
        self
    }

    pub fn stochastic(mut self, on: bool) -> Self {
        self.stochastic_gates = on;
        self
    }
}

/// Task-specific stack ending in a label-space head.
#[derive(Clone, Debug)]
pub struct Branch {
    pub name: String,
    pub level: Level,
    pub blocks: Vec<LayerBlock>,
    pub output: HeadOutput,
}

impl Branch {
    pub fn label_count(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.output_width)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// Affine projection `f_ij` of task `i`'s output into task `j`'s feature space.
#[derive(Clone, Debug)]
pub struct Amplifier {
    pub source: usize,
    pub target: usize,
    pub projection: LayerBlock,
}

impl Amplifier {
    pub fn amplify(&self, s: &mut Session, y_source: Var) -> Result<Var> {
        self.projection.forward(s, y_source, None, &[])
    }

    pub fn output_width(&self) -> usize {
        self.projection.output_width
    }
}

#[derive(Clone, Debug)]
pub struct Route {
    pub source: usize,
    pub target: usize,
    pub amplifier: Amplifier,
    pub position: Infusion,
    pub gate: Option<GateState>,
}

/// Outputs `y^0 .. y^K` of one task during a single prediction.
#[derive(Clone, Debug)]
pub struct PredictionTrace {
    pub task: usize,
    /// `K + 1` entries; entry 0 is the constant initialization.
    pub outputs: Vec<Var>,
    /// Head pre-activations for steps `1..=K` (`K` entries).
    pub logits: Vec<Var>,
}

impl PredictionTrace {
    pub fn steps(&self) -> usize {
        self.outputs.len() - 1
    }

    pub fn final_output(&self) -> Var {
        *self.outputs.last().expect("trace is never empty")
    }

    pub fn final_logits(&self) -> Var {
        *self.logits.last().expect("trace has at least one step")
    }
}

#[derive(Clone, Debug)]
pub struct FeedbackModel {
    spec: ModelSpec,
    shared: Vec<LayerBlock>,
    branches: Vec<Branch>,
    routes: Vec<Route>,
}

impl FeedbackModel {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut shared = Vec::with_capacity(spec.shared.len());
        let mut width = spec.input_width;
        for (i, b) in spec.shared.iter().enumerate() {
            shared.push(LayerBlock::new(store, rng, &format!("shared.{i}"), b.kind, width, b.width)?);
            width = b.width;
        }
        let mut branches = Vec::with_capacity(spec.tasks.len());
        for t in &spec.tasks {
            let mut blocks = Vec::with_capacity(t.blocks.len());
            let mut w = width;
            for (i, b) in t.blocks.iter().enumerate() {
                blocks.push(LayerBlock::new(store, rng, &format!("{}.{i}", t.name), b.kind, w, b.width)?);
                w = b.width;
            }
            branches.push(Branch { name: t.name.clone(), level: t.level, blocks, output: t.output });
        }
        let mut routes = Vec::with_capacity(spec.routes.len());
        for (ri, r) in spec.routes.iter().enumerate() {
            let source = spec.task_index(&r.from).expect("validated");
            let target = spec.task_index(&r.to).expect("validated");
            let projection = LayerBlock::new(
                store,
                rng,
                &format!("amp.{}.{}", r.from, r.to),
                BlockKind::Linear,
                branches[source].label_count(),
                r.width,
            )?;
            let candidates: Vec<usize> = match r.position {
                Infusion::Fixed(t) => vec![t - 1],
                Infusion::Gated => (0..branches[target].depth()).collect(),
            };
            for c in candidates {
                branches[target].blocks[c].add_extra_input(store, rng, ri, r.width)?;
            }
            let gate = match r.position {
                Infusion::Gated => Some(GateState::new(store, rng, ri, branches[target].depth(), &spec.gate)?),
                Infusion::Fixed(_) => None,
            };
            routes.push(Route {
                source,
                target,
                amplifier: Amplifier { source, target, projection },
                position: r.position,
                gate,
            });
        }
        debug_assert_eq!(routes.len(), spec.routes.len());
        Ok(FeedbackModel { spec: spec.clone(), shared, branches, routes })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shared(&self) -> &[LayerBlock] {
        &self.shared
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn routes_mut(&mut self) -> &mut [Route] {
        &mut self.routes
    }

    pub fn amplifier_count(&self) -> usize {
        self.routes.len()
    }

    pub fn task_count(&self) -> usize {
        self.branches.len()
    }

    /// Parameters that only matter when feedback is used: amplifiers and the
    /// extra-input weights of infusion blocks.
    pub fn feedback_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (ri, r) in self.routes.iter().enumerate() {
            ids.extend(r.amplifier.projection.param_ids());
            for b in &self.branches[r.target].blocks {
                ids.extend(b.extra_weight(ri));
            }
        }
        ids
    }

    /// Parameters of one task branch (excluding feedback slots).
    pub fn branch_params(&self, task: usize) -> Vec<ParamId> {
        self.branches[task]
            .blocks
            .iter()
            .flat_map(|b| {
                let mut v = vec![b.weight(), b.bias()];
                v.extend(b.recurrent_weight());
                v
            })
            .collect()
    }

    /// `y_c = f_{m_s} o ... o f_1 (x)`; the identity when there are no shared blocks.
    pub fn forward_shared(&self, s: &mut Session, x: Var, segments: &Segments) -> Result<Var> {
        let (rows, width) = s.graph.shape(x);
        if rows != segments.total_rows() {
            return Err(Error::shape("forward_shared", (rows, width), (segments.total_rows(), width)));
        }
        if width != self.spec.input_width {
            return Err(Error::shape("forward_shared", (rows, width), (rows, self.spec.input_width)));
        }
        let mut h = x;
        for b in &self.shared {
            h = b.forward(s, h, Some(segments), &[])?;
        }
        Ok(h)
    }

    fn branch_input(&self, s: &mut Session, task: usize, y_c: Var, segments: &Segments) -> Result<Var> {
        match self.branches[task].level {
            Level::Token => Ok(y_c),
            Level::Sentence => s.graph.segment_mean(y_c, segments),
        }
    }

    /// Runs one branch from its (level-adapted) input. `infusions[p]` lists
    /// the `(route, signal)` pairs entering block `p` (0-based).
    pub fn forward_branch(
        &self,
        s: &mut Session,
        task: usize,
        input: Var,
        segments: &Segments,
        infusions: &[Vec<(usize, Var)>],
    ) -> Result<(Var, Var)> {
        let branch = &self.branches[task];
        if infusions.len() > branch.depth() {
            return Err(Error::Index { op: "forward_branch", index: infusions.len(), bound: branch.depth() });
        }
        let seg = match branch.level {
            Level::Token => Some(segments),
            Level::Sentence => None,
        };
        let mut h = input;
        for (p, block) in branch.blocks.iter().enumerate() {
            let inf = infusions.get(p).map_or(&[][..], |v| v.as_slice());
            h = block.forward(s, h, seg, inf)?;
        }
        let out = match branch.output {
            HeadOutput::Softmax => s.graph.softmax(h, Axis::Cols),
            HeadOutput::Identity => h,
        };
        Ok((h, out))
    }

    /// Amplified and level-adapted feedback of one route, split over its
    /// infusion positions (0-based).
    pub fn route_signals(
        &mut self,
        s: &mut Session,
        route: usize,
        y_source: Var,
        segments: &Segments,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<(usize, Var)>> {
        let (src_level, dst_level) = {
            let r = &self.routes[route];
            (self.branches[r.source].level, self.branches[r.target].level)
        };
        let r = &mut self.routes[route];
        let y_tilde = match (src_level, dst_level) {
            (Level::Token, Level::Sentence) => {
                let pooled = s.graph.segment_mean(y_source, segments)?;
                r.amplifier.amplify(s, pooled)?
            }
            (Level::Sentence, Level::Token) => {
                let a = r.amplifier.amplify(s, y_source)?;
                s.graph.broadcast(a, segments)?
            }
            _ => r.amplifier.amplify(s, y_source)?,
        };
        match r.position {
            Infusion::Fixed(t) => Ok(vec![(t - 1, y_tilde)]),
            Infusion::Gated => {
                let gate = r.gate.as_mut().expect("gated route has a gate");
                let (gate_seg, token_seg) = match dst_level {
                    Level::Sentence => (Segments::identity(segments.count()), None),
                    Level::Token => (segments.clone(), Some(segments)),
                };
                let gamma = gate.select(s, y_tilde, &gate_seg, rng)?;
                (1..=gate.candidates)
                    .map(|t| Ok((t - 1, infuse_gated(s, gamma, y_tilde, t, token_seg)?)))
                    .collect()
            }
        }
    }

    fn rows_at(level: Level, segments: &Segments) -> usize {
        match level {
            Level::Sentence => segments.count(),
            Level::Token => segments.total_rows(),
        }
    }

    /// `y^0` for one task.
    pub fn initial_output<R: Rng + ?Sized>(
        &self,
        task: usize,
        segments: &Segments,
        mode: InitMode,
        rng: &mut R,
    ) -> Tensor {
        let b = &self.branches[task];
        let rows = Self::rows_at(b.level, segments);
        let c = b.label_count();
        match mode {
            InitMode::Zeros => Tensor::zeros(rows, c),
            InitMode::Uniform => Tensor::filled(rows, c, 1.0 / c as f64),
            InitMode::Random => {
                let mut t = Tensor::zeros(rows, c);
                for row in t.data_mut().chunks_mut(c) {
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = rng.gen_range(1e-6..1.0);
                        z += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= z);
                }
                t
            }
        }
    }

    /// The unrolled feedback dynamics: `y_c` once, then `K` synchronous
    /// updates where every task's step-`k` output sees the step-`(k-1)`
    /// outputs of its source tasks.
    pub fn iterate<R: RngCore>(
        &mut self,
        s: &mut Session,
        x: Var,
        segments: &Segments,
        opts: &IterateOptions,
        rng: &mut R,
    ) -> Result<Vec<PredictionTrace>> {
        if opts.steps == 0 {
            return Err(Error::config("iteration budget K must be at least 1"));
        }
        let y_c = self.forward_shared(s, x, segments)?;
        let tasks = self.branches.len();
        let mut inputs = Vec::with_capacity(tasks);
        let mut traces = Vec::with_capacity(tasks);
        for t in 0..tasks {
            inputs.push(self.branch_input(s, t, y_c, segments)?);
            let y0 = self.initial_output(t, segments, opts.init, rng);
            let y0 = s.constant(y0);
            traces.push(PredictionTrace { task: t, outputs: vec![y0], logits: Vec::new() });
        }

        for _k in 1..=opts.steps {
            let mut infusions: Vec<Vec<Vec<(usize, Var)>>> =
                self.branches.iter().map(|b| vec![Vec::new(); b.depth()]).collect();
            if opts.feedback {
                for ri in 0..self.routes.len() {
                    let (src, dst) = (self.routes[ri].source, self.routes[ri].target);
                    let prev = *traces[src].outputs.last().unwrap();
                    let noise: Option<&mut dyn RngCore> =
                        if opts.stochastic_gates { Some(&mut *rng) } else { None };
                    for (p, sig) in self.route_signals(s, ri, prev, segments, noise)? {
                        infusions[dst][p].push((ri, sig));
                    }
                }
            }
            for t in 0..tasks {
                let (logits, out) = self.forward_branch(s, t, inputs[t], segments, &infusions[t])?;
                traces[t].outputs.push(out);
                traces[t].logits.push(logits);
            }
        }
        Ok(traces)
    }

    /// Single pass without any feedback: `(logits, output)` per task.
    pub fn static_forward(&self, s: &mut Session, x: Var, segments: &Segments) -> Result<Vec<(Var, Var)>> {
        let y_c = self.forward_shared(s, x, segments)?;
        (0..self.branches.len())
            .map(|t| {
                let input = self.branch_input(s, t, y_c, segments)?;
                self.forward_branch(s, t, input, segments, &[])
            })
            .collect()
    }
}
