use rand::{Rng, RngCore};

use super::config::ModelConfig;
use crate::data::{Batch, TaskKind, Vocab, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{
    BlockKind, BlockSpec, FeedbackModel, IterateOptions, Level, ModelSpec, ParamId, ParamStore, PredictionTrace,
    RouteSpec, Session, TaskSpec,
};
use crate::gate::GateConfig;
use crate::tensor::{Axis, Segments, Tensor, Var};

/// Windowed word embeddings feeding a [`FeedbackModel`] with one branch per
/// SLU task.
#[derive(Clone, Debug)]
pub struct SluModel {
    pub tasks: Vec<TaskKind>,
    pub window: Vec<i64>,
    pub embed_dim: usize,
    embedding: ParamId,
    pub net: FeedbackModel,
}

pub fn label_count(kind: TaskKind, vocab: &Vocab) -> usize {
    match kind {
        TaskKind::Intent => vocab.intents.len(),
        TaskKind::Slot => vocab.slots.len(),
        TaskKind::NextWord => vocab.words.len(),
    }
}

pub fn task_level(kind: TaskKind) -> Level {
    match kind {
        TaskKind::Intent => Level::Sentence,
        TaskKind::Slot | TaskKind::NextWord => Level::Token,
    }
}

/// The feedback-model topology for a config and vocabulary.
pub fn model_spec(cfg: &ModelConfig, gate: &GateConfig, vocab: &Vocab) -> ModelSpec {
    let tasks: Vec<TaskSpec> = cfg
        .tasks
        .iter()
        .map(|t| {
            let mut blocks = t.blocks.clone();
            blocks.push(BlockSpec::new(BlockKind::Linear, label_count(t.kind, vocab)));
            TaskSpec { name: t.kind.name().to_string(), level: task_level(t.kind), blocks, output: Default::default() }
        })
        .collect();
    let routes = cfg
        .routes
        .iter()
        .map(|r| RouteSpec {
            from: r.from.name().to_string(),
            to: r.to.name().to_string(),
            width: r.width.unwrap_or(cfg.route_width),
            position: r.position,
        })
        .collect();
    ModelSpec {
        input_width: cfg.embed_dim * cfg.window.len(),
        shared: cfg.shared.clone(),
        tasks,
        routes,
        gate: gate.clone(),
    }
}

impl SluModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        gate: &GateConfig,
        vocab: &Vocab,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (cfg.embed_dim as f64).sqrt();
        let embedding = store.add("embed", Tensor::uniform(vocab.words.len(), cfg.embed_dim, bound, rng))?;
        let net = FeedbackModel::new(&model_spec(cfg, gate, vocab), store, rng)?;
        Ok(SluModel {
            tasks: cfg.tasks.iter().map(|t| t.kind).collect(),
            window: cfg.window.clone(),
            embed_dim: cfg.embed_dim,
            embedding,
            net,
        })
    }

    pub fn task_index(&self, kind: TaskKind) -> Option<usize> {
        self.tasks.iter().position(|&t| t == kind)
    }

    /// Word ids at offset `o` from every token, begin/end markers outside
    /// the utterance.
    fn shifted_ids(batch: &Batch, o: i64) -> Vec<usize> {
        let mut ids = Vec::with_capacity(batch.tokens());
        for i in 0..batch.len() {
            let row = batch.row(i);
            let n = row.len() as i64;
            for t in 0..n {
                let j = t + o;
                ids.push(if j < 0 {
                    BOS
                } else if j >= n {
                    EOS
                } else {
                    row[j as usize]
                });
            }
        }
        ids
    }

    /// Token features `[tokens x embed_dim * |window|]`.
    pub fn encode(&self, s: &mut Session, batch: &Batch) -> Result<Var> {
        if batch.tokens() == 0 {
            return Err(Error::data("batch has no tokens"));
        }
        let table = s.param(self.embedding);
        let parts: Vec<Var> = self
            .window
            .iter()
            .map(|&o| s.graph.embedding(table, &Self::shifted_ids(batch, o)))
            .collect::<Result<_>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            s.graph.concat(&parts, Axis::Cols)
        }
    }

    pub fn forward<R: RngCore>(
        &mut self,
        s: &mut Session,
        batch: &Batch,
        opts: &IterateOptions,
        rng: &mut R,
    ) -> Result<Vec<PredictionTrace>> {
        let x = self.encode(s, batch)?;
        self.net.iterate(s, x, &batch.segments(), opts, rng)
    }

    /// Row groups for a task's outputs: one row per example for sentence
    /// tasks, the token rows of each example otherwise.
    pub fn output_segments(&self, task: usize, batch: &Batch) -> Segments {
        match task_level(self.tasks[task]) {
            Level::Sentence => Segments::identity(batch.len()),
            Level::Token => batch.segments(),
        }
    }

    /// Per-row training targets of a task.
    pub fn targets(&self, task: usize, batch: &Batch) -> Vec<Option<usize>> {
        match self.tasks[task] {
            TaskKind::Intent => batch.intent_ids.clone(),
            TaskKind::Slot => batch.flat_slot_ids(),
            TaskKind::NextWord => batch.flat_next_word_ids(),
        }
    }
}
