//! Behaviour cloning on stored trajectories: replay to prompts, chunking,
//! length-grouped batches and the Adam loop. Also greedy evaluation
//! rollouts.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dagger::{EpisodeSpec, TrajectoryStore};
use crate::encoder::ObservationEncoder;
use crate::env::{oracle_rollout, Action, EnvState, GridWorld, Instruction, Vocab};
use crate::episode::{cache_seed, execute_plan, replay_state, PolicyAgent, PromptBuilder};
use crate::error::{Error, Result};
use crate::memory::{MemoryMode, Prompt};
use crate::metrics::{EpisodeMetrics, EvalRecord};
use crate::policy::{PackedBatch, Policy};
use crate::tensor::{Adam, AdamConfig, LrSchedule};

pub const MAX_CHUNK_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub chunk_len: usize,
    /// Chunks per optimizer step.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            chunk_len: MAX_CHUNK_LEN,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_ratio: 0.03,
            total_steps: 300,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_CHUNK_LEN).contains(&self.chunk_len) {
            return Err(Error::Config(format!("chunk_len {} outside 1..={MAX_CHUNK_LEN}", self.chunk_len)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Prompts and labels of one stored episode, rebuilt by replaying its
/// decision states.
#[derive(Clone, Debug)]
pub struct EpisodeData {
    pub world_id: u64,
    pub prompts: Vec<Prompt>,
    pub labels: Vec<Vec<Action>>,
}

impl EpisodeData {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkRef {
    pub episode: usize,
    pub start: usize,
    pub len: usize,
}

/// Training samples: per-episode prompts plus their chunking.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub mode: MemoryMode,
    pub episodes: Vec<EpisodeData>,
    pub chunks: Vec<ChunkRef>,
}

impl TrainingSet {
    /// Replays every trajectory in `store`. `worlds` maps world ids to worlds.
    pub fn build(
        store: &TrajectoryStore,
        worlds: &HashMap<u64, GridWorld>,
        vocab: &Vocab,
        encoder: &ObservationEncoder,
        policy: &Policy,
        run_seed: u64,
        chunk_len: usize,
    ) -> Result<Self> {
        if !(1..=MAX_CHUNK_LEN).contains(&chunk_len) {
            return Err(Error::Config(format!("chunk_len {chunk_len} outside 1..={MAX_CHUNK_LEN}")));
        }
        let episodes = store
            .trajectories
            .par_iter()
            .map(|traj| {
                let world = worlds
                    .get(&traj.world_id)
                    .ok_or_else(|| Error::Data(format!("trajectory references unknown world {}", traj.world_id)))?;
                let ids = traj.instruction.iter().map(|t| vocab.id(t)).collect::<Result<Vec<_>>>()?;
                let mut builder = PromptBuilder::for_policy(encoder, policy, ids, cache_seed(run_seed, world.id));
                let mut prompts = Vec::with_capacity(traj.records.len());
                let mut labels = Vec::with_capacity(traj.records.len());
                for r in &traj.records {
                    let state = replay_state(world, r.cell, r.heading, r.step);
                    prompts.push(builder.prompt_at(world, &state)?);
                    labels.push(r.label.clone());
                }
                Ok(EpisodeData {
                    world_id: traj.world_id,
                    prompts,
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let chunks = chunk_episodes(&episodes, chunk_len);
        Ok(Self {
            mode: policy.cfg.memory_mode,
            episodes,
            chunks,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.episodes.iter().map(EpisodeData::len).sum()
    }

    /// Packed batch for a chunk. Recursive chunks carry the episode's
    /// earlier steps as prefix.
    pub fn batch(&self, c: ChunkRef) -> PackedBatch {
        let ep = &self.episodes[c.episode];
        let range = c.start..c.start + c.len;
        let mut b = PackedBatch::new(ep.prompts[range.clone()].to_vec(), ep.labels[range].to_vec());
        if self.mode == MemoryMode::Recursive {
            b.prefix = ep.prompts[..c.start].to_vec();
        }
        b
    }

    /// Chunks grouped by token count into batches of `batch_size`.
    pub fn length_grouped_batches(&self, batch_size: usize) -> Vec<Vec<ChunkRef>> {
        let mut order: Vec<(usize, ChunkRef)> = self
            .chunks
            .iter()
            .map(|&c| {
                let ep = &self.episodes[c.episode];
                let tokens = ep.prompts[c.start..c.start + c.len].iter().map(|p| p.layout.len()).sum();
                (tokens, c)
            })
            .collect();
        order.sort_by_key(|&(t, c)| (t, c.episode, c.start));
        order.chunks(batch_size.max(1)).map(|g| g.iter().map(|&(_, c)| c).collect()).collect()
    }
}

/// Consecutive chunks of at most `chunk_len` steps per episode.
pub fn chunk_episodes(episodes: &[EpisodeData], chunk_len: usize) -> Vec<ChunkRef> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let mut start = 0;
        while start < ep.len() {
            let len = chunk_len.min(ep.len() - start);
            out.push(ChunkRef { episode: e, start, len });
            start += len;
        }
    }
    out
}

/// Optimizer steps needed to visit every chunk once.
pub fn steps_per_epoch(step_counts: &[usize], chunk_len: usize, batch_size: usize) -> usize {
    let chunks: usize = step_counts.iter().map(|n| n.div_ceil(chunk_len)).sum();
    chunks.div_ceil(batch_size)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub samples_seen: usize,
}

/// Step-weighted mean loss and gradient over a batch of chunks. Chunks run
/// in parallel; the reduction order is fixed.
pub fn batch_loss_and_grads(policy: &Policy, set: &TrainingSet, batch: &[ChunkRef]) -> Result<(f64, Vec<Vec<f64>>, usize)> {
    let parts = batch
        .par_iter()
        .map(|&c| policy.loss_and_grads(&set.batch(c)).map(|(l, g)| (l, g, c.len)))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = parts.iter().map(|p| p.2).sum();
    let mut grads = policy.params.zero_grads();
    let mut loss = 0.0;
    for (l, g, n) in &parts {
        let w = *n as f64 / total as f64;
        loss += w * l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += w * b;
            }
        }
    }
    Ok((loss, grads, total))
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Runs `cfg.total_steps` optimizer steps over shuffled length-grouped
/// batches. `on_step` sees each step's index and loss.
pub fn train(policy: &mut Policy, set: &TrainingSet, cfg: &TrainConfig, mut on_step: impl FnMut(u64, f64)) -> Result<TrainReport> {
    cfg.validate()?;
    if set.mode != policy.cfg.memory_mode {
        return Err(Error::Config(format!(
            "training set built for {:?}, policy is {:?}",
            set.mode, policy.cfg.memory_mode
        )));
    }
    let mut report = TrainReport::default();
    if cfg.total_steps == 0 {
        return Ok(report);
    }
    let batches = set.length_grouped_batches(cfg.batch_size);
    if batches.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.total_steps, cfg.warmup_ratio);
    let mut adam = Adam::new(&policy.params, AdamConfig::default());
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=cfg.total_steps {
        if order.is_empty() {
            order = (0..batches.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let b = &batches[order.pop().expect("refilled above")];
        let (loss, mut grads, n) = batch_loss_and_grads(policy, set, b)?;
        if !loss.is_finite() {
            return Err(Error::Data(format!("non-finite loss at step {step}")));
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam.update(&mut policy.params, &grads, schedule.lr_at(step))?;
        report.losses.push(loss);
        report.samples_seen += n;
        report.steps = step;
        on_step(step, loss);
    }
    Ok(report)
}

/// Fraction of label actions matched by the teacher-forced argmax plan.
pub fn plan_accuracy(policy: &Policy, set: &TrainingSet) -> Result<f64> {
    let counts = set
        .chunks
        .par_iter()
        .map(|&c| {
            let batch = set.batch(c);
            let logits = policy.packed_logits(&batch)?;
            let mut hit = 0usize;
            for (r, label) in batch.labels.iter().flatten().enumerate() {
                let row = logits.row(r);
                let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                hit += (best == label.index()) as usize;
            }
            Ok((hit, batch.labels.len() * policy.cfg.horizon))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hit, total) = counts.iter().fold((0, 0), |(h, t), &(a, b)| (h + a, t + b));
    if total == 0 {
        return Err(Error::Data("no samples to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// One greedy rollout: the executed state, token counts per forward pass.
pub fn rollout(
    policy: &Policy,
    encoder: &ObservationEncoder,
    world: &GridWorld,
    instruction: &[usize],
    seed: u64,
) -> Result<(EnvState, Vec<usize>)> {
    let mut agent = PolicyAgent::new(policy, encoder, instruction.to_vec(), cache_seed(seed, world.id))?;
    let mut state = EnvState::start(world);
    let mut tokens = Vec::new();
    while !state.done {
        let (plan, n) = agent.plan(world, &state)?;
        tokens.push(n);
        state = execute_plan(world, &state, &plan.actions)?.0;
    }
    Ok((state, tokens))
}

fn eval_record(world: &GridWorld, end: &EnvState, threshold: f64) -> Result<EvalRecord> {
    let (_, reference) = oracle_rollout(world)?;
    Ok(EvalRecord {
        agent_path: end.path.clone(),
        reference_path: reference.path,
        goal: world.goal,
        threshold,
        stopped: end.stopped,
    })
}

/// Greedy evaluation over `specs`, in order.
pub fn evaluate(
    policy: &Policy,
    encoder: &ObservationEncoder,
    vocab: &Vocab,
    specs: &[EpisodeSpec],
    threshold: f64,
    seed: u64,
) -> Result<Vec<EpisodeMetrics>> {
    specs
        .par_iter()
        .map(|spec| {
            let ids = spec.token_ids(vocab)?;
            let (end, tokens) = rollout(policy, encoder, &spec.world, &ids, seed)?;
            let rec = eval_record(&spec.world, &end, threshold)?;
            Ok(EpisodeMetrics::from_record(spec.world.id, &rec, end.step_count, &tokens))
        })
        .collect()
}

/// Evaluation of the oracle itself; one decision per oracle plan.
pub fn evaluate_oracle(specs: &[EpisodeSpec], threshold: f64) -> Result<Vec<EpisodeMetrics>> {
    specs
        .iter()
        .map(|spec| {
            let (actions, end) = oracle_rollout(&spec.world)?;
            let rec = eval_record(&spec.world, &end, threshold)?;
            let decisions = actions.len().div_ceil(crate::policy::HORIZON);
            Ok(EpisodeMetrics::from_record(spec.world.id, &rec, end.step_count, &vec![0; decisions]))
        })
        .collect()
}

/// Worlds keyed by id.
pub fn world_index(specs: &[EpisodeSpec]) -> HashMap<u64, GridWorld> {
    specs.iter().map(|s| (s.world.id, s.world.clone())).collect()
}

/// Instruction tokens must fit the policy's reserved span.
pub fn check_instruction_fit(specs: &[EpisodeSpec], max_len: usize) -> Result<()> {
    match specs.iter().find(|s| s.instruction.len() > max_len) {
        Some(s) => Err(Error::Config(format!(
            "world {} instruction has {} tokens, max_instruction_len is {max_len}",
            s.world.id,
            s.instruction.len()
        ))),
        None => Ok(()),
    }
}

pub fn instruction_lengths(instr: &[Instruction]) -> f64 {
    instr.iter().map(|i| i.len() as f64).sum::<f64>() / instr.len().max(1) as f64
}
