//! Per-episode plumbing between the environment and the policy: renders and
//! encodes the frame at each decision point, keeps the sampled history and
//! the memory state, and executes plans.

use crate::encoder::{sample_history, GeometryFrameCache, ObservationEncoder, TokenGrid};
use crate::env::{observe, Action, EnvState, GridWorld};
use crate::error::{Error, Result};
use crate::memory::{assemble_progressive_prompt, assemble_recursive_prompt, progressive_from_window, MemoryMode, MemoryState, Prompt};
use crate::policy::{ActionPlan, Policy};

/// Builds prompts for successive decision points of one episode.
#[derive(Clone, Debug)]
pub struct PromptBuilder<'a> {
    encoder: &'a ObservationEncoder,
    cache: GeometryFrameCache,
    mode: MemoryMode,
    group_size: usize,
    sentinels: usize,
    instruction: Vec<usize>,
    frames: Vec<TokenGrid>,
    steps: Vec<usize>,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(
        encoder: &'a ObservationEncoder,
        mode: MemoryMode,
        group_size: usize,
        sentinels: usize,
        instruction: Vec<usize>,
        cache_seed: u64,
    ) -> Self {
        Self {
            cache: GeometryFrameCache::new(encoder.cfg.geometry_cache_limit, cache_seed),
            encoder,
            mode,
            group_size,
            sentinels,
            instruction,
            frames: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn for_policy(encoder: &'a ObservationEncoder, policy: &Policy, instruction: Vec<usize>, cache_seed: u64) -> Self {
        Self::new(
            encoder,
            policy.cfg.memory_mode,
            policy.cfg.group_size,
            policy.cfg.sentinels,
            instruction,
            cache_seed,
        )
    }

    /// Observes and encodes the state, then assembles its prompt. Decision
    /// points must be visited in increasing step order.
    pub fn prompt_at(&mut self, world: &GridWorld, state: &EnvState) -> Result<Prompt> {
        let t = state.step_count;
        if self.steps.last().is_some_and(|&s| s >= t) {
            return Err(Error::Protocol(format!("decision step {t} is not after {:?}", self.steps.last())));
        }
        let frame = observe(world, state);
        let f_t = self.encoder.encode(&frame, &mut self.cache)?;
        self.frames.push(f_t);
        self.steps.push(t);
        let f_t = self.frames.last().expect("just pushed");
        Ok(match self.mode {
            MemoryMode::Progressive => {
                let cfg = &self.encoder.cfg;
                let window = sample_history(&self.steps, cfg.stride, t, cfg.window);
                let grids: Vec<&TokenGrid> = window
                    .iter()
                    .map(|s| &self.frames[self.steps.binary_search(s).expect("sampled step exists")])
                    .collect();
                let mem = progressive_from_window(&grids, self.group_size)?;
                assemble_progressive_prompt(f_t, &mem, &self.instruction)
            }
            MemoryMode::Recursive => assemble_recursive_prompt(f_t, self.sentinels, &self.instruction),
        })
    }
}

/// A policy acting in one episode: prompt building plus its memory state.
#[derive(Clone, Debug)]
pub struct PolicyAgent<'a> {
    pub policy: &'a Policy,
    pub prompts: PromptBuilder<'a>,
    pub memory: MemoryState,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(policy: &'a Policy, encoder: &'a ObservationEncoder, instruction: Vec<usize>, cache_seed: u64) -> Result<Self> {
        Ok(Self {
            prompts: PromptBuilder::for_policy(encoder, policy, instruction, cache_seed),
            memory: policy.initial_memory()?,
            policy,
        })
    }

    /// Greedy plan at the current decision point. Also returns the number of
    /// tokens in the forward pass.
    pub fn plan(&mut self, world: &GridWorld, state: &EnvState) -> Result<(ActionPlan, usize)> {
        let prompt = self.prompts.prompt_at(world, state)?;
        let tokens = prompt.layout.len() + self.policy.cfg.horizon;
        let (plan, memory) = self.policy.predict(&prompt, &self.memory)?;
        self.memory = memory;
        Ok((plan, tokens))
    }
}

/// Executes a plan in order, stopping after `Stop` or when the episode ends.
/// Returns the new state and the actions actually taken.
pub fn execute_plan(world: &GridWorld, state: &EnvState, plan: &[Action]) -> Result<(EnvState, Vec<Action>)> {
    let mut s = state.clone();
    let mut taken = Vec::with_capacity(plan.len());
    for &a in plan {
        if s.done {
            break;
        }
        s = s.step(world, a)?;
        taken.push(a);
    }
    Ok((s, taken))
}

/// Replay state for a stored decision point. Rendering only reads the cell,
/// heading and step count.
pub fn replay_state(world: &GridWorld, cell: crate::env::Cell, heading: crate::env::Heading, step: usize) -> EnvState {
    let mut s = EnvState::start(world);
    s.cell = cell;
    s.heading = heading;
    s.step_count = step;
    s
}

/// Geometry-cache seed for an episode.
pub fn cache_seed(run_seed: u64, world_id: u64) -> u64 {
    run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ world_id.rotate_left(17)
}
