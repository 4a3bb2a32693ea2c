//! History representations: progressive spatial compression under the
//! `⌈K·S/3⌉` token budget, fixed-size recursive sentinel memory, and the
//! prompt layouts that place memory between observation and instruction.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{LayerKv, SegmentKind};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Progressive,
    Recursive,
}

impl MemoryMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(Self::Progressive),
            "recursive" => Ok(Self::Recursive),
            _ => Err(Error::Config(format!("memory mode `{s}` is not progressive|recursive"))),
        }
    }
}

/// `⌈K·S/3⌉`.
pub fn progressive_budget(group_size: usize, frame_tokens: usize) -> usize {
    (group_size * frame_tokens).div_ceil(3)
}

/// Groups of pooled grids, newest group first. Group `i` holds at most `K`
/// grids at linear factor `2^(i+1)`; inside a group the newest grid is first.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveMemory {
    group_size: usize,
    groups: Vec<VecDeque<TokenGrid>>,
}

impl ProgressiveMemory {
    pub fn new(group_size: usize) -> Self {
        Self {
            group_size: group_size.max(1),
            groups: Vec::new(),
        }
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups(&self) -> &[VecDeque<TokenGrid>] {
        &self.groups
    }

    pub fn token_count(&self) -> usize {
        self.groups.iter().flatten().map(TokenGrid::len).sum()
    }

    pub fn frame_count(&self) -> usize {
        self.groups.iter().map(VecDeque::len).sum()
    }

    /// Functional update: returns the memory with `frame` ingested.
    pub fn updated(&self, frame: &TokenGrid) -> Result<Self> {
        let mut next = self.clone();
        next.push(frame)?;
        Ok(next)
    }

    pub fn push(&mut self, frame: &TokenGrid) -> Result<()> {
        if frame.downsample_factor != 1 {
            return Err(Error::MemoryProtocol(format!(
                "progressive memory ingests full-resolution grids, got factor {}",
                frame.downsample_factor
            )));
        }
        let Some(mut carry) = frame.pool2x2() else { return Ok(()) };
        let mut level = 0;
        loop {
            if self.groups.len() == level {
                self.groups.push(VecDeque::new());
            }
            let group = &mut self.groups[level];
            group.push_front(carry);
            if group.len() <= self.group_size {
                break;
            }
            let oldest = group.pop_back().expect("group is over capacity");
            match oldest.pool2x2() {
                Some(p) => carry = p,
                None => break,
            }
            level += 1;
        }
        while self.groups.last().is_some_and(VecDeque::is_empty) {
            self.groups.pop();
        }
        Ok(())
    }

    /// Grids from oldest to newest.
    pub fn grids_oldest_first(&self) -> Vec<&TokenGrid> {
        self.groups.iter().rev().flat_map(|g| g.iter().rev()).collect()
    }

    /// Memory tokens `[n x C]`, oldest grid first, each grid in row-major
    /// order.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let grids = self.grids_oldest_first();
        let data: Vec<f64> = grids.iter().flat_map(|g| g.tokens.iter().copied()).collect();
        Tensor::from_parts(vec![data.len() / channels.max(1), channels], data)
    }
}

/// Per-layer keys/values of the `M` sentinel tokens carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RecursiveMemory {
    pub sentinels: usize,
    pub layers: Vec<LayerKv>,
    /// Decision step that produced the blocks; `None` for the initial state.
    pub step_of_origin: Option<usize>,
}

impl RecursiveMemory {
    pub fn new(sentinels: usize, layers: Vec<LayerKv>, step_of_origin: Option<usize>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.len() != sentinels || l.values.shape() != l.keys.shape() {
                return Err(Error::MemoryProtocol(format!(
                    "layer {i} carries {} positions, expected {sentinels}",
                    l.len()
                )));
            }
        }
        Ok(Self {
            sentinels,
            layers,
            step_of_origin,
        })
    }

    /// Little-endian dump of every block: sentinel count, layer count, width,
    /// then keys and values per layer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width = self.layers.first().map_or(0, |l| l.keys.cols());
        let mut out = Vec::new();
        for v in [self.sentinels, self.layers.len(), width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in &self.layers {
            for x in l.keys.data().iter().chain(l.values.data()) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MemoryState {
    Progressive(ProgressiveMemory),
    Recursive(RecursiveMemory),
}

impl MemoryState {
    pub fn mode(&self) -> MemoryMode {
        match self {
            MemoryState::Progressive(_) => MemoryMode::Progressive,
            MemoryState::Recursive(_) => MemoryMode::Recursive,
        }
    }
}

/// Index ranges of one step's prompt. Order is observation, memory,
/// instruction, then sentinels (empty outside recursive mode).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub mode: MemoryMode,
    pub obs: Range<usize>,
    pub memory: Range<usize>,
    pub instruction: Range<usize>,
    pub sentinel: Range<usize>,
}

impl PromptLayout {
    pub fn new(mode: MemoryMode, obs: usize, memory: usize, instruction: usize, sentinel: usize) -> Self {
        let m0 = obs;
        let i0 = m0 + memory;
        let s0 = i0 + instruction;
        Self {
            mode,
            obs: 0..obs,
            memory: m0..i0,
            instruction: i0..s0,
            sentinel: s0..s0 + sentinel,
        }
    }

    pub fn len(&self) -> usize {
        self.sentinel.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> Vec<(SegmentKind, Range<usize>)> {
        let mut out = vec![
            (SegmentKind::CurrentObs, self.obs.clone()),
            (SegmentKind::Memory, self.memory.clone()),
            (SegmentKind::Instruction, self.instruction.clone()),
        ];
        if self.mode == MemoryMode::Recursive {
            out.push((SegmentKind::Sentinel, self.sentinel.clone()));
        }
        out
    }
}

/// One step's model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub layout: PromptLayout,
    /// Current observation tokens `[S x C]`.
    pub obs: Tensor,
    /// Progressive memory tokens `[n x C]`, oldest first; empty in recursive
    /// mode, where the span is a placeholder for injected keys/values.
    pub memory: Tensor,
    pub instruction: Vec<usize>,
}

pub fn assemble_progressive_prompt(f_t: &TokenGrid, mem: &ProgressiveMemory, w: &[usize]) -> Prompt {
    let memory = mem.to_tensor(f_t.channels);
    Prompt {
        layout: PromptLayout::new(MemoryMode::Progressive, f_t.len(), memory.rows(), w.len(), 0),
        obs: f_t.to_tensor(),
        memory,
        instruction: w.to_vec(),
    }
}

pub fn assemble_recursive_prompt(f_t: &TokenGrid, sentinels: usize, w: &[usize]) -> Prompt {
    Prompt {
        layout: PromptLayout::new(MemoryMode::Recursive, f_t.len(), sentinels, w.len(), sentinels),
        obs: f_t.to_tensor(),
        memory: Tensor::zeros(&[0, f_t.channels]),
        instruction: w.to_vec(),
    }
}

/// Progressive memory over the sampled window, excluding the current frame.
/// `window_newest_first` is the output of `sample_history` mapped to grids.
pub fn progressive_from_window(window_newest_first: &[&TokenGrid], group_size: usize) -> Result<ProgressiveMemory> {
    let mut mem = ProgressiveMemory::new(group_size);
    for g in window_newest_first.iter().skip(1).rev() {
        mem.push(g)?;
    }
    Ok(mem)
}
