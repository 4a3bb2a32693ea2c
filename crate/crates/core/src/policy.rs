//! Tiny pre-LN transformer policy. A step's sequence is the prompt followed
//! by `A` action-query tokens; the logits at those positions give the next
//! `A` actions. Several consecutive steps are packed into one sequence under
//! a block-sparse mask. In recursive mode the memory placeholder of step `j`
//! reads the sentinel keys/values of step `j - 1` inside the same pack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_on_tape, build_pack_mask, BlockSparseMask, LayerKv};
use crate::env::{Action, Vocab};
use crate::error::{Error, Result};
use crate::memory::{progressive_budget, MemoryMode, MemoryState, ProgressiveMemory, Prompt, RecursiveMemory};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const HORIZON: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Channel width of the encoder tokens fed to the observation projection.
    pub obs_dim: usize,
    pub vocab_size: usize,
    pub horizon: usize,
    pub memory_mode: MemoryMode,
    /// Progressive group size K.
    pub group_size: usize,
    /// Recursive sentinel count M.
    pub sentinels: usize,
    /// Tokens per observation S.
    pub obs_tokens: usize,
    pub max_instruction_len: usize,
    pub mlp_ratio: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 32,
            obs_dim: 32,
            vocab_size: Vocab::standard().len(),
            horizon: HORIZON,
            memory_mode: MemoryMode::Progressive,
            group_size: 3,
            sentinels: 64,
            obs_tokens: 25,
            max_instruction_len: 96,
            mlp_ratio: 4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon != HORIZON {
            return Err(Error::Config(format!("action horizon must be {HORIZON}, got {}", self.horizon)));
        }
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {} and layers >= 1",
                self.dim, self.heads
            )));
        }
        if self.obs_tokens == 0 || self.obs_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("obs_tokens, obs_dim and mlp_ratio must be >= 1".into()));
        }
        if self.vocab_size < 8 {
            return Err(Error::Config("vocabulary must hold the control and action symbols".into()));
        }
        match self.memory_mode {
            MemoryMode::Progressive if self.group_size == 0 => Err(Error::Config("group_size must be >= 1".into())),
            MemoryMode::Recursive if self.sentinels == 0 => Err(Error::Config("sentinels must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Reserved memory positions: the progressive budget or `M`.
    pub fn memory_positions(&self) -> usize {
        match self.memory_mode {
            MemoryMode::Progressive => progressive_budget(self.group_size, self.obs_tokens),
            MemoryMode::Recursive => self.sentinels,
        }
    }

    fn sentinel_positions(&self) -> usize {
        match self.memory_mode {
            MemoryMode::Progressive => 0,
            MemoryMode::Recursive => self.sentinels,
        }
    }

    fn mem_pos0(&self) -> usize {
        self.obs_tokens
    }

    fn ins_pos0(&self) -> usize {
        self.mem_pos0() + self.memory_positions()
    }

    fn sent_pos0(&self) -> usize {
        self.ins_pos0() + self.max_instruction_len
    }

    fn act_pos0(&self) -> usize {
        self.sent_pos0() + self.sentinel_positions()
    }

    pub fn positions(&self) -> usize {
        self.act_pos0() + self.horizon
    }
}

/// Greedy decoding of `A` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionPlan {
    pub actions: Vec<Action>,
    /// `[A x 4]`.
    pub logits: Tensor,
}

impl ActionPlan {
    /// Row-wise argmax; ties resolve to the earlier action.
    pub fn from_logits(logits: Tensor) -> Self {
        let actions = (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                Action::ALL[best]
            })
            .collect();
        Self { actions, logits }
    }
}

/// Consecutive steps of one episode with their label plans.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub steps: Vec<Prompt>,
    pub labels: Vec<Vec<Action>>,
    /// Recursive mode: the episode's steps preceding the chunk, used to
    /// compute the incoming memory without gradient.
    pub prefix: Vec<Prompt>,
}

impl PackedBatch {
    pub fn new(steps: Vec<Prompt>, labels: Vec<Vec<Action>>) -> Self {
        Self {
            steps,
            labels,
            prefix: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Tokens processed by the packed forward.
    pub fn token_count(&self) -> usize {
        self.steps.iter().map(|p| p.layout.len() + HORIZON).sum()
    }
}

struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wqkv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct Bound {
    vars: Vec<Var>,
    tok: Var,
    pos: Var,
    obs_proj: Var,
    obs_bias: Var,
    sentinel: Option<Var>,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
    head_b: Var,
}

/// Keys and values of the memory carried into a step, per layer.
type MemVars = Vec<(Var, Var)>;

struct PackedOut {
    logits: Var,
    memory: Option<MemVars>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub params: ParamStore,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, l) = (cfg.dim, cfg.layers);
        let hidden = c * cfg.mlp_ratio;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = inv(c) / (2.0 * l as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("tok_emb", Tensor::randn(&[cfg.vocab_size, c], 0.1, &mut rng));
        p.insert("pos_emb", Tensor::randn(&[cfg.positions(), c], 0.1, &mut rng));
        p.insert("obs_proj", Tensor::randn(&[cfg.obs_dim, c], inv(cfg.obs_dim), &mut rng));
        p.insert("obs_bias", Tensor::zeros(&[c]));
        if cfg.memory_mode == MemoryMode::Recursive {
            p.insert("sentinel", Tensor::randn(&[cfg.sentinels, c], 0.1, &mut rng));
        }
        for i in 0..l {
            p.insert(format!("layer{i}.ln1_g"), Tensor::full(&[c], 1.0));
            p.insert(format!("layer{i}.ln1_b"), Tensor::zeros(&[c]));
            p.insert(format!("layer{i}.wqkv"), Tensor::randn(&[c, 3 * c], inv(c), &mut rng));
            p.insert(format!("layer{i}.wo"), Tensor::randn(&[c, c], resid, &mut rng));
            p.insert(format!("layer{i}.ln2_g"), Tensor::full(&[c], 1.0));
            p.insert(format!("layer{i}.ln2_b"), Tensor::zeros(&[c]));
            p.insert(format!("layer{i}.mlp_w1"), Tensor::randn(&[c, hidden], inv(c), &mut rng));
            p.insert(format!("layer{i}.mlp_b1"), Tensor::zeros(&[hidden]));
            p.insert(format!("layer{i}.mlp_w2"), Tensor::randn(&[hidden, c], inv(hidden) / (2.0 * l as f64).sqrt(), &mut rng));
            p.insert(format!("layer{i}.mlp_b2"), Tensor::zeros(&[c]));
        }
        p.insert("lnf_g", Tensor::full(&[c], 1.0));
        p.insert("lnf_b", Tensor::zeros(&[c]));
        p.insert("head_w", Tensor::zeros(&[c, 4]));
        p.insert("head_b", Tensor::zeros(&[4]));
        Ok(Self { cfg, params: p })
    }

    /// Wraps loaded parameters after checking names and shapes against a
    /// fresh initialisation.
    pub fn from_params(cfg: PolicyConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(cfg.clone(), 0)?;
        reference.params.check_layout(&params)?;
        Ok(Self { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (_, t) in self.params.iter() {
            let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            vars.push(v);
        }
        let get = |name: &str| -> Result<Var> {
            self.params
                .index_of(name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
        };
        let layers = (0..self.cfg.layers)
            .map(|i| {
                Ok(LayerVars {
                    ln1_g: get(&format!("layer{i}.ln1_g"))?,
                    ln1_b: get(&format!("layer{i}.ln1_b"))?,
                    wqkv: get(&format!("layer{i}.wqkv"))?,
                    wo: get(&format!("layer{i}.wo"))?,
                    ln2_g: get(&format!("layer{i}.ln2_g"))?,
                    ln2_b: get(&format!("layer{i}.ln2_b"))?,
                    w1: get(&format!("layer{i}.mlp_w1"))?,
                    b1: get(&format!("layer{i}.mlp_b1"))?,
                    w2: get(&format!("layer{i}.mlp_w2"))?,
                    b2: get(&format!("layer{i}.mlp_b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound {
            tok: get("tok_emb")?,
            pos: get("pos_emb")?,
            obs_proj: get("obs_proj")?,
            obs_bias: get("obs_bias")?,
            sentinel: match self.cfg.memory_mode {
                MemoryMode::Recursive => Some(get("sentinel")?),
                MemoryMode::Progressive => None,
            },
            layers,
            lnf_g: get("lnf_g")?,
            lnf_b: get("lnf_b")?,
            head_w: get("head_w")?,
            head_b: get("head_b")?,
            vars,
        })
    }

    fn mlp_block(&self, tape: &mut Tape, lv: &LayerVars, x: Var) -> Result<Var> {
        let h = tape.layernorm(x, lv.ln2_g, lv.ln2_b)?;
        let h = tape.matmul(h, lv.w1)?;
        let h = tape.add(h, lv.b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, lv.w2)?;
        let h = tape.add(h, lv.b2)?;
        tape.add(x, h)
    }

    /// Sentinel tokens run alone (causally among themselves); their per-layer
    /// keys/values form the initial recursive memory.
    fn initial_memory_on(&self, tape: &mut Tape, b: &Bound) -> Result<MemVars> {
        let m = self.cfg.sentinels;
        let c = self.cfg.dim;
        let sentinel = b
            .sentinel
            .ok_or_else(|| Error::Config("initial recursive memory needs recursive mode".into()))?;
        let pos_idx: Vec<usize> = (0..m).map(|i| self.cfg.sent_pos0() + i).collect();
        let pos = tape.embedding(b.pos, &pos_idx)?;
        let mut x = tape.add(sentinel, pos)?;
        let mask = BlockSparseMask::causal(m);
        let mut out = Vec::with_capacity(self.cfg.layers);
        for lv in &b.layers {
            let h = tape.layernorm(x, lv.ln1_g, lv.ln1_b)?;
            let qkv = tape.matmul(h, lv.wqkv)?;
            let q = tape.slice_cols(qkv, 0, c)?;
            let k = tape.slice_cols(qkv, c, c)?;
            let v = tape.slice_cols(qkv, 2 * c, c)?;
            out.push((k, v));
            let att = attend_on_tape(tape, q, k, v, self.cfg.heads, &mask)?;
            let proj = tape.matmul(att, lv.wo)?;
            x = tape.add(x, proj)?;
            x = self.mlp_block(tape, lv, x)?;
        }
        Ok(out)
    }

    fn check_prompt(&self, p: &Prompt) -> Result<()> {
        let cfg = &self.cfg;
        if p.layout.mode != cfg.memory_mode {
            return Err(Error::Config(format!(
                "{:?} prompt given to a {:?} policy",
                p.layout.mode, cfg.memory_mode
            )));
        }
        if p.obs.rows() != cfg.obs_tokens || p.layout.obs.len() != cfg.obs_tokens || p.obs.cols() != cfg.obs_dim {
            return Err(Error::Config(format!(
                "observation block {:?}, policy expects [{}, {}]",
                p.obs.shape(),
                cfg.obs_tokens,
                cfg.obs_dim
            )));
        }
        if p.instruction.len() > cfg.max_instruction_len || p.layout.instruction.len() != p.instruction.len() {
            return Err(Error::Config(format!(
                "instruction of {} tokens exceeds max_instruction_len {}",
                p.instruction.len(),
                cfg.max_instruction_len
            )));
        }
        match cfg.memory_mode {
            MemoryMode::Progressive => {
                if p.memory.rows() != p.layout.memory.len() || p.memory.rows() > cfg.memory_positions() {
                    return Err(Error::MemoryProtocol(format!(
                        "{} memory tokens exceed the budget of {}",
                        p.memory.rows(),
                        cfg.memory_positions()
                    )));
                }
                if p.memory.rows() > 0 && p.memory.cols() != cfg.obs_dim {
                    return Err(Error::dim("memory tokens", p.memory.shape(), &[cfg.obs_dim]));
                }
            }
            MemoryMode::Recursive => {
                if p.layout.memory.len() != cfg.sentinels || p.layout.sentinel.len() != cfg.sentinels {
                    return Err(Error::MemoryProtocol(format!(
                        "prompt reserves {} memory slots, policy has M = {}",
                        p.layout.memory.len(),
                        cfg.sentinels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forward over consecutive steps packed into one sequence.
    fn forward_packed(&self, tape: &mut Tape, b: &Bound, steps: &[&Prompt], incoming: Option<MemVars>) -> Result<PackedOut> {
        if steps.is_empty() {
            return Err(Error::Argument("packed forward needs at least one step".into()));
        }
        for p in steps {
            self.check_prompt(p)?;
        }
        let cfg = &self.cfg;
        let (c, a) = (cfg.dim, cfg.horizon);
        let recursive = cfg.memory_mode == MemoryMode::Recursive;
        let m = cfg.sentinels;

        // Content sources: projected visual rows, token rows, sentinel rows.
        let vis_rows: usize = steps.iter().map(|p| p.obs.rows() + p.memory.rows()).sum();
        let mut vis = Vec::with_capacity(vis_rows * cfg.obs_dim);
        let mut tok_ids = Vec::new();
        let mut sent_ids = Vec::new();
        enum Src {
            Vis(usize),
            Tok(usize),
            Sent(usize),
        }
        let mut order = Vec::new();
        let mut pos_idx = Vec::new();
        let mut lengths = Vec::with_capacity(steps.len());
        let mut act_rows = Vec::with_capacity(steps.len() * a);
        let mut pre_rows = Vec::new();
        let mut sent_rows = Vec::new();
        let mut offset = 0;
        for p in steps {
            let l = &p.layout;
            for r in 0..p.obs.rows() {
                vis.extend_from_slice(p.obs.row(r));
                order.push(Src::Vis(vis.len() / cfg.obs_dim - 1));
                pos_idx.push(r);
            }
            if recursive {
                pre_rows.push(offset + l.memory.start);
                for i in 0..m {
                    tok_ids.push(Vocab::MEM);
                    order.push(Src::Tok(tok_ids.len() - 1));
                    pos_idx.push(cfg.mem_pos0() + i);
                }
            } else {
                let n = p.memory.rows();
                let anchor = cfg.mem_pos0() + cfg.memory_positions() - n;
                for r in 0..n {
                    vis.extend_from_slice(p.memory.row(r));
                    order.push(Src::Vis(vis.len() / cfg.obs_dim - 1));
                    pos_idx.push(anchor + r);
                }
            }
            for (i, &id) in p.instruction.iter().enumerate() {
                if id >= cfg.vocab_size {
                    return Err(Error::Index {
                        what: "instruction token",
                        index: id,
                        bound: cfg.vocab_size,
                    });
                }
                tok_ids.push(id);
                order.push(Src::Tok(tok_ids.len() - 1));
                pos_idx.push(cfg.ins_pos0() + i);
            }
            if recursive {
                sent_rows.push(offset + l.sentinel.start);
                for i in 0..m {
                    sent_ids.push(i);
                    order.push(Src::Sent(sent_ids.len() - 1));
                    pos_idx.push(cfg.sent_pos0() + i);
                }
            }
            for i in 0..a {
                act_rows.push(offset + l.len() + i);
                tok_ids.push(Vocab::ACT);
                order.push(Src::Tok(tok_ids.len() - 1));
                pos_idx.push(cfg.act_pos0() + i);
            }
            lengths.push(l.len() + a);
            offset += l.len() + a;
        }
        debug_assert_eq!(order.len(), offset);

        let mut sources = Vec::new();
        let vis_n = vis.len() / cfg.obs_dim;
        if vis_n > 0 {
            let v = tape.constant(Tensor::from_parts(vec![vis_n, cfg.obs_dim], vis));
            let v = tape.matmul(v, b.obs_proj)?;
            sources.push(tape.add(v, b.obs_bias)?);
        }
        let tok_n = tok_ids.len();
        sources.push(tape.embedding(b.tok, &tok_ids)?);
        if recursive {
            let s = b.sentinel.ok_or_else(|| Error::Config("missing sentinel parameters".into()))?;
            sources.push(tape.embedding(s, &sent_ids)?);
        }
        let base = tape.concat_rows(&sources)?;
        let map: Vec<usize> = order
            .iter()
            .map(|s| match *s {
                Src::Vis(i) => i,
                Src::Tok(i) => vis_n + i,
                Src::Sent(i) => vis_n + tok_n + i,
            })
            .collect();
        let content = tape.embedding(base, &map)?;
        let pos = tape.embedding(b.pos, &pos_idx)?;
        let mut x = tape.add(content, pos)?;

        let mask = build_pack_mask(&lengths, &[])?;
        let incoming = match (recursive, incoming) {
            (true, Some(mem)) => Some(mem),
            (true, None) => Some(self.initial_memory_on(tape, b)?),
            (false, _) => None,
        };
        // Key/value row map: placeholder rows of step j read step j-1's
        // sentinel rows, or the incoming memory rows for the first step.
        let kv_map: Option<Vec<usize>> = recursive.then(|| {
            let total = offset;
            let mut map: Vec<usize> = (0..total).collect();
            for (j, &start) in pre_rows.iter().enumerate() {
                for i in 0..m {
                    map[start + i] = if j == 0 { total + i } else { sent_rows[j - 1] + i };
                }
            }
            map
        });

        let mut out_memory = Vec::new();
        for (li, lv) in b.layers.iter().enumerate() {
            let h = tape.layernorm(x, lv.ln1_g, lv.ln1_b)?;
            let qkv = tape.matmul(h, lv.wqkv)?;
            let q = tape.slice_cols(qkv, 0, c)?;
            let mut k = tape.slice_cols(qkv, c, c)?;
            let mut v = tape.slice_cols(qkv, 2 * c, c)?;
            if let (Some(map), Some(mem)) = (&kv_map, &incoming) {
                let (mk, mv) = mem[li];
                let kx = tape.concat_rows(&[k, mk])?;
                let vx = tape.concat_rows(&[v, mv])?;
                k = tape.embedding(kx, map)?;
                v = tape.embedding(vx, map)?;
                let last = *sent_rows.last().expect("at least one step");
                out_memory.push((tape.slice_rows(k, last, m)?, tape.slice_rows(v, last, m)?));
            }
            let att = attend_on_tape(tape, q, k, v, cfg.heads, &mask)?;
            let proj = tape.matmul(att, lv.wo)?;
            x = tape.add(x, proj)?;
            x = self.mlp_block(tape, lv, x)?;
        }
        let acts = tape.embedding(x, &act_rows)?;
        let hf = tape.layernorm(acts, b.lnf_g, b.lnf_b)?;
        let logits = tape.matmul(hf, b.head_w)?;
        let logits = tape.add(logits, b.head_b)?;
        Ok(PackedOut {
            logits,
            memory: recursive.then_some(out_memory),
        })
    }

    fn memory_constants(&self, tape: &mut Tape, mem: &RecursiveMemory) -> Result<MemVars> {
        if mem.sentinels != self.cfg.sentinels || mem.layers.len() != self.cfg.layers {
            return Err(Error::MemoryProtocol(format!(
                "memory has M = {} over {} layers, policy has M = {} over {}",
                mem.sentinels,
                mem.layers.len(),
                self.cfg.sentinels,
                self.cfg.layers
            )));
        }
        Ok(mem
            .layers
            .iter()
            .map(|l| (tape.constant(l.keys.clone()), tape.constant(l.values.clone())))
            .collect())
    }

    fn read_memory(tape: &Tape, vars: &MemVars, sentinels: usize, step: Option<usize>) -> Result<RecursiveMemory> {
        let layers = vars
            .iter()
            .map(|&(k, v)| LayerKv {
                keys: tape.value(k).clone(),
                values: tape.value(v).clone(),
            })
            .collect();
        RecursiveMemory::new(sentinels, layers, step)
    }

    /// Memory at the start of an episode.
    pub fn initial_memory(&self) -> Result<MemoryState> {
        match self.cfg.memory_mode {
            MemoryMode::Progressive => Ok(MemoryState::Progressive(ProgressiveMemory::new(self.cfg.group_size))),
            MemoryMode::Recursive => {
                let mut tape = Tape::new();
                let b = self.bind(&mut tape, false)?;
                let vars = self.initial_memory_on(&mut tape, &b)?;
                Ok(MemoryState::Recursive(Self::read_memory(&tape, &vars, self.cfg.sentinels, None)?))
            }
        }
    }

    /// One recursive step: injects `mem` at the placeholder, returns the plan
    /// and the sentinel keys/values of this step.
    pub fn recursive_step(&self, prompt: &Prompt, mem: &RecursiveMemory) -> Result<(ActionPlan, RecursiveMemory)> {
        if self.cfg.memory_mode != MemoryMode::Recursive {
            return Err(Error::Config("recursive_step on a progressive policy".into()));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let incoming = self.memory_constants(&mut tape, mem)?;
        let out = self.forward_packed(&mut tape, &b, &[prompt], Some(incoming))?;
        let step = mem.step_of_origin.map_or(0, |s| s + 1);
        let next = Self::read_memory(&tape, out.memory.as_ref().expect("recursive output"), self.cfg.sentinels, Some(step))?;
        Ok((ActionPlan::from_logits(tape.value(out.logits).clone()), next))
    }

    /// Greedy plan for one step. Progressive memory is already part of the
    /// prompt, so the state is returned unchanged in that mode.
    pub fn predict(&self, prompt: &Prompt, mem: &MemoryState) -> Result<(ActionPlan, MemoryState)> {
        if mem.mode() != self.cfg.memory_mode || prompt.layout.mode != self.cfg.memory_mode {
            return Err(Error::Config(format!(
                "policy is {:?}, got {:?} memory and a {:?} prompt",
                self.cfg.memory_mode,
                mem.mode(),
                prompt.layout.mode
            )));
        }
        match mem {
            MemoryState::Recursive(r) => {
                let (plan, next) = self.recursive_step(prompt, r)?;
                Ok((plan, MemoryState::Recursive(next)))
            }
            MemoryState::Progressive(_) => {
                let mut tape = Tape::new();
                let b = self.bind(&mut tape, false)?;
                let out = self.forward_packed(&mut tape, &b, &[prompt], None)?;
                Ok((ActionPlan::from_logits(tape.value(out.logits).clone()), mem.clone()))
            }
        }
    }

    fn incoming_for(&self, batch: &PackedBatch) -> Result<Option<RecursiveMemory>> {
        if self.cfg.memory_mode != MemoryMode::Recursive || batch.prefix.is_empty() {
            return Ok(None);
        }
        let MemoryState::Recursive(mut mem) = self.initial_memory()? else { unreachable!() };
        for p in &batch.prefix {
            mem = self.recursive_step(p, &mem)?.1;
        }
        Ok(Some(mem))
    }

    fn targets(&self, batch: &PackedBatch) -> Result<Vec<usize>> {
        if batch.labels.len() != batch.steps.len() {
            return Err(Error::Data(format!(
                "{} steps but {} label plans",
                batch.steps.len(),
                batch.labels.len()
            )));
        }
        let mut t = Vec::with_capacity(batch.steps.len() * self.cfg.horizon);
        for (i, plan) in batch.labels.iter().enumerate() {
            if plan.len() != self.cfg.horizon {
                return Err(Error::Data(format!("step {i} has {} labels, expected {}", plan.len(), self.cfg.horizon)));
            }
            t.extend(plan.iter().map(|a| a.index()));
        }
        Ok(t)
    }

    /// Logits `[steps*A x 4]` of a packed forward, without gradient.
    pub fn packed_logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        let incoming = self.incoming_for(batch)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let inc = incoming.map(|m| self.memory_constants(&mut tape, &m)).transpose()?;
        let refs: Vec<&Prompt> = batch.steps.iter().collect();
        let out = self.forward_packed(&mut tape, &b, &refs, inc)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Records the mean cross-entropy of a chunk on `tape` with trainable
    /// parameters. Returns the loss node and the parameter leaves.
    pub fn loss_on_chunk(&self, tape: &mut Tape, batch: &PackedBatch) -> Result<(Var, Vec<Var>)> {
        let targets = self.targets(batch)?;
        let incoming = self.incoming_for(batch)?;
        let b = self.bind(tape, true)?;
        let inc = incoming.map(|m| self.memory_constants(tape, &m)).transpose()?;
        let refs: Vec<&Prompt> = batch.steps.iter().collect();
        let out = self.forward_packed(tape, &b, &refs, inc)?;
        let loss = tape.cross_entropy(out.logits, &targets)?;
        Ok((loss, b.vars))
    }

    pub fn loss(&self, batch: &PackedBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.loss_on_chunk(&mut tape, batch)?;
        Ok(tape.value(loss).item())
    }

    /// Loss and per-parameter gradients in store order.
    pub fn loss_and_grads(&self, batch: &PackedBatch) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (loss, vars) = self.loss_on_chunk(&mut tape, batch)?;
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
            .collect();
        Ok((tape.value(loss).item(), grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TokenGrid;
    use crate::memory::{assemble_progressive_prompt, assemble_recursive_prompt};
    use rand::Rng;

    fn grid(rng: &mut ChaCha8Rng, step: usize) -> TokenGrid {
        TokenGrid::new(5, 5, 8, (0..200).map(|_| rng.random_range(-1.0..1.0)).collect(), step).unwrap()
    }

    fn small(mode: MemoryMode) -> PolicyConfig {
        PolicyConfig {
            dim: 16,
            heads: 2,
            obs_dim: 8,
            memory_mode: mode,
            sentinels: 3,
            max_instruction_len: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_head_gives_uniform_logits_and_forward() {
        let p = Policy::new(small(MemoryMode::Progressive), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prompt = assemble_progressive_prompt(&grid(&mut rng, 0), &ProgressiveMemory::new(3), &[10, 11]);
        let mem = p.initial_memory().unwrap();
        let (plan, _) = p.predict(&prompt, &mem).unwrap();
        assert!(plan.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(plan.actions, vec![Action::Forward; 4]);
        let (again, _) = p.predict(&prompt, &mem).unwrap();
        assert_eq!(plan, again);
        let batch = PackedBatch::new(vec![prompt], vec![vec![Action::Stop; 4]]);
        assert!((p.loss(&batch).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let p = Policy::new(small(MemoryMode::Progressive), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prompt = assemble_recursive_prompt(&grid(&mut rng, 0), 3, &[10]);
        let mem = p.initial_memory().unwrap();
        assert!(matches!(p.predict(&prompt, &mem), Err(Error::Config(_))));
    }

    #[test]
    fn recursive_memory_shape_and_determinism() {
        let p = Policy::new(small(MemoryMode::Recursive), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = grid(&mut rng, 0);
        let prompt = assemble_recursive_prompt(&g, 3, &[10, 12]);
        let MemoryState::Recursive(m0) = p.initial_memory().unwrap() else { panic!() };
        let (_, m1) = p.recursive_step(&prompt, &m0).unwrap();
        let (_, m1b) = p.recursive_step(&prompt, &m0).unwrap();
        assert_eq!(m1, m1b);
        assert_eq!(m1.to_bytes().len(), m0.to_bytes().len());
        let wrong = RecursiveMemory::new(2, vec![m0.layers[0].span(0..2).unwrap(); 2], None).unwrap();
        assert!(matches!(p.recursive_step(&prompt, &wrong), Err(Error::MemoryProtocol(_))));
    }

    #[test]
    fn missing_labels_is_data_error() {
        let p = Policy::new(small(MemoryMode::Progressive), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prompt = assemble_progressive_prompt(&grid(&mut rng, 0), &ProgressiveMemory::new(3), &[10]);
        let batch = PackedBatch::new(vec![prompt], vec![vec![Action::Stop; 2]]);
        assert!(matches!(p.loss(&batch), Err(Error::Data(_))));
    }
}
