//! Mixed-policy trajectory collection with oracle relabelling, and the
//! append-only trajectory store (JSONL plus a byte-offset sidecar).

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::ObservationEncoder;
use crate::env::{oracle_plan, oracle_rollout, Action, Cell, EnvState, GridWorld, Heading, Instruction, InstructionRegime, Vocab};
use crate::episode::{cache_seed, execute_plan, replay_state, PolicyAgent};
use crate::error::{Error, Result};
use crate::policy::{Policy, HORIZON};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MixedPolicySchedule {
    Constant { beta: f64 },
    Dynamic { alpha: f64 },
}

impl MixedPolicySchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Constant { beta } if !(0.0..=1.0).contains(&beta) => {
                Err(Error::Config(format!("constant beta {beta} outside [0, 1]")))
            }
            Self::Dynamic { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                Err(Error::Config(format!("dynamic alpha {alpha} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Self::Constant { beta } => format!("constant beta={beta}"),
            Self::Dynamic { alpha } => format!("dynamic alpha={alpha}"),
        }
    }
}

/// Oracle probability at decision `t` of an episode whose oracle needs `T`
/// plans.
pub fn beta_at(schedule: &MixedPolicySchedule, t: usize, total: usize) -> Result<f64> {
    schedule.validate()?;
    if total == 0 {
        return Err(Error::Argument("T must be >= 1".into()));
    }
    Ok(match *schedule {
        MixedPolicySchedule::Constant { beta } => beta,
        MixedPolicySchedule::Dynamic { alpha } => 1.0 - alpha.powf(t as f64 / total as f64),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Stage1,
    Dagger,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSource {
    Oracle,
    Policy,
}

/// One decision point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub cell: Cell,
    pub heading: Heading,
    pub state_hash: u64,
    /// Actions actually taken, truncated at `stop` or episode end.
    pub executed: Vec<Action>,
    /// Oracle plan for the state.
    pub label: Vec<Action>,
    pub source: PlanSource,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    /// Primitive steps executed.
    pub steps: usize,
    pub stopped: bool,
    pub truncated: bool,
    pub final_cell: Cell,
    pub path: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub world_id: u64,
    pub seed: u64,
    pub provenance: Provenance,
    pub regime: InstructionRegime,
    pub instruction: Vec<String>,
    /// Oracle plan count `T` for the world.
    pub oracle_plans: usize,
    pub records: Vec<StepRecord>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.outcome.steps
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A world paired with its instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub world: GridWorld,
    pub instruction: Instruction,
}

impl EpisodeSpec {
    pub fn token_ids(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        self.instruction.ids(vocab)
    }
}

/// Number of `HORIZON`-action plans the oracle needs from the start.
pub fn oracle_plan_count(world: &GridWorld) -> Result<usize> {
    let (actions, _) = oracle_rollout(world)?;
    Ok(actions.len().div_ceil(HORIZON))
}

fn finish(spec: &EpisodeSpec, seed: u64, provenance: Provenance, records: Vec<StepRecord>, end: &EnvState) -> Result<Trajectory> {
    Ok(Trajectory {
        world_id: spec.world.id,
        seed,
        provenance,
        regime: spec.instruction.regime,
        instruction: spec.instruction.tokens.clone(),
        oracle_plans: oracle_plan_count(&spec.world)?,
        records,
        outcome: Outcome {
            steps: end.step_count,
            stopped: end.stopped,
            truncated: !end.stopped,
            final_cell: end.cell,
            path: end.path.clone(),
        },
    })
}

fn record(state: &EnvState, executed: Vec<Action>, label: Vec<Action>, source: PlanSource) -> StepRecord {
    StepRecord {
        step: state.step_count,
        cell: state.cell,
        heading: state.heading,
        state_hash: state.state_hash(),
        executed,
        label,
        source,
    }
}

/// Pure oracle episode (behaviour-cloning data).
pub fn oracle_trajectory(spec: &EpisodeSpec, seed: u64, provenance: Provenance) -> Result<Trajectory> {
    let world = &spec.world;
    let mut state = EnvState::start(world);
    let mut records = Vec::new();
    while !state.done {
        let plan = oracle_plan(world, &state, HORIZON)?;
        let (next, taken) = execute_plan(world, &state, &plan)?;
        records.push(record(&state, taken, plan, PlanSource::Oracle));
        state = next;
    }
    finish(spec, seed, provenance, records, &state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectConfig {
    pub seed: u64,
    pub max_steps: usize,
    pub provenance: Provenance,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_steps: crate::env::MAX_EPISODE_STEPS,
            provenance: Provenance::Dagger,
        }
    }
}

/// One mixed-policy episode. Each decision draws `u ~ U(0, 1)` and runs the
/// oracle plan when `u < β_t`, the learned plan otherwise; the learned
/// policy is queried at every decision so its memory stays in sync.
pub fn collect_episode(
    policy: &Policy,
    encoder: &ObservationEncoder,
    vocab: &Vocab,
    spec: &EpisodeSpec,
    schedule: &MixedPolicySchedule,
    cfg: &CollectConfig,
    episode: u64,
) -> Result<Trajectory> {
    schedule.validate()?;
    let world = &spec.world;
    let seed = cfg.seed ^ episode.wrapping_mul(0xd1b5_4a32_d192_ed03);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = oracle_plan_count(world)?;
    let mut agent = PolicyAgent::new(policy, encoder, spec.token_ids(vocab)?, cache_seed(seed, world.id))?;
    let mut state = EnvState::start_with_limit(world, cfg.max_steps);
    let mut records = Vec::new();
    let mut t = 0;
    while !state.done {
        let label = oracle_plan(world, &state, HORIZON)?;
        let (learned, _) = agent.plan(world, &state)?;
        let u: f64 = rng.random();
        let (plan, source) = if u < beta_at(schedule, t, total)? {
            (label.clone(), PlanSource::Oracle)
        } else {
            (learned.actions, PlanSource::Policy)
        };
        let (next, taken) = execute_plan(world, &state, &plan)?;
        records.push(record(&state, taken, label, source));
        state = next;
        t += 1;
    }
    finish(spec, seed, cfg.provenance, records, &state)
}

/// Collects one episode per spec in parallel; results keep spec order.
pub fn collect(
    policy: &Policy,
    encoder: &ObservationEncoder,
    vocab: &Vocab,
    specs: &[EpisodeSpec],
    schedule: &MixedPolicySchedule,
    cfg: &CollectConfig,
) -> Result<TrajectoryStore> {
    let trajectories = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| collect_episode(policy, encoder, vocab, spec, schedule, cfg, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryStore { trajectories })
}

/// Recomputes the oracle plan at every stored state; returns the number of
/// records checked, or a data error naming the first mismatch.
pub fn verify_labels(store: &TrajectoryStore, worlds: &dyn Fn(u64) -> Option<GridWorld>) -> Result<usize> {
    let mut checked = 0;
    for (ti, traj) in store.trajectories.iter().enumerate() {
        let world = worlds(traj.world_id).ok_or_else(|| Error::Data(format!("unknown world {}", traj.world_id)))?;
        for r in &traj.records {
            let state = replay_state(&world, r.cell, r.heading, r.step);
            if state.state_hash() != r.state_hash {
                return Err(Error::Data(format!("trajectory {ti} step {}: state hash mismatch", r.step)));
            }
            if oracle_plan(&world, &state, HORIZON)? != r.label {
                return Err(Error::Data(format!("trajectory {ti} step {}: label differs from oracle", r.step)));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrajectoryStore {
    pub trajectories: Vec<Trajectory>,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}

impl TrajectoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn record_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.records.len()).sum()
    }

    pub fn mean_length(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.len() as f64).sum::<f64>() / self.len() as f64
    }

    /// Union keeping both sides' trajectories in order.
    pub fn aggregate(&self, delta: &TrajectoryStore) -> TrajectoryStore {
        let mut trajectories = self.trajectories.clone();
        trajectories.extend(delta.trajectories.iter().cloned());
        TrajectoryStore { trajectories }
    }

    fn encode_lines(&self, mut offset: u64) -> Result<(Vec<u8>, Vec<u64>)> {
        let mut bytes = Vec::new();
        let mut offsets = Vec::with_capacity(self.len());
        for t in &self.trajectories {
            offsets.push(offset);
            let line = serde_json::to_vec(t)?;
            offset += line.len() as u64 + 1;
            bytes.extend_from_slice(&line);
            bytes.push(b'\n');
        }
        Ok((bytes, offsets))
    }

    /// Writes the store and its index, replacing existing files.
    pub fn write(&self, path: &Path) -> Result<()> {
        let (bytes, offsets) = self.encode_lines(0)?;
        write_atomic(path, &bytes)?;
        write_atomic(&index_path(path), offsets_text(&offsets).as_bytes())
    }

    /// Appends to an existing store file without touching earlier bytes.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let start = match std::fs::metadata(path) {
            Ok(m) => m.len(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        let (bytes, offsets) = self.encode_lines(start)?;
        OpenOptions::new().create(true).append(true).open(path)?.write_all(&bytes)?;
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(index_path(path))?
            .write_all(offsets_text(&offsets).as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = open_existing(path)?;
        let mut trajectories = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            trajectories.push(
                serde_json::from_str(&line).map_err(|e| Error::format("trajectory store", format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self { trajectories })
    }

    pub fn read_offsets(path: &Path) -> Result<Vec<u64>> {
        let text = std::fs::read_to_string(index_path(path)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(index_path(path)),
            _ => e.into(),
        })?;
        text.lines()
            .map(|l| l.trim().parse::<u64>().map_err(|e| Error::format("trajectory index", e.to_string())))
            .collect()
    }

    /// Reads the `i`-th trajectory through the index.
    pub fn read_one(path: &Path, i: usize) -> Result<Trajectory> {
        let offsets = Self::read_offsets(path)?;
        let &off = offsets.get(i).ok_or(Error::Index {
            what: "trajectory",
            index: i,
            bound: offsets.len(),
        })?;
        let mut f = open_existing(path)?;
        f.seek(SeekFrom::Start(off))?;
        let mut line = String::new();
        BufReader::new(&mut f).read_line(&mut line)?;
        serde_json::from_str(line.trim_end()).map_err(|e| Error::format("trajectory store", e.to_string()))
    }
}

fn offsets_text(offsets: &[u64]) -> String {
    offsets.iter().map(|o| format!("{o}\n")).collect()
}

fn open_existing(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.into()),
        _ => e.into(),
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
