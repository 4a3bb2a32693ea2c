//! Experiment orchestration: flat TOML run config, deterministic world
//! splits, the stage-1 / DAgger / eval pipelines, manifests and plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dagger::{collect, oracle_trajectory, verify_labels, write_atomic, CollectConfig, EpisodeSpec, MixedPolicySchedule, Provenance, TrajectoryStore};
use crate::encoder::{EncoderConfig, ObservationEncoder};
use crate::env::{generate_instruction, oracle_rollout, GridWorld, InstructionRegime, Vocab, WorldGenConfig, CELL_PX, VIEW_DEPTH, VIEW_WIDTH};
use crate::error::{Error, Result};
use crate::memory::MemoryMode;
use crate::metrics::{EpisodeMetrics, MetricSummary};
use crate::policy::{Policy, PolicyConfig, HORIZON};
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::train::{check_instruction_fit, evaluate, evaluate_oracle, plan_accuracy, train, world_index, TrainConfig, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeMix {
    Short,
    Long,
    /// Alternates short and long by world index.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Dynamic,
}

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,

    pub world_seed: u64,
    pub world_width: usize,
    pub world_height: usize,
    pub wall_density: f64,
    pub min_path: usize,
    pub max_path: usize,
    pub landmarks: usize,
    pub regime: RegimeMix,
    pub train_worlds: usize,
    pub stage2_worlds: usize,
    pub eval_worlds: usize,

    pub memory_mode: MemoryMode,
    pub group_size: usize,
    pub sentinels: usize,
    pub stride: usize,
    pub window: usize,
    pub geometry_cache_limit: usize,
    pub patch_size: usize,
    pub encoder_seed: u64,

    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub obs_dim: usize,
    pub mlp_ratio: usize,
    pub max_instruction_len: usize,

    pub schedule: ScheduleKind,
    pub beta: f64,
    pub alpha: f64,

    pub chunk_len: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
    pub dagger_steps: u64,
    pub grad_clip: f64,

    pub success_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WorldGenConfig::default();
        let e = EncoderConfig::default();
        let p = PolicyConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world_seed: 0,
            world_width: w.width,
            world_height: w.height,
            wall_density: w.wall_density,
            min_path: w.min_path,
            max_path: w.max_path,
            landmarks: w.landmarks,
            regime: RegimeMix::Mixed,
            train_worlds: 200,
            stage2_worlds: 200,
            eval_worlds: 200,
            memory_mode: MemoryMode::Progressive,
            group_size: p.group_size,
            sentinels: p.sentinels,
            stride: e.stride,
            window: e.window,
            geometry_cache_limit: e.geometry_cache_limit,
            patch_size: e.patch_size,
            encoder_seed: 7,
            layers: p.layers,
            heads: p.heads,
            dim: p.dim,
            obs_dim: e.dim,
            mlp_ratio: p.mlp_ratio,
            max_instruction_len: p.max_instruction_len,
            schedule: ScheduleKind::Dynamic,
            beta: 0.25,
            alpha: 0.5,
            chunk_len: t.chunk_len,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            warmup_ratio: t.warmup_ratio,
            total_steps: 2000,
            dagger_steps: 600,
            grad_clip: t.grad_clip,
            success_threshold: 1.0,
        }
    }
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim().to_string())
}

/// Parses a flag value as a TOML scalar, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.into()),
            _ => e.into(),
        })?;
        Self::from_toml_str(&text)
    }

    /// Applies `key = value` overrides on top of a config text (empty text
    /// means defaults).
    pub fn from_parts(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(toml_error)?;
        for (k, v) in overrides {
            let key = k.replace('-', "_");
            table.insert(key, override_value(v));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.world_gen().validate()?;
        self.encoder_cfg().validate()?;
        let obs_tokens = self.obs_tokens()?;
        self.policy_cfg_with(obs_tokens, 8).validate()?;
        self.train_cfg(self.total_steps).validate()?;
        self.schedule().validate()?;
        if self.memory_mode == MemoryMode::Recursive && self.stride != HORIZON {
            return Err(Error::Config(format!(
                "recursive memory steps once per decision, so stride must be {HORIZON}, got {}",
                self.stride
            )));
        }
        if self.train_worlds == 0 || self.eval_worlds == 0 {
            return Err(Error::Config("train_worlds and eval_worlds must be >= 1".into()));
        }
        if [self.train_worlds, self.stage2_worlds, self.eval_worlds].iter().any(|&n| n >= 1 << 20) {
            return Err(Error::Config("world counts must stay below 2^20".into()));
        }
        if self.world_seed >= 1 << 20 {
            return Err(Error::Config("world_seed must stay below 2^20".into()));
        }
        if !(self.success_threshold > 0.0) {
            return Err(Error::Config("success_threshold must be > 0".into()));
        }
        Ok(())
    }

    pub fn world_gen(&self) -> WorldGenConfig {
        WorldGenConfig {
            width: self.world_width,
            height: self.world_height,
            wall_density: self.wall_density,
            min_path: self.min_path,
            max_path: self.max_path,
            landmarks: self.landmarks,
        }
    }

    pub fn encoder_cfg(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            dim: self.obs_dim,
            stride: self.stride,
            window: self.window,
            geometry_cache_limit: self.geometry_cache_limit,
        }
    }

    fn obs_tokens(&self) -> Result<usize> {
        let (r, c) = self.encoder_cfg().grid_shape(VIEW_DEPTH * CELL_PX, VIEW_WIDTH * CELL_PX)?;
        Ok(r * c)
    }

    fn policy_cfg_with(&self, obs_tokens: usize, vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            obs_dim: self.obs_dim,
            vocab_size,
            horizon: HORIZON,
            memory_mode: self.memory_mode,
            group_size: self.group_size,
            sentinels: self.sentinels,
            obs_tokens,
            max_instruction_len: self.max_instruction_len,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn policy_cfg(&self, vocab: &Vocab) -> Result<PolicyConfig> {
        Ok(self.policy_cfg_with(self.obs_tokens()?, vocab.len()))
    }

    pub fn train_cfg(&self, total_steps: u64) -> TrainConfig {
        TrainConfig {
            chunk_len: self.chunk_len,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_ratio: self.warmup_ratio,
            total_steps,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> MixedPolicySchedule {
        match self.schedule {
            ScheduleKind::Constant => MixedPolicySchedule::Constant { beta: self.beta },
            ScheduleKind::Dynamic => MixedPolicySchedule::Dynamic { alpha: self.alpha },
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Stage2,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Stage2 => "stage2",
            Split::Eval => "eval",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Stage2 => 2,
            Split::Eval => 3,
        }
    }
}

/// World id for index `i` of a split; splits never share ids.
pub fn world_id(split: Split, world_seed: u64, i: usize) -> u64 {
    (split.tag() << 40) | (world_seed << 20) | i as u64
}

pub fn split_of(id: u64) -> Option<Split> {
    match id >> 40 {
        1 => Some(Split::Train),
        2 => Some(Split::Stage2),
        3 => Some(Split::Eval),
        _ => None,
    }
}

/// Generated worlds and instructions of one split.
pub fn episode_specs(cfg: &RunConfig, split: Split) -> Result<Vec<EpisodeSpec>> {
    let n = match split {
        Split::Train => cfg.train_worlds,
        Split::Stage2 => cfg.stage2_worlds,
        Split::Eval => cfg.eval_worlds,
    };
    let gen = cfg.world_gen();
    let specs = (0..n)
        .map(|i| {
            let id = world_id(split, cfg.world_seed, i);
            let world = GridWorld::generate(&gen, id)?;
            let regime = match cfg.regime {
                RegimeMix::Short => InstructionRegime::Short,
                RegimeMix::Long => InstructionRegime::Long,
                RegimeMix::Mixed if i % 2 == 0 => InstructionRegime::Short,
                RegimeMix::Mixed => InstructionRegime::Long,
            };
            let (actions, _) = oracle_rollout(&world)?;
            let instruction = generate_instruction(&world, &actions, regime, id)?;
            Ok(EpisodeSpec { world, instruction })
        })
        .collect::<Result<Vec<_>>>()?;
    check_instruction_fit(&specs, cfg.max_instruction_len)?;
    Ok(specs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schedule: String,
    pub mean_length: f64,
    pub truncated: f64,
    pub oracle_fraction: f64,
    pub records: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub label: String,
    pub memory_mode: MemoryMode,
    pub config_hash: String,
    pub code_version: String,
    pub timings: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub sweep: Vec<SweepRow>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.into()),
            _ => e.into(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }

    /// The metric table, which is what seed replays must reproduce.
    pub fn metric_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k}={v:?}");
        }
        for row in &self.sweep {
            let _ = writeln!(s, "[{}] mean_length={:?} truncated={:?} oracle_fraction={:?} records={}", row.schedule, row.mean_length, row.truncated, row.oracle_fraction, row.records);
            for (k, v) in &row.metrics {
                let _ = writeln!(s, "[{}] {k}={v:?}", row.schedule);
            }
        }
        s
    }
}

fn summary_metrics(prefix: &str, m: &MetricSummary) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = m.rows().into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect();
    out.insert(format!("{prefix}count"), m.count as f64);
    out
}

/// A run rooted at `cfg.output_dir`.
pub struct Runner {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub encoder: ObservationEncoder,
    timings: BTreeMap<String, f64>,
    artifacts: BTreeMap<String, PathBuf>,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = ObservationEncoder::new(cfg.encoder_cfg(), cfg.encoder_seed)?;
        Ok(Self {
            cfg,
            vocab: Vocab::standard(),
            encoder,
            timings: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f(self)?;
        self.timings.insert(phase.into(), t.elapsed().as_secs_f64());
        Ok(r)
    }

    fn artifact(&mut self, name: &str, path: PathBuf) {
        self.artifacts.insert(name.into(), path);
    }

    fn begin(&mut self, command: &str) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.output_dir)?;
        self.timings.clear();
        self.artifacts.clear();
        let path = self.out(&format!("config_{command}.toml"));
        write_atomic(&path, self.cfg.to_toml().as_bytes())?;
        self.artifact("config", path);
        Ok(())
    }

    fn finish(&mut self, command: &str, label: String, metrics: BTreeMap<String, f64>, sweep: Vec<SweepRow>) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.into(),
            label,
            memory_mode: self.cfg.memory_mode,
            config_hash: self.cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            timings: std::mem::take(&mut self.timings),
            artifacts: std::mem::take(&mut self.artifacts),
            metrics,
            sweep,
        };
        for (name, p) in &manifest.artifacts {
            if !p.exists() {
                warn!("artifact `{name}` missing at run end");
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let path = self.out(&format!("manifest_{command}.json"));
        let json = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&path, json.as_bytes())?;
        Ok(manifest)
    }

    fn new_policy(&self) -> Result<Policy> {
        Policy::new(self.cfg.policy_cfg(&self.vocab)?, self.cfg.seed)
    }

    pub fn load_policy(&self, checkpoint: &Path) -> Result<Policy> {
        let params = load_checkpoint(checkpoint)?;
        Policy::from_params(self.cfg.policy_cfg(&self.vocab)?, params)
    }

    /// Writes world files, the vocabulary and an instruction listing.
    pub fn gen_worlds(&mut self) -> Result<RunManifest> {
        self.begin("gen_worlds")?;
        let mut metrics = BTreeMap::new();
        for split in [Split::Train, Split::Stage2, Split::Eval] {
            let specs = episode_specs(&self.cfg, split)?;
            let dir = self.out(&format!("worlds/{}", split.name()));
            std::fs::create_dir_all(&dir)?;
            let mut listing = String::new();
            for s in &specs {
                std::fs::write(dir.join(format!("{}.txt", s.world.id)), s.world.to_text())?;
                let _ = writeln!(listing, "{}\t{:?}\t{}", s.world.id, s.instruction.regime, s.instruction);
            }
            let list_path = dir.join("instructions.tsv");
            write_atomic(&list_path, listing.as_bytes())?;
            self.artifact(&format!("worlds_{}", split.name()), dir);
            self.artifact(&format!("instructions_{}", split.name()), list_path);
            metrics.insert(format!("{}_worlds", split.name()), specs.len() as f64);
            metrics.insert(
                format!("{}_mean_instruction_len", split.name()),
                specs.iter().map(|s| s.instruction.len() as f64).sum::<f64>() / specs.len().max(1) as f64,
            );
        }
        let vocab_path = self.out("vocab.txt");
        self.vocab.save(&vocab_path)?;
        self.artifact("vocab", vocab_path);
        self.finish("gen_worlds", "worlds".into(), metrics, Vec::new())
    }

    fn write_loss_curve(&mut self, name: &str, losses: &[f64]) -> Result<()> {
        let mut s = String::from("step\tloss\n");
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(s, "{}\t{l}", i + 1);
        }
        let path = self.out(name);
        write_atomic(&path, s.as_bytes())?;
        self.artifact(name.trim_end_matches(".tsv"), path);
        Ok(())
    }

    /// Behaviour cloning on oracle rollouts of the training split.
    pub fn train_stage1(&mut self) -> Result<RunManifest> {
        self.begin("train")?;
        let specs = episode_specs(&self.cfg, Split::Train)?;
        if let Some(s) = specs.iter().find(|s| split_of(s.world.id) != Some(Split::Train)) {
            return Err(Error::Data(format!("world {} is not a training world", s.world.id)));
        }
        let store = TrajectoryStore {
            trajectories: specs
                .iter()
                .map(|s| oracle_trajectory(s, self.cfg.seed, Provenance::Stage1))
                .collect::<Result<Vec<_>>>()?,
        };
        let store_path = self.out("stage1_store.jsonl");
        store.write(&store_path)?;
        self.artifact("stage1_store", store_path.clone());
        self.artifact("stage1_store_index", crate::dagger::index_path(&store_path));

        let mut policy = self.new_policy()?;
        let set = self.timed("build_samples", |r| {
            TrainingSet::build(&store, &world_index(&specs), &r.vocab, &r.encoder, &policy, r.cfg.seed, r.cfg.chunk_len)
        })?;
        let tcfg = self.cfg.train_cfg(self.cfg.total_steps);
        let report = self.timed("train", |_| {
            train(&mut policy, &set, &tcfg, |s, l| {
                if s % 100 == 0 {
                    info!("stage1 step {s} loss {l:.4}");
                }
            })
        })?;
        let ckpt = self.out("stage1.ckpt");
        save_checkpoint(&policy.params, &ckpt)?;
        self.artifact("checkpoint", ckpt);
        self.write_loss_curve("stage1_loss.tsv", &report.losses)?;

        let acc = self.timed("accuracy", |_| plan_accuracy(&policy, &set))?;
        let mut metrics = BTreeMap::new();
        metrics.insert("plan_accuracy".into(), acc);
        metrics.insert("final_loss".into(), report.losses.last().copied().unwrap_or(f64::NAN));
        metrics.insert("optimizer_steps".into(), report.steps as f64);
        metrics.insert("samples".into(), set.sample_count() as f64);
        metrics.insert("chunks".into(), set.chunks.len() as f64);
        metrics.insert("train_worlds".into(), specs.len() as f64);
        metrics.insert("mean_trajectory_length".into(), store.mean_length());
        self.finish("train", "stage1".into(), metrics, Vec::new())
    }

    /// One DAgger round per schedule: collect on the stage-2 pool with the
    /// given policy, aggregate with the stage-1 store, retrain from the
    /// checkpoint and evaluate.
    pub fn dagger(&mut self, checkpoint: &Path, schedules: &[MixedPolicySchedule]) -> Result<RunManifest> {
        self.begin("dagger")?;
        let base = self.load_policy(checkpoint)?;
        let stage1_path = self.out("stage1_store.jsonl");
        let stage1 = TrajectoryStore::read(&stage1_path)?;
        let stage2 = episode_specs(&self.cfg, Split::Stage2)?;
        let train_specs = episode_specs(&self.cfg, Split::Train)?;
        let eval_specs = episode_specs(&self.cfg, Split::Eval)?;
        let mut worlds = world_index(&train_specs);
        worlds.extend(world_index(&stage2));

        let single = schedules.len() == 1;
        let mut rows = Vec::new();
        for (k, schedule) in schedules.iter().enumerate() {
            schedule.validate()?;
            let tag = if single { String::new() } else { format!("_{k}") };
            let ccfg = CollectConfig {
                seed: self.cfg.seed,
                provenance: Provenance::Dagger,
                ..Default::default()
            };
            let delta = self.timed(&format!("collect{tag}"), |r| collect(&base, &r.encoder, &r.vocab, &stage2, schedule, &ccfg))?;
            let checked = verify_labels(&delta, &|id| worlds.get(&id).cloned())?;
            let agg = stage1.aggregate(&delta);
            let store_path = self.out(&format!("dagger_store{tag}.jsonl"));
            stage1.write(&store_path)?;
            delta.append_to(&store_path)?;
            self.artifact(&format!("dagger_store{tag}"), store_path);

            let mut policy = base.clone();
            let set = self.timed(&format!("build_samples{tag}"), |r| {
                TrainingSet::build(&agg, &worlds, &r.vocab, &r.encoder, &policy, r.cfg.seed, r.cfg.chunk_len)
            })?;
            let tcfg = self.cfg.train_cfg(self.cfg.dagger_steps);
            let report = self.timed(&format!("retrain{tag}"), |_| train(&mut policy, &set, &tcfg, |_, _| {}))?;
            let ckpt = self.out(&format!("dagger{tag}.ckpt"));
            save_checkpoint(&policy.params, &ckpt)?;
            self.artifact(&format!("checkpoint{tag}"), ckpt);
            self.write_loss_curve(&format!("dagger_loss{tag}.tsv"), &report.losses)?;

            let eval = self.timed(&format!("eval{tag}"), |r| {
                evaluate(&policy, &r.encoder, &r.vocab, &eval_specs, r.cfg.success_threshold, r.cfg.seed)
            })?;
            let summary = MetricSummary::aggregate(&eval);
            let records = delta.record_count();
            let oracle_records = delta
                .trajectories
                .iter()
                .flat_map(|t| &t.records)
                .filter(|r| r.source == crate::dagger::PlanSource::Oracle)
                .count();
            let mut metrics = summary_metrics("", &summary);
            metrics.insert("labels_verified".into(), checked as f64);
            metrics.insert("aggregate_trajectories".into(), agg.len() as f64);
            info!("{}: mean length {:.2}, sr {:.3}", schedule.label(), delta.mean_length(), summary.sr);
            rows.push(SweepRow {
                schedule: schedule.label(),
                mean_length: delta.mean_length(),
                truncated: delta.trajectories.iter().filter(|t| t.outcome.truncated).count() as f64 / delta.len().max(1) as f64,
                oracle_fraction: oracle_records as f64 / records.max(1) as f64,
                records,
                metrics,
            });
        }
        let table = sweep_table(&rows);
        let table_path = self.out("dagger_sweep.txt");
        write_atomic(&table_path, table.as_bytes())?;
        self.artifact("sweep_table", table_path);
        let mut metrics = BTreeMap::new();
        if let [row] = rows.as_slice() {
            metrics = row.metrics.clone();
            metrics.insert("mean_trajectory_length".into(), row.mean_length);
        }
        let label = if single { format!("stage1+dagger ({})", schedules[0].label()) } else { "dagger sweep".into() };
        self.finish("dagger", label, metrics, rows)
    }

    /// Greedy evaluation on the held-out split. `checkpoint = None`
    /// evaluates the oracle.
    pub fn eval(&mut self, checkpoint: Option<&Path>) -> Result<RunManifest> {
        self.begin("eval")?;
        let specs = episode_specs(&self.cfg, Split::Eval)?;
        let episodes: Vec<EpisodeMetrics> = match checkpoint {
            Some(c) => {
                let policy = self.load_policy(c)?;
                self.timed("eval", |r| evaluate(&policy, &r.encoder, &r.vocab, &specs, r.cfg.success_threshold, r.cfg.seed))?
            }
            None => self.timed("eval", |r| evaluate_oracle(&specs, r.cfg.success_threshold))?,
        };
        let summary = MetricSummary::aggregate(&episodes);
        let table_path = self.out("eval_report.txt");
        write_atomic(&table_path, summary.to_table().as_bytes())?;
        let kv_path = self.out("eval_report.kv");
        write_atomic(&kv_path, summary.to_kv().as_bytes())?;
        let episodes_path = self.out("eval_episodes.jsonl");
        let mut lines = String::new();
        for e in &episodes {
            lines.push_str(&serde_json::to_string(e)?);
            lines.push('\n');
        }
        write_atomic(&episodes_path, lines.as_bytes())?;
        self.artifact("report", table_path);
        self.artifact("report_kv", kv_path);
        self.artifact("episodes", episodes_path);
        let label = match checkpoint {
            Some(_) => format!("{:?}", self.cfg.memory_mode).to_lowercase(),
            None => "oracle".into(),
        };
        self.finish("eval", label, summary_metrics("", &summary), Vec::new())
    }
}

/// Table with one row per schedule.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let get = |r: &SweepRow, k: &str| r.metrics.get(k).copied().unwrap_or(f64::NAN);
    let mut s = format!(
        "{:<24}{:>12}{:>10}{:>10}{:>8}{:>8}{:>8}{:>8}{:>12}\n",
        "schedule", "mean_len", "trunc", "oracle", "sr", "osr", "spl", "ndtw", "infer_steps"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24}{:>12.2}{:>10.3}{:>10.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>12.2}",
            r.schedule,
            r.mean_length,
            r.truncated,
            r.oracle_fraction,
            get(r, "sr"),
            get(r, "osr"),
            get(r, "spl"),
            get(r, "ndtw"),
            get(r, "mean_decisions"),
        );
    }
    s
}

/// The four comparison schedules.
pub fn table_schedules() -> Vec<MixedPolicySchedule> {
    vec![
        MixedPolicySchedule::Constant { beta: 0.75 },
        MixedPolicySchedule::Constant { beta: 0.5 },
        MixedPolicySchedule::Constant { beta: 0.25 },
        MixedPolicySchedule::Dynamic { alpha: 0.5 },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotOutput {
    pub used: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub files: Vec<PathBuf>,
}

/// Scatter of SR against collected trajectory length, token-count bars by
/// memory mode and SR bars by data composition. Each figure comes with a
/// tab-separated data file.
pub fn plot(manifests: &[PathBuf], out_dir: &Path) -> Result<PlotOutput> {
    if manifests.is_empty() {
        return Err(Error::Argument("plot needs at least one manifest".into()));
    }
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    let mut loaded = Vec::new();
    for p in manifests {
        match RunManifest::read(p) {
            Ok(m) => {
                used.push(p.clone());
                loaded.push(m);
            }
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                skipped.push(p.clone());
            }
        }
    }
    if loaded.is_empty() {
        return Err(Error::format("manifest", "every manifest was skipped"));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut scatter = Vec::new();
    for m in &loaded {
        if m.sweep.is_empty() {
            let len = m.metrics.get("mean_trajectory_length").or(m.metrics.get("mean_steps"));
            if let (Some(&x), Some(&y)) = (len, m.metrics.get("sr")) {
                scatter.push((m.label.clone(), x, y));
            }
        } else {
            for r in &m.sweep {
                if let Some(&y) = r.metrics.get("sr") {
                    scatter.push((r.schedule.clone(), r.mean_length, y));
                }
            }
        }
    }
    let tokens: Vec<(String, f64)> = loaded
        .iter()
        .filter_map(|m| m.metrics.get("mean_tokens").map(|&v| (format!("{:?}", m.memory_mode).to_lowercase(), v)))
        .collect();
    let composition: Vec<(String, f64)> = loaded
        .iter()
        .flat_map(|m| {
            if m.sweep.is_empty() {
                m.metrics.get("sr").map(|&v| vec![(m.label.clone(), v)]).unwrap_or_default()
            } else {
                m.sweep.iter().filter_map(|r| r.metrics.get("sr").map(|&v| (format!("+dagger {}", r.schedule), v))).collect()
            }
        })
        .collect();

    let mut files = Vec::new();
    let mut data = String::from("label\tmean_length\tsr\n");
    for (l, x, y) in &scatter {
        let _ = writeln!(data, "{l}\t{x}\t{y}");
    }
    files.push(write_plot_file(out_dir, "sr_vs_length.tsv", &data)?);
    let svg = out_dir.join("sr_vs_length.svg");
    scatter_svg(&svg, "SR vs trajectory length", "mean trajectory length", "SR", &scatter)?;
    files.push(svg);
    for (name, title, y, bars) in [
        ("tokens_by_mode", "tokens per forward", "mean tokens", &tokens),
        ("sr_by_data", "SR by training data", "SR", &composition),
    ] {
        let mut data = format!("label\t{}\n", y.replace(' ', "_"));
        for (l, v) in bars.iter() {
            let _ = writeln!(data, "{l}\t{v}");
        }
        files.push(write_plot_file(out_dir, &format!("{name}.tsv"), &data)?);
        let svg = out_dir.join(format!("{name}.svg"));
        bars_svg(&svg, title, y, bars)?;
        files.push(svg);
    }
    Ok(PlotOutput { used, skipped, files })
}

fn write_plot_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    write_atomic(&p, contents.as_bytes())?;
    Ok(p)
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn axis_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if m > 0.0 {
        m * 1.1
    } else {
        1.0
    }
}

fn scatter_svg(path: &Path, title: &str, x_label: &str, y_label: &str, points: &[(String, f64, f64)]) -> Result<()> {
    use plotters::prelude::*;
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let xmax = axis_max(points.iter().map(|p| p.1));
    let ymax = axis_max(points.iter().map(|p| p.2));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..xmax, 0.0..ymax)
        .map_err(plot_error)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(plot_error)?;
    chart
        .draw_series(points.iter().map(|(label, x, y)| {
            EmptyElement::at((*x, *y)) + Circle::new((0, 0), 5, BLUE.filled()) + Text::new(label.clone(), (7, -14), ("sans-serif", 12))
        }))
        .map_err(plot_error)?;
    root.present().map_err(plot_error)
}

fn bars_svg(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<()> {
    use plotters::prelude::*;
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let ymax = axis_max(bars.iter().map(|b| b.1));
    let n = bars.len().max(1);
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..ymax)
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc(y_label)
        .x_labels(n)
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(plot_error)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let v = if v.is_finite() { *v } else { 0.0 };
            let mut r = Rectangle::new([(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v)], RED.mix(0.6).filled());
            r.set_margin(0, 0, 12, 12);
            r
        }))
        .map_err(plot_error)?;
    root.present().map_err(plot_error)
}
