//! Navigation metrics over cell paths: NE, SR, OSR, SPL and nDTW, plus the
//! per-run aggregate table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::Cell;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub agent_path: Vec<Cell>,
    pub reference_path: Vec<Cell>,
    pub goal: Cell,
    /// Success threshold d_th in cells.
    pub threshold: f64,
    pub stopped: bool,
}

pub fn navigation_error(rec: &EvalRecord) -> f64 {
    rec.agent_path.last().map_or(f64::INFINITY, |c| c.distance(rec.goal))
}

pub fn success(rec: &EvalRecord) -> bool {
    rec.stopped && navigation_error(rec) <= rec.threshold
}

pub fn oracle_success(rec: &EvalRecord) -> bool {
    rec.agent_path.iter().any(|c| c.distance(rec.goal) <= rec.threshold)
}

/// Sum of Euclidean segment lengths.
pub fn path_length(path: &[Cell]) -> f64 {
    path.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// `success * shortest / max(shortest, agent length)`; 0 when undefined.
pub fn spl(rec: &EvalRecord, shortest_length: f64) -> f64 {
    if !(shortest_length > 0.0) || !success(rec) {
        return 0.0;
    }
    let v = shortest_length / shortest_length.max(path_length(&rec.agent_path));
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

/// Dynamic time warping cost under Euclidean point distance.
pub fn dtw(a: &[Cell], b: &[Cell]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return if n == m { 0.0 } else { f64::INFINITY };
    }
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = a[i - 1].distance(b[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

pub fn ndtw(rec: &EvalRecord) -> f64 {
    let r = rec.reference_path.len().max(1) as f64;
    (-dtw(&rec.agent_path, &rec.reference_path) / (r * rec.threshold)).exp()
}

/// Metrics of one evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub world_id: u64,
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    pub ndtw: f64,
    /// Primitive steps executed.
    pub steps: usize,
    /// Policy forward passes.
    pub decisions: usize,
    pub mean_tokens: f64,
    pub max_tokens: usize,
}

impl EpisodeMetrics {
    pub fn from_record(world_id: u64, rec: &EvalRecord, steps: usize, token_counts: &[usize]) -> Self {
        let shortest = path_length(&rec.reference_path);
        Self {
            world_id,
            ne: navigation_error(rec),
            success: success(rec),
            oracle_success: oracle_success(rec),
            spl: spl(rec, shortest),
            ndtw: ndtw(rec),
            steps,
            decisions: token_counts.len(),
            mean_tokens: if token_counts.is_empty() {
                0.0
            } else {
                token_counts.iter().sum::<usize>() as f64 / token_counts.len() as f64
            },
            max_tokens: token_counts.iter().copied().max().unwrap_or(0),
        }
    }
}

/// Means over a set of episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub mean_steps: f64,
    pub mean_decisions: f64,
    pub mean_tokens: f64,
    pub max_tokens: usize,
}

fn finite_or_zero(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

impl MetricSummary {
    pub fn aggregate(episodes: &[EpisodeMetrics]) -> Self {
        let n = episodes.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| episodes.iter().map(|e| finite_or_zero(f(e))).sum::<f64>() / n as f64;
        let tokens_total: f64 = episodes.iter().map(|e| e.mean_tokens * e.decisions as f64).sum();
        let decisions_total: usize = episodes.iter().map(|e| e.decisions).sum();
        Self {
            count: n,
            ne: mean(&|e| e.ne),
            sr: mean(&|e| e.success as u8 as f64),
            osr: mean(&|e| e.oracle_success as u8 as f64),
            spl: mean(&|e| e.spl),
            ndtw: mean(&|e| e.ndtw),
            mean_steps: mean(&|e| e.steps as f64),
            mean_decisions: mean(&|e| e.decisions as f64),
            mean_tokens: if decisions_total == 0 { 0.0 } else { tokens_total / decisions_total as f64 },
            max_tokens: episodes.iter().map(|e| e.max_tokens).max().unwrap_or(0),
        }
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("ne", self.ne),
            ("sr", self.sr),
            ("osr", self.osr),
            ("spl", self.spl),
            ("ndtw", self.ndtw),
            ("mean_steps", self.mean_steps),
            ("mean_decisions", self.mean_decisions),
            ("mean_tokens", self.mean_tokens),
            ("max_tokens", self.max_tokens as f64),
        ]
    }

    /// Fixed-width `metric mean count` table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16}{:>14}{:>8}\n", "metric", "mean", "count");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k:<16}{v:>14.6}{:>8}", self.count);
        }
        s
    }

    /// `key=value` lines with full-precision values.
    pub fn to_kv(&self) -> String {
        let mut s = format!("count={}\n", self.count);
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k}={v:?}");
        }
        s
    }
}
