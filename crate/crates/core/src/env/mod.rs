//! Deterministic gridworld: discrete headings, unit forward moves, an
//! egocentric renderer, a BFS oracle and templated instructions.

mod instruction;
mod oracle;
mod render;
mod world;

pub use instruction::{generate_instruction, Instruction, InstructionRegime, RouteStep, Vocab};
pub use oracle::{oracle_action, oracle_plan, oracle_rollout, shortest_action_distance};
pub use render::{observe, CELL_PX, VIEW_DEPTH, VIEW_WIDTH};
pub use world::{GridWorld, WorldGenConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_EPISODE_STEPS: usize = 500;

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn step(self, h: Heading, n: i32) -> Cell {
        let (dx, dy) = h.delta();
        Cell::new(self.x + dx * n, self.y + dy * n)
    }

    pub fn distance(self, other: Cell) -> f64 {
        let (dx, dy) = ((self.x - other.x) as f64, (self.y - other.y) as f64);
        (dx * dx + dy * dy).sqrt()
    }
}

/// Compass heading; north is towards row 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn left(self) -> Heading {
        Heading::ALL[(self.index() + 3) % 4]
    }

    pub fn right(self) -> Heading {
        Heading::ALL[(self.index() + 1) % 4]
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn letter(self) -> char {
        ['N', 'E', 'S', 'W'][self.index()]
    }

    pub fn from_letter(s: &str) -> Result<Heading> {
        match s {
            "N" => Ok(Heading::North),
            "E" => Ok(Heading::East),
            "S" => Ok(Heading::South),
            "W" => Ok(Heading::West),
            _ => Err(Error::format("heading", format!("`{s}` is not one of N/E/S/W"))),
        }
    }
}

/// Discrete actions. The declaration order is the argmax tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Forward,
    Left,
    Right,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::Left, Action::Right, Action::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL.get(i).copied().ok_or(Error::Index {
            what: "action",
            index: i,
            bound: 4,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub cell: Cell,
    pub heading: Heading,
    pub step_count: usize,
    pub done: bool,
    /// True when the episode ended through an explicit `stop`.
    pub stopped: bool,
    /// Visited cells, appended whenever the agent moves.
    pub path: Vec<Cell>,
    pub max_steps: usize,
}

impl EnvState {
    pub fn start(world: &GridWorld) -> Self {
        Self::start_with_limit(world, MAX_EPISODE_STEPS)
    }

    pub fn start_with_limit(world: &GridWorld, max_steps: usize) -> Self {
        Self {
            cell: world.start,
            heading: world.start_heading,
            step_count: 0,
            done: false,
            stopped: false,
            path: vec![world.start],
            max_steps,
        }
    }

    /// Applies one action. Blocked forwards leave the cell unchanged but
    /// still consume a step; reaching the step limit ends the episode.
    pub fn step(&self, world: &GridWorld, action: Action) -> Result<EnvState> {
        if self.done {
            return Err(Error::Protocol(format!(
                "episode already finished after {} steps",
                self.step_count
            )));
        }
        let mut next = self.clone();
        next.step_count += 1;
        match action {
            Action::Forward => {
                let c = self.cell.step(self.heading, 1);
                if world.is_free(c) {
                    next.cell = c;
                    next.path.push(c);
                }
            }
            Action::Left => next.heading = self.heading.left(),
            Action::Right => next.heading = self.heading.right(),
            Action::Stop => {
                next.done = true;
                next.stopped = true;
            }
        }
        if next.step_count >= self.max_steps {
            next.done = true;
        }
        Ok(next)
    }

    /// Stable 64-bit digest of the (cell, heading, step) triple.
    pub fn state_hash(&self) -> u64 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [
            self.cell.x as i64,
            self.cell.y as i64,
            self.heading.index() as i64,
            self.step_count as i64,
        ] {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
