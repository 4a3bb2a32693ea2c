use std::collections::VecDeque;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cell, Heading, COLOR_NAMES};
use crate::error::{Error, Result};

/// Parameters of the random world generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldGenConfig {
    pub width: usize,
    pub height: usize,
    pub wall_density: f64,
    /// Inclusive range of start-to-goal move distances.
    pub min_path: usize,
    pub max_path: usize,
    /// Distractor landmarks besides the goal marker.
    pub landmarks: usize,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        Self {
            width: 9,
            height: 9,
            wall_density: 0.2,
            min_path: 3,
            max_path: 8,
            landmarks: 2,
        }
    }
}

impl WorldGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.height < 3 {
            return Err(Error::Config("world must be at least 3x3".into()));
        }
        if !(0.0..0.9).contains(&self.wall_density) {
            return Err(Error::Config(format!("wall_density {} outside [0, 0.9)", self.wall_density)));
        }
        if self.min_path == 0 || self.min_path > self.max_path {
            return Err(Error::Config(format!(
                "path range {}..={} is empty",
                self.min_path, self.max_path
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridWorld {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    pub start: Cell,
    pub start_heading: Heading,
    pub goal: Cell,
    pub goal_color: u8,
    pub landmarks: Vec<(Cell, u8)>,
    /// Shortest action distance to the goal per (cell, heading).
    distance: Vec<u32>,
}

pub(crate) const UNREACHABLE: u32 = u32::MAX;

impl GridWorld {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u64,
        width: usize,
        height: usize,
        walls: Vec<bool>,
        start: Cell,
        start_heading: Heading,
        goal: Cell,
        goal_color: u8,
        mut landmarks: Vec<(Cell, u8)>,
    ) -> Result<Self> {
        landmarks.sort_by_key(|(c, _)| (c.y, c.x));
        if walls.len() != width * height {
            return Err(Error::dim("world grid", &[height, width], &[walls.len()]));
        }
        let mut w = GridWorld {
            id,
            width,
            height,
            walls,
            start,
            start_heading,
            goal,
            goal_color,
            landmarks,
            distance: Vec::new(),
        };
        if !w.is_free(start) || !w.is_free(goal) {
            return Err(Error::format("world", "start and goal must be free cells"));
        }
        if goal_color as usize >= COLOR_NAMES.len() {
            return Err(Error::format("world", format!("goal colour {goal_color} out of range")));
        }
        w.distance = w.compute_distance_field();
        if w.distance_to_goal(start, start_heading) == UNREACHABLE {
            return Err(Error::Oracle(format!("goal unreachable in world {id}")));
        }
        Ok(w)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.walls[c.y as usize * self.width + c.x as usize]
    }

    pub fn landmark_at(&self, c: Cell) -> Option<u8> {
        if c == self.goal {
            return Some(self.goal_color);
        }
        self.landmarks.iter().find(|(l, _)| *l == c).map(|&(_, col)| col)
    }

    /// Copy of the world with one cell's wall flag changed.
    pub fn with_wall(&self, c: Cell, wall: bool) -> Result<Self> {
        let mut walls = self.walls.clone();
        if !self.in_bounds(c) {
            return Err(Error::Argument(format!("{c:?} out of bounds")));
        }
        walls[c.y as usize * self.width + c.x as usize] = wall;
        GridWorld::new(
            self.id,
            self.width,
            self.height,
            walls,
            self.start,
            self.start_heading,
            self.goal,
            self.goal_color,
            self.landmarks.clone(),
        )
    }

    fn state_index(&self, c: Cell, h: Heading) -> usize {
        (c.y as usize * self.width + c.x as usize) * 4 + h.index()
    }

    pub(crate) fn distance_to_goal(&self, c: Cell, h: Heading) -> u32 {
        if !self.is_free(c) {
            return UNREACHABLE;
        }
        self.distance[self.state_index(c, h)]
    }

    /// Reverse BFS over the (cell, heading) graph from every goal state.
    fn compute_distance_field(&self) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.width * self.height * 4];
        let mut queue = VecDeque::new();
        for h in Heading::ALL {
            let i = self.state_index(self.goal, h);
            dist[i] = 0;
            queue.push_back((self.goal, h));
        }
        while let Some((c, h)) = queue.pop_front() {
            let d = dist[self.state_index(c, h)];
            let back = c.step(h, -1);
            let preds = [(c, h.right()), (c, h.left()), (back, h)];
            for (pc, ph) in preds {
                if !self.is_free(pc) {
                    continue;
                }
                let i = self.state_index(pc, ph);
                if dist[i] == UNREACHABLE {
                    dist[i] = d + 1;
                    queue.push_back((pc, ph));
                }
            }
        }
        dist
    }

    /// Number of forward moves on a shortest 4-connected path between cells.
    pub fn move_distance(&self, from: Cell, to: Cell) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let idx = |c: Cell| c.y as usize * self.width + c.x as usize;
        if !self.is_free(from) {
            return None;
        }
        dist[idx(from)] = 0;
        let mut q = VecDeque::from([from]);
        while let Some(c) = q.pop_front() {
            if c == to {
                return Some(dist[idx(c)]);
            }
            for h in Heading::ALL {
                let n = c.step(h, 1);
                if self.is_free(n) && dist[idx(n)] == usize::MAX {
                    dist[idx(n)] = dist[idx(c)] + 1;
                    q.push_back(n);
                }
            }
        }
        None
    }

    /// Generates a connected world from a seed.
    pub fn generate(cfg: &WorldGenConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let (w, h) = (cfg.width, cfg.height);
            let mut walls = vec![false; w * h];
            for y in 0..h {
                for x in 0..w {
                    let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
                    walls[y * w + x] = border || rng.random_bool(cfg.wall_density);
                }
            }
            let free: Vec<Cell> = (0..h)
                .flat_map(|y| (0..w).map(move |x| Cell::new(x as i32, y as i32)))
                .filter(|c| !walls[c.y as usize * w + c.x as usize])
                .collect();
            if free.len() < 2 {
                continue;
            }
            let start = *free.choose(&mut rng).unwrap();
            let probe = GridWorld {
                id: seed,
                width: w,
                height: h,
                walls: walls.clone(),
                start,
                start_heading: Heading::North,
                goal: start,
                goal_color: 0,
                landmarks: Vec::new(),
                distance: Vec::new(),
            };
            let candidates: Vec<Cell> = free
                .iter()
                .copied()
                .filter(|&c| {
                    probe
                        .move_distance(start, c)
                        .is_some_and(|d| (cfg.min_path..=cfg.max_path).contains(&d))
                })
                .collect();
            let Some(&goal) = candidates.choose(&mut rng) else { continue };
            let heading = Heading::ALL[rng.random_range(0..4)];
            let goal_color = rng.random_range(0..COLOR_NAMES.len()) as u8;
            let mut spots: Vec<Cell> = free.iter().copied().filter(|&c| c != start && c != goal).collect();
            spots.shuffle(&mut rng);
            let others: Vec<u8> = (0..COLOR_NAMES.len() as u8).filter(|&c| c != goal_color).collect();
            let landmarks = spots
                .into_iter()
                .take(cfg.landmarks)
                .map(|c| (c, *others.choose(&mut rng).unwrap()))
                .collect();
            return GridWorld::new(seed, w, h, walls, start, heading, goal, goal_color, landmarks);
        }
        Err(Error::Config(format!("could not generate a world for seed {seed}")))
    }

    /// Plain-text grid: header line, then rows of `#` wall, `.` free,
    /// `S` start, `G` goal and digits for landmark colours.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "seed={} heading={} goal_color={}\n",
            self.id,
            self.start_heading.letter(),
            self.goal_color
        );
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x as i32, y as i32);
                let ch = if c == self.start {
                    'S'
                } else if c == self.goal {
                    'G'
                } else if let Some((_, col)) = self.landmarks.iter().find(|(l, _)| *l == c) {
                    char::from(b'0' + col)
                } else if self.is_free(c) {
                    '.'
                } else {
                    '#'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("world file", "empty"))?;
        let mut seed = None;
        let mut heading = None;
        let mut goal_color = 0u8;
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::format("world header", format!("bad field `{field}`")))?;
            let bad = |e: &dyn std::fmt::Display| Error::format("world header", format!("{k}: {e}"));
            match k {
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(&e))?),
                "heading" => heading = Some(Heading::from_letter(v)?),
                "goal_color" => goal_color = v.parse().map_err(|e| bad(&e))?,
                _ => return Err(Error::format("world header", format!("unknown key `{k}`"))),
            }
        }
        let seed = seed.ok_or_else(|| Error::format("world header", "missing seed"))?;
        let heading = heading.ok_or_else(|| Error::format("world header", "missing heading"))?;
        let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut walls = Vec::with_capacity(width * height);
        let (mut start, mut goal) = (None, None);
        let mut landmarks = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::format("world file", format!("row {y} has ragged width")));
            }
            for (x, ch) in row.chars().enumerate() {
                let c = Cell::new(x as i32, y as i32);
                walls.push(ch == '#');
                match ch {
                    '#' | '.' => {}
                    'S' => start = Some(c),
                    'G' => goal = Some(c),
                    d if d.is_ascii_digit() => landmarks.push((c, d as u8 - b'0')),
                    other => return Err(Error::format("world file", format!("unexpected `{other}`"))),
                }
            }
        }
        let start = start.ok_or_else(|| Error::format("world file", "no start cell"))?;
        let goal = goal.ok_or_else(|| Error::format("world file", "no goal cell"))?;
        GridWorld::new(seed, width, height, walls, start, heading, goal, goal_color, landmarks)
    }
}
