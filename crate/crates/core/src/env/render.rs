use super::{Cell, EnvState, GridWorld};
use crate::encoder::ObservationFrame;

/// Lateral cells in the egocentric view; the agent sits in the middle column.
pub const VIEW_WIDTH: usize = 5;
/// Cells ahead of the agent, counting its own cell as row 0.
pub const VIEW_DEPTH: usize = 5;
pub const CELL_PX: usize = 4;

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.6, 0.0, 0.8],
    [1.0, 0.5, 0.0],
];
const WALL: [f64; 3] = [0.5; 3];
const FLOOR: [f64; 3] = [0.1; 3];
const VOID: [f64; 3] = [0.0; 3];

/// World cell seen at lateral offset `lateral` (positive = right) and
/// `ahead` cells forward.
fn view_cell(state: &EnvState, lateral: i32, ahead: i32) -> Cell {
    state.cell.step(state.heading, ahead).step(state.heading.right(), lateral)
}

fn cell_colour(world: &GridWorld, c: Cell) -> [f64; 3] {
    if !world.in_bounds(c) {
        VOID
    } else if !world.is_free(c) {
        WALL
    } else if let Some(col) = world.landmark_at(c) {
        PALETTE[col as usize]
    } else {
        FLOOR
    }
}

/// Renders the egocentric view. The agent's cell is the bottom-centre cell
/// of the image; depth holds, per image column, the forward distance to the
/// first blocked cell in that column (or `VIEW_DEPTH` when none is visible).
pub fn observe(world: &GridWorld, state: &EnvState) -> ObservationFrame {
    let (h, w) = (VIEW_DEPTH * CELL_PX, VIEW_WIDTH * CELL_PX);
    let mut rgb = vec![0.0; h * w * 3];
    let mut depth = vec![0.0; h * w];
    let half = (VIEW_WIDTH / 2) as i32;
    for col in 0..VIEW_WIDTH {
        let lateral = col as i32 - half;
        let hit = (1..VIEW_DEPTH as i32)
            .find(|&d| !world.is_free(view_cell(state, lateral, d)))
            .unwrap_or(VIEW_DEPTH as i32) as f64;
        for row in 0..VIEW_DEPTH {
            let ahead = (VIEW_DEPTH - 1 - row) as i32;
            let colour = cell_colour(world, view_cell(state, lateral, ahead));
            for py in row * CELL_PX..(row + 1) * CELL_PX {
                for px in col * CELL_PX..(col + 1) * CELL_PX {
                    let i = py * w + px;
                    rgb[i * 3..i * 3 + 3].copy_from_slice(&colour);
                    depth[i] = hit;
                }
            }
        }
    }
    ObservationFrame::new(h, w, rgb, depth, state.step_count).expect("renderer produces consistent frames")
}

#[cfg(test)]
mod tests {
    use super::super::{Action, Heading};
    use super::*;

    fn world() -> GridWorld {
        GridWorld::from_text(
            "seed=1 heading=N goal_color=0\n#########\n#.......#\n#...2...#\n#.......#\n#...S...#\n#.....G.#\n#########\n",
        )
        .unwrap()
    }

    #[test]
    fn same_state_same_frame() {
        let w = world();
        let s = EnvState::start(&w);
        assert_eq!(observe(&w, &s), observe(&w, &s));
    }

    #[test]
    fn wall_at_distance_one_in_centre_columns() {
        let w = GridWorld::from_text("seed=1 heading=N goal_color=0\n#####\n#...#\n#.S.#\n#..G#\n#####\n").unwrap();
        let mut s = EnvState::start(&w);
        s = s.step(&w, Action::Forward).unwrap();
        let f = observe(&w, &s);
        let centre = (VIEW_WIDTH / 2) * CELL_PX;
        let min = (0..f.height)
            .flat_map(|y| (centre..centre + CELL_PX).map(move |x| (y, x)))
            .map(|(y, x)| f.depth_at(y, x))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min, 1.0);
    }

    #[test]
    fn full_rotation_restores_frame() {
        let w = world();
        let s0 = EnvState::start(&w);
        let mut s = s0.clone();
        for _ in 0..4 {
            s = s.step(&w, Action::Right).unwrap();
        }
        let (a, mut b) = (observe(&w, &s0), observe(&w, &s));
        b.step_index = a.step_index;
        assert_eq!(a, b);
    }

    #[test]
    fn landmark_ahead_is_coloured() {
        let w = world();
        let s = EnvState::start(&w);
        assert_eq!(s.heading, Heading::North);
        let f = observe(&w, &s);
        // landmark two cells ahead -> image row VIEW_DEPTH-1-2
        let (y, x) = ((VIEW_DEPTH - 3) * CELL_PX, (VIEW_WIDTH / 2) * CELL_PX);
        assert_eq!(f.rgb_at(y, x), PALETTE[2]);
    }

    #[test]
    fn far_wall_does_not_change_frame() {
        let w = world();
        let s = EnvState::start(&w);
        let far = Cell::new(7, 1);
        assert!(s.cell.x.abs_diff(far.x) > 2 || s.cell.y.abs_diff(far.y) > 4);
        let w2 = w.with_wall(far, true).unwrap();
        assert_eq!(observe(&w, &s), observe(&w2, &s));
    }
}
