use super::world::UNREACHABLE;
use super::{Action, EnvState, GridWorld};
use crate::error::{Error, Result};

/// Shortest number of forward/turn actions from the state to the goal cell.
pub fn shortest_action_distance(world: &GridWorld, state: &EnvState) -> Result<u32> {
    match world.distance_to_goal(state.cell, state.heading) {
        UNREACHABLE => Err(Error::Oracle(format!(
            "goal unreachable from {:?} heading {:?} in world {}",
            state.cell, state.heading, world.id
        ))),
        d => Ok(d),
    }
}

/// First action of a shortest action sequence to the goal, `Stop` on the goal.
/// Ties between equally short continuations resolve in action order.
pub fn oracle_action(world: &GridWorld, state: &EnvState) -> Result<Action> {
    if state.done {
        return Err(Error::Protocol("oracle queried on a finished episode".into()));
    }
    let d = shortest_action_distance(world, state)?;
    if d == 0 {
        return Ok(Action::Stop);
    }
    for a in [Action::Forward, Action::Left, Action::Right] {
        let (cell, heading) = match a {
            Action::Forward => (state.cell.step(state.heading, 1), state.heading),
            Action::Left => (state.cell, state.heading.left()),
            _ => (state.cell, state.heading.right()),
        };
        if world.is_free(cell) && world.distance_to_goal(cell, heading) == d - 1 {
            return Ok(a);
        }
    }
    Err(Error::Oracle(format!("no descending action at {:?}", state.cell)))
}

/// Runs the oracle forward `horizon` actions on a copy of the state, padding
/// with `Stop` once the copy has stopped or run out of steps.
pub fn oracle_plan(world: &GridWorld, state: &EnvState, horizon: usize) -> Result<Vec<Action>> {
    let mut s = state.clone();
    let mut plan = Vec::with_capacity(horizon);
    while plan.len() < horizon {
        if s.done {
            plan.push(Action::Stop);
            continue;
        }
        let a = oracle_action(world, &s)?;
        plan.push(a);
        s = s.step(world, a)?;
    }
    Ok(plan)
}

/// Full oracle episode from the world's start, including the final `Stop`.
pub fn oracle_rollout(world: &GridWorld) -> Result<(Vec<Action>, EnvState)> {
    let mut s = EnvState::start(world);
    let mut actions = Vec::new();
    while !s.done {
        let a = oracle_action(world, &s)?;
        actions.push(a);
        s = s.step(world, a)?;
    }
    Ok((actions, s))
}
