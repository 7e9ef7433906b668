//! Deterministic 2-D pick-and-place world with a scripted expert.
//!
//! The agent walks freely over the grid. While carrying an object it cannot
//! enter a cell occupied by another present object, so present objects never
//! share a cell and the held object is always the only one under the agent.

mod dataset;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, Dataset, DatasetHeader, DatasetRecord,
    world_tasks, GenerationParams, DATASET_SCHEMA_VERSION,
};

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instr::{Lexicon, ParsedInstruction, PrimitiveKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("no success predicate registered for `{0}`")]
    UnknownPredicate(String),
    #[error("`{0}` does not name an object or place in this world")]
    UnknownEntity(String),
    #[error("task is infeasible: {0}")]
    Infeasible(String),
    #[error("expert plan needs {needed} actions, horizon allows {allowed}")]
    HorizonExceeded { needed: usize, allowed: usize },
    #[error("holdout `{instruction}` would remove primitive `{primitive}` from training")]
    HoldoutCoversPrimitive {
        instruction: String,
        primitive: String,
    },
    #[error("holdout `{0}` is not one of the generated tasks")]
    UnknownHoldout(String),
    #[error("could not sample a feasible start for `{0}`")]
    NoFeasibleStart(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn chebyshev(self, other: Cell) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedCell {
    pub name: String,
    pub cell: Cell,
}

impl NamedCell {
    pub fn new(name: &str, x: i32, y: i32) -> Self {
        Self {
            name: name.to_owned(),
            cell: Cell::new(x, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub grid_w: i32,
    pub grid_h: i32,
    /// Frames per plan, including the starting observation.
    pub horizon: usize,
    pub objects: Vec<NamedCell>,
    pub containers: Vec<NamedCell>,
    #[serde(default)]
    pub locations: Vec<NamedCell>,
    pub max_episode_steps: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_w: 6,
            grid_h: 6,
            horizon: 8,
            objects: vec![
                NamedCell::new("red block", 1, 1),
                NamedCell::new("blue block", 4, 1),
                NamedCell::new("yellow block", 1, 4),
                NamedCell::new("green block", 4, 4),
            ],
            containers: vec![
                NamedCell::new("top drawer", 2, 0),
                NamedCell::new("bottom drawer", 3, 5),
            ],
            locations: vec![
                NamedCell::new("the left corner", 0, 0),
                NamedCell::new("the right corner", 5, 0),
            ],
            max_episode_steps: 24,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.grid_w && c.y < self.grid_h
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.grid_h).flat_map(move |y| (0..self.grid_w).map(move |x| Cell::new(x, y)))
    }

    /// Number of environment actions a plan of `horizon` frames can hold.
    pub fn plan_actions(&self) -> usize {
        self.horizon - 1
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn place_cell(&self, name: &str) -> Option<Cell> {
        self.containers
            .iter()
            .chain(&self.locations)
            .find(|p| p.name == name)
            .map(|p| p.cell)
    }

    pub fn place_cells(&self) -> Vec<Cell> {
        self.containers
            .iter()
            .chain(&self.locations)
            .map(|p| p.cell)
            .collect()
    }

    pub fn validate(&self, lex: &Lexicon) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidConfig(m));
        if self.grid_w < 4 || self.grid_h < 4 {
            return bad(format!("grid {}x{} is smaller than 4x4", self.grid_w, self.grid_h));
        }
        if self.horizon < 2 {
            return bad(format!("horizon {} < 2", self.horizon));
        }
        if self.objects.is_empty() {
            return bad("no objects".into());
        }
        for o in &self.objects {
            if !self.in_bounds(o.cell) {
                return bad(format!("object `{}` starts out of bounds", o.name));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[..i] {
                if a.cell == b.cell {
                    return bad(format!("objects `{}` and `{}` share a start cell", a.name, b.name));
                }
                if a.name == b.name {
                    return bad(format!("duplicate object `{}`", a.name));
                }
            }
        }
        for p in self.containers.iter().chain(&self.locations) {
            if !self.in_bounds(p.cell) {
                return bad(format!("place `{}` out of bounds", p.name));
            }
        }
        let names = |n: &str| -> Vec<String> { n.split_whitespace().map(str::to_owned).collect() };
        for o in &self.objects {
            if !lex.objects().contains(&names(&o.name)) {
                return bad(format!("object `{}` is not in the lexicon", o.name));
            }
        }
        for c in &self.containers {
            if !lex.containers().contains(&names(&c.name)) {
                return bad(format!("container `{}` is not in the lexicon", c.name));
            }
        }
        for l in &self.locations {
            if !lex.locations().contains(&names(&l.name)) {
                return bad(format!("location `{}` is not in the lexicon", l.name));
            }
        }
        Ok(())
    }

    /// State with every object at its configured start cell.
    pub fn initial_state(&self, agent: Cell) -> WorldState {
        WorldState {
            agent,
            held: None,
            object_pos: self.objects.iter().map(|o| o.cell).collect(),
            object_present: vec![true; self.objects.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub agent: Cell,
    pub held: Option<usize>,
    pub object_pos: Vec<Cell>,
    pub object_present: Vec<bool>,
}

impl WorldState {
    /// Lowest-index present object at `cell`, ignoring `except`.
    pub fn object_at(&self, cell: Cell, except: Option<usize>) -> Option<usize> {
        (0..self.object_pos.len())
            .find(|&i| Some(i) != except && self.object_present[i] && self.object_pos[i] == cell)
    }

    pub fn is_valid(&self, cfg: &WorldConfig) -> bool {
        let n = cfg.n_objects();
        if self.object_pos.len() != n || self.object_present.len() != n {
            return false;
        }
        if !cfg.in_bounds(self.agent) || !self.object_pos.iter().all(|&c| cfg.in_bounds(c)) {
            return false;
        }
        if let Some(h) = self.held {
            if h >= n || !self.object_present[h] || self.object_pos[h] != self.agent {
                return false;
            }
        }
        for i in 0..n {
            for j in 0..i {
                if self.object_present[i]
                    && self.object_present[j]
                    && self.object_pos[i] == self.object_pos[j]
                {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    MoveN = 0,
    MoveS = 1,
    MoveE = 2,
    MoveW = 3,
    Grasp = 4,
    Release = 5,
    Noop = 6,
}

impl Action {
    pub const COUNT: usize = 7;
    pub const ALL: [Action; 7] = [
        Action::MoveN,
        Action::MoveS,
        Action::MoveE,
        Action::MoveW,
        Action::Grasp,
        Action::Release,
        Action::Noop,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Action::ALL.get(code as usize).copied()
    }

    fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::MoveN => Some((0, -1)),
            Action::MoveS => Some((0, 1)),
            Action::MoveE => Some((1, 0)),
            Action::MoveW => Some((-1, 0)),
            _ => None,
        }
    }
}

pub fn step(state: &WorldState, action: Action, cfg: &WorldConfig) -> WorldState {
    let mut next = state.clone();
    match action {
        Action::MoveN | Action::MoveS | Action::MoveE | Action::MoveW => {
            let (dx, dy) = action.delta().unwrap();
            let target = Cell::new(
                (state.agent.x + dx).clamp(0, cfg.grid_w - 1),
                (state.agent.y + dy).clamp(0, cfg.grid_h - 1),
            );
            if let Some(h) = state.held {
                if state.object_at(target, Some(h)).is_some() {
                    return next;
                }
                next.object_pos[h] = target;
            }
            next.agent = target;
        }
        Action::Grasp => {
            if state.held.is_none() {
                next.held = state.object_at(state.agent, None);
            }
        }
        Action::Release => next.held = None,
        Action::Noop => {}
    }
    next
}

/// What must hold at the end of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Goal {
    Pick,
    PlaceInto(Cell),
    Near(usize),
    PushTo(Cell),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub object: usize,
    pub goal: Goal,
}

impl Task {
    pub fn resolve(instr: &ParsedInstruction, cfg: &WorldConfig) -> Result<Task, WorldError> {
        let action = instr.action();
        let verb = action.tokens[0].as_str();
        let object_name = action.argument().join(" ");
        let relations: Vec<_> = instr
            .primitives
            .iter()
            .filter(|p| p.kind == PrimitiveKind::Relation)
            .collect();
        let unknown = || WorldError::UnknownPredicate(instr.normalized());
        if relations.len() > 1 {
            return Err(unknown());
        }
        let relation = relations
            .first()
            .map(|r| (r.tokens[0].as_str(), r.argument().join(" ")));
        let object = cfg
            .object_index(&object_name)
            .ok_or_else(|| WorldError::UnknownEntity(object_name.clone()))?;
        let place = |name: &str| {
            cfg.place_cell(name)
                .ok_or_else(|| WorldError::UnknownEntity(name.to_owned()))
        };
        let goal = match (verb, relation) {
            ("pick", None) => Goal::Pick,
            ("pick", Some(("from", ref src))) => {
                place(src)?;
                Goal::Pick
            }
            ("place", Some(("into", ref dst))) => Goal::PlaceInto(place(dst)?),
            ("push", Some(("to", ref dst))) => Goal::PushTo(place(dst)?),
            ("move", Some(("near", ref other))) => {
                let other_idx = cfg
                    .object_index(other)
                    .ok_or_else(|| WorldError::UnknownEntity(other.clone()))?;
                if other_idx == object {
                    return Err(unknown());
                }
                Goal::Near(other_idx)
            }
            _ => return Err(unknown()),
        };
        Ok(Task { object, goal })
    }

    pub fn satisfied(&self, state: &WorldState) -> bool {
        let x = self.object;
        if !state.object_present[x] {
            return false;
        }
        let pos = state.object_pos[x];
        let held = state.held == Some(x);
        match self.goal {
            Goal::Pick => held,
            Goal::PlaceInto(c) => pos == c && !held,
            Goal::Near(y) => state.object_present[y] && pos.chebyshev(state.object_pos[y]) <= 1 && !held,
            Goal::PushTo(c) => pos == c,
        }
    }
}

pub fn success(
    instruction: &ParsedInstruction,
    state: &WorldState,
    cfg: &WorldConfig,
) -> Result<bool, WorldError> {
    Ok(Task::resolve(instruction, cfg)?.satisfied(state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    TestSeen,
    TestUnseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    /// `horizon` frames; `states[0]` is the start observation.
    pub states: Vec<WorldState>,
    /// `horizon - 1` actions, Noop-padded.
    pub actions: Vec<Action>,
    pub instruction: ParsedInstruction,
    pub goal_state: WorldState,
    pub split_tag: SplitTag,
}

/// Walking (empty-handed) never collides, so moves are a fixed x-then-y path.
fn walk_toward(from: Cell, to: Cell) -> Option<Action> {
    if from.x < to.x {
        Some(Action::MoveE)
    } else if from.x > to.x {
        Some(Action::MoveW)
    } else if from.y < to.y {
        Some(Action::MoveS)
    } else if from.y > to.y {
        Some(Action::MoveN)
    } else {
        None
    }
}

/// Breadth-first distances to `targets` over cells not in `blocked`.
fn distance_field(cfg: &WorldConfig, targets: &[Cell], blocked: &[Cell]) -> Vec<Option<u32>> {
    let idx = |c: Cell| (c.y * cfg.grid_w + c.x) as usize;
    let mut dist = vec![None; (cfg.grid_w * cfg.grid_h) as usize];
    let mut queue = VecDeque::new();
    for &t in targets {
        if dist[idx(t)].is_none() {
            dist[idx(t)] = Some(0);
            queue.push_back(t);
        }
    }
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)].unwrap();
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if cfg.in_bounds(n) && !blocked.contains(&n) && dist[idx(n)].is_none() {
                dist[idx(n)] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Next expert action from `state`, or `None` once the task is satisfied.
///
/// The policy is memoryless: rerunning it from any state on its own path
/// reproduces the remainder of the path.
pub fn expert_action(
    task: &Task,
    state: &WorldState,
    cfg: &WorldConfig,
) -> Result<Option<Action>, WorldError> {
    expert_action_to(task, state, cfg, None)
}

/// Like [`expert_action`], but a near task heads for `target` whenever that
/// cell is free and next to the anchor object.
pub fn expert_action_to(
    task: &Task,
    state: &WorldState,
    cfg: &WorldConfig,
    target: Option<Cell>,
) -> Result<Option<Action>, WorldError> {
    if task.satisfied(state) {
        return Ok(None);
    }
    let x = task.object;
    if !state.object_present[x] {
        return Err(WorldError::Infeasible(format!(
            "object `{}` is absent",
            cfg.objects[x].name
        )));
    }
    if let Goal::Near(y) = task.goal {
        if !state.object_present[y] {
            return Err(WorldError::Infeasible(format!(
                "object `{}` is absent",
                cfg.objects[y].name
            )));
        }
    }
    match state.held {
        Some(h) if h != x => return Ok(Some(Action::Release)),
        None => {
            return Ok(Some(
                walk_toward(state.agent, state.object_pos[x]).unwrap_or(Action::Grasp),
            ))
        }
        Some(_) => {}
    }
    if task.goal == Goal::Pick {
        // satisfied above
        unreachable!("holding the object satisfies a pick task");
    }

    let blocked: Vec<Cell> = (0..cfg.n_objects())
        .filter(|&i| i != x && state.object_present[i])
        .map(|i| state.object_pos[i])
        .collect();
    let targets: Vec<Cell> = match task.goal {
        Goal::PlaceInto(c) | Goal::PushTo(c) => vec![c],
        Goal::Near(y) => {
            let anchor = state.object_pos[y];
            match target {
                Some(t) if t.chebyshev(anchor) <= 1 && !blocked.contains(&t) => vec![t],
                _ => cfg.cells().filter(|c| c.chebyshev(anchor) <= 1).collect(),
            }
        }
        Goal::Pick => unreachable!(),
    };
    let targets: Vec<Cell> = targets.into_iter().filter(|c| !blocked.contains(c)).collect();
    let field = distance_field(cfg, &targets, &blocked);
    let idx = |c: Cell| (c.y * cfg.grid_w + c.x) as usize;
    let here = match field[idx(state.agent)] {
        Some(d) => d,
        None => {
            return Err(WorldError::Infeasible(format!(
                "no free target cell reachable for `{}`",
                cfg.objects[x].name
            )))
        }
    };
    if here == 0 {
        return Ok(Some(Action::Release));
    }
    for a in [Action::MoveE, Action::MoveW, Action::MoveS, Action::MoveN] {
        let (dx, dy) = a.delta().unwrap();
        let n = Cell::new(state.agent.x + dx, state.agent.y + dy);
        if cfg.in_bounds(n) && field[idx(n)] == Some(here - 1) {
            return Ok(Some(a));
        }
    }
    unreachable!("a cell with finite distance has a predecessor")
}

/// Full expert action sequence, without horizon limit.
pub fn expert_plan(
    task: &Task,
    start: &WorldState,
    cfg: &WorldConfig,
) -> Result<Vec<Action>, WorldError> {
    expert_plan_to(task, start, cfg, None)
}

pub fn expert_plan_to(
    task: &Task,
    start: &WorldState,
    cfg: &WorldConfig,
    target: Option<Cell>,
) -> Result<Vec<Action>, WorldError> {
    let limit = 4 * (cfg.grid_w + cfg.grid_h) as usize + 4;
    let mut state = start.clone();
    let mut actions = Vec::new();
    while let Some(a) = expert_action_to(task, &state, cfg, target)? {
        actions.push(a);
        state = step(&state, a, cfg);
        if actions.len() > limit {
            return Err(WorldError::Infeasible("expert did not converge".into()));
        }
    }
    Ok(actions)
}

/// Run the expert and pack the result into a fixed-length demonstration.
pub fn expert(
    instruction: &ParsedInstruction,
    start: &WorldState,
    cfg: &WorldConfig,
) -> Result<Demonstration, WorldError> {
    expert_to(instruction, start, cfg, None)
}

/// [`expert`] with the end cell of a near task fixed to `target`.
pub fn expert_to(
    instruction: &ParsedInstruction,
    start: &WorldState,
    cfg: &WorldConfig,
    target: Option<Cell>,
) -> Result<Demonstration, WorldError> {
    let task = Task::resolve(instruction, cfg)?;
    let plan = expert_plan_to(&task, start, cfg, target)?;
    let allowed = cfg.plan_actions();
    if plan.len() > allowed {
        return Err(WorldError::HorizonExceeded {
            needed: plan.len(),
            allowed,
        });
    }
    let mut actions = plan;
    actions.resize(allowed, Action::Noop);
    let mut states = Vec::with_capacity(cfg.horizon);
    states.push(start.clone());
    for &a in &actions {
        let next = step(states.last().unwrap(), a, cfg);
        states.push(next);
    }
    let goal_state = states.last().unwrap().clone();
    debug_assert!(task.satisfied(&goal_state));
    Ok(Demonstration {
        states,
        actions,
        instruction: instruction.clone(),
        goal_state,
        split_tag: SplitTag::Train,
    })
}

/// Exhaustive shortest solution length by breadth-first search over world
/// states. Exponential in object count; meant for small test worlds.
pub fn bfs_optimal_length(task: &Task, start: &WorldState, cfg: &WorldConfig) -> Option<usize> {
    use std::collections::HashSet;
    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(start.clone());
    queue.push_back((start.clone(), 0usize));
    while let Some((s, d)) = queue.pop_front() {
        if task.satisfied(&s) {
            return Some(d);
        }
        for a in Action::ALL {
            let n = step(&s, a, cfg);
            if seen.insert(n.clone()) {
                queue.push_back((n, d + 1));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instr::parse;
    use std::collections::HashMap;

    fn world() -> (WorldConfig, Lexicon) {
        (WorldConfig::default(), Lexicon::default())
    }

    fn state_with(cfg: &WorldConfig, agent: Cell, objects: &[Cell]) -> WorldState {
        WorldState {
            agent,
            held: None,
            object_pos: objects.to_vec(),
            object_present: vec![true; cfg.n_objects()],
        }
    }

    #[test]
    fn default_config_is_valid() {
        let (cfg, lex) = world();
        cfg.validate(&lex).unwrap();
        let mut bad = cfg.clone();
        bad.grid_w = 3;
        assert!(bad.validate(&lex).is_err());
        let mut bad = cfg.clone();
        bad.objects[1].cell = bad.objects[0].cell;
        assert!(bad.validate(&lex).is_err());
        let mut bad = cfg;
        bad.objects[0].name = "purple block".into();
        assert!(bad.validate(&lex).is_err());
    }

    #[test]
    fn move_clamps_at_wall() {
        let (cfg, _) = world();
        let s = cfg.initial_state(Cell::new(0, 0));
        assert_eq!(step(&s, Action::MoveW, &cfg), s);
        assert_eq!(step(&s, Action::MoveN, &cfg), s);
    }

    #[test]
    fn grasp_tracks_and_release() {
        let (cfg, _) = world();
        let s = cfg.initial_state(cfg.objects[0].cell);
        let g = step(&s, Action::Grasp, &cfg);
        assert_eq!(g.held, Some(0));
        let m = step(&g, Action::MoveS, &cfg);
        assert_eq!(m.object_pos[0], m.agent);
        assert!(m.is_valid(&cfg));
        let r = step(&m, Action::Release, &cfg);
        assert_eq!(r.held, None);
        assert_eq!(r.object_pos[0], m.agent);
        assert_eq!(step(&r, Action::Release, &cfg), r);
        // grasp on an empty cell is a no-op
        let empty = cfg.initial_state(Cell::new(0, 3));
        assert_eq!(step(&empty, Action::Grasp, &cfg), empty);
    }

    #[test]
    fn carrying_is_blocked_by_other_objects() {
        let (cfg, _) = world();
        let s = state_with(
            &cfg,
            Cell::new(1, 1),
            &[Cell::new(1, 1), Cell::new(2, 1), Cell::new(0, 5), Cell::new(5, 5)],
        );
        let g = step(&s, Action::Grasp, &cfg);
        assert_eq!(step(&g, Action::MoveE, &cfg), g);
        // empty-handed the agent walks over objects
        assert_eq!(step(&s, Action::MoveE, &cfg).agent, Cell::new(2, 1));
    }

    #[test]
    fn success_predicates() {
        let (cfg, lex) = world();
        let near = parse("move red block near blue block", &lex).unwrap();
        let s = state_with(
            &cfg,
            Cell::new(0, 0),
            &[Cell::new(2, 2), Cell::new(3, 3), Cell::new(0, 5), Cell::new(5, 5)],
        );
        assert!(success(&near, &s, &cfg).unwrap());

        let place = parse("place red block into bottom drawer", &lex).unwrap();
        let drawer = cfg.place_cell("bottom drawer").unwrap();
        let mut held = state_with(
            &cfg,
            drawer,
            &[drawer, Cell::new(3, 3), Cell::new(0, 5), Cell::new(5, 5)],
        );
        held.held = Some(0);
        assert!(!success(&place, &held, &cfg).unwrap());
        let released = step(&held, Action::Release, &cfg);
        assert!(success(&place, &released, &cfg).unwrap());

        let pick = parse("pick red block", &lex).unwrap();
        assert!(success(&pick, &held, &cfg).unwrap());
        let pick_from = parse("pick red block from top drawer", &lex).unwrap();
        assert!(success(&pick_from, &held, &cfg).unwrap());

        let push = parse("push red block to the left corner", &lex).unwrap();
        let corner = state_with(
            &cfg,
            Cell::new(3, 3),
            &[Cell::new(0, 0), Cell::new(3, 3), Cell::new(0, 5), Cell::new(5, 5)],
        );
        assert!(success(&push, &corner, &cfg).unwrap());

        let odd = parse("push red block near blue block", &lex).unwrap();
        assert!(matches!(
            success(&odd, &s, &cfg),
            Err(WorldError::UnknownPredicate(_))
        ));
        let missing = parse("pick water bottle", &lex).unwrap();
        assert!(matches!(
            success(&missing, &s, &cfg),
            Err(WorldError::UnknownEntity(_))
        ));
    }

    #[test]
    fn expert_adjacent_pick() {
        let (cfg, lex) = world();
        let pick = parse("pick red block", &lex).unwrap();
        let s = cfg.initial_state(Cell::new(0, 1));
        let demo = expert(&pick, &s, &cfg).unwrap();
        assert_eq!(demo.actions[..2], [Action::MoveE, Action::Grasp]);
        assert!(demo.actions[2..].iter().all(|&a| a == Action::Noop));
        assert_eq!(demo.states.len(), cfg.horizon);
        assert_eq!(demo.actions.len(), cfg.horizon - 1);
        assert_eq!(demo.goal_state.held, Some(0));
    }

    #[test]
    fn expert_reports_infeasible_and_horizon() {
        let (cfg, lex) = world();
        let pick = parse("pick red block", &lex).unwrap();
        let mut s = cfg.initial_state(Cell::new(0, 1));
        s.object_present[0] = false;
        assert!(matches!(expert(&pick, &s, &cfg), Err(WorldError::Infeasible(_))));

        let far = parse("place red block into bottom drawer", &lex).unwrap();
        let s = cfg.initial_state(Cell::new(5, 0));
        assert!(matches!(
            expert(&far, &s, &cfg),
            Err(WorldError::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn expert_replays_and_succeeds_on_near() {
        let (cfg, lex) = world();
        let near = parse("move red block near blue block", &lex).unwrap();
        let s = state_with(
            &cfg,
            Cell::new(1, 2),
            &[Cell::new(1, 1), Cell::new(4, 1), Cell::new(0, 5), Cell::new(5, 5)],
        );
        let demo = expert(&near, &s, &cfg).unwrap();
        for (i, &a) in demo.actions.iter().enumerate() {
            assert_eq!(step(&demo.states[i], a, &cfg), demo.states[i + 1]);
        }
        let fin = &demo.goal_state;
        assert!(fin.object_pos[0].chebyshev(fin.object_pos[1]) <= 1);
        let task = Task::resolve(&near, &cfg).unwrap();
        assert_eq!(
            bfs_optimal_length(&task, &s, &cfg).unwrap(),
            expert_plan(&task, &s, &cfg).unwrap().len()
        );
    }

    #[test]
    fn expert_matches_bfs_exhaustively_on_small_grid() {
        let lex = Lexicon::default();
        let cfg = WorldConfig {
            grid_w: 4,
            grid_h: 4,
            horizon: 20,
            objects: vec![
                NamedCell::new("red block", 0, 0),
                NamedCell::new("blue block", 3, 3),
            ],
            containers: vec![NamedCell::new("top drawer", 2, 0)],
            locations: vec![],
            max_episode_steps: 20,
            seed: 0,
        };
        cfg.validate(&lex).unwrap();
        let instructions = [
            "pick red block",
            "move red block near blue block",
            "move blue block near red block",
            "place blue block into top drawer",
        ];
        let tasks: Vec<Task> = instructions
            .iter()
            .map(|s| Task::resolve(&parse(s, &lex).unwrap(), &cfg).unwrap())
            .collect();
        // Enumerate every valid state once and compute exact cost-to-go per
        // task by reverse breadth-first search over the step() graph.
        let cells: Vec<Cell> = cfg.cells().collect();
        let mut all = Vec::new();
        for &agent in &cells {
            for &a in &cells {
                for &b in &cells {
                    if a == b {
                        continue;
                    }
                    let s = state_with(&cfg, agent, &[a, b]);
                    for held in [None, Some(0), Some(1)] {
                        let mut h = s.clone();
                        h.held = held;
                        if h.is_valid(&cfg) {
                            all.push(h);
                        }
                    }
                }
            }
        }
        let index: HashMap<WorldState, usize> =
            all.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let mut checked = 0;
        for task in &tasks {
            // The expert only ever handles the instructed object, so compare
            // against plans that never pick up another one.
            let mut preds: Vec<Vec<usize>> = vec![Vec::new(); all.len()];
            for (i, s) in all.iter().enumerate() {
                for a in Action::ALL {
                    let next = step(s, a, &cfg);
                    if next.held.is_some() && next.held != Some(task.object) {
                        continue;
                    }
                    preds[index[&next]].push(i);
                }
            }
            let mut cost: Vec<Option<usize>> = vec![None; all.len()];
            let mut queue = VecDeque::new();
            for (i, s) in all.iter().enumerate() {
                if task.satisfied(s) {
                    cost[i] = Some(0);
                    queue.push_back(i);
                }
            }
            while let Some(i) = queue.pop_front() {
                let d = cost[i].unwrap();
                for &p in &preds[i] {
                    if cost[p].is_none() {
                        cost[p] = Some(d + 1);
                        queue.push_back(p);
                    }
                }
            }
            for (i, s) in all.iter().enumerate() {
                if s.held.is_some() && s.held != Some(task.object) {
                    continue;
                }
                let target_taken = match task.goal {
                    Goal::PlaceInto(c) | Goal::PushTo(c) => s.object_at(c, Some(task.object)).is_some(),
                    _ => false,
                };
                match expert_plan(task, s, &cfg) {
                    Ok(p) => assert_eq!(Some(p.len()), cost[i], "{task:?} from {s:?}"),
                    Err(WorldError::Infeasible(_)) if target_taken => continue,
                    Err(e) => panic!("{e} for {task:?} from {s:?}"),
                }
                checked += 1;
            }
        }
        assert!(checked > 10_000);
    }
}
