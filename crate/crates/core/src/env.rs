//! Deterministic multi-agent grid path-finding environment.
//!
//! A team of agents moves on an `L x L` grid with static obstacles; each
//! agent must reach its own goal cell within a step horizon. Moves are
//! simultaneous. Conflicting moves (two agents proposing the same cell,
//! or two agents exchanging cells) revert to WAIT and raise the involved
//! movers' collision flags. Agents that reached their goal stay parked
//! there and keep occupying their cell.
//!
//! Instance generation, stepping, and observation are pure functions of
//! the seed and the action sequence, which the evaluation pipeline
//! relies on for cross-method comparability.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Egocentric window radius; the backbone is built around this value.
pub const OBS_RADIUS: usize = 2;
/// Window side, `2r + 1`.
pub const OBS_SIDE: usize = 2 * OBS_RADIUS + 1;
/// Observation channels: obstacles, other agents, goal hint.
pub const OBS_CHANNELS: usize = 3;
/// Flat observation length.
pub const OBS_LEN: usize = OBS_CHANNELS * OBS_SIDE * OBS_SIDE;

/// Reward for reaching the goal (granted once, on the reaching step).
pub const REWARD_GOAL: f32 = 1.0;
/// Per-step time penalty while unreached.
pub const REWARD_STEP: f32 = -0.01;
/// Additional penalty when a move is reverted by a conflict.
pub const REWARD_COLLISION: f32 = -0.05;

const MAX_GENERATION_ATTEMPTS: usize = 1000;

/// One local observation: channel-major `[channel][row][col]` in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Obs {
    pub data: [f32; OBS_LEN],
}

impl Obs {
    pub fn zeros() -> Self {
        Obs { data: [0.0; OBS_LEN] }
    }

    #[inline]
    pub fn index(channel: usize, row: usize, col: usize) -> usize {
        channel * OBS_SIDE * OBS_SIDE + row * OBS_SIDE + col
    }
}

/// The five discrete moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Wait,
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Wait, Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn index(self) -> usize {
        match self {
            Action::Wait => 0,
            Action::Up => 1,
            Action::Down => 2,
            Action::Left => 3,
            Action::Right => 4,
        }
    }

    /// (row, col) displacement.
    fn delta(self) -> (isize, isize) {
        match self {
            Action::Wait => (0, 0),
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

/// Static obstacle map.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub side: usize,
    pub density: f64,
    obstacles: Vec<bool>,
}

impl GridMap {
    pub fn new(side: usize, density: f64, obstacle_cells: &[(usize, usize)]) -> Self {
        let mut obstacles = vec![false; side * side];
        for &(r, c) in obstacle_cells {
            obstacles[r * side + c] = true;
        }
        GridMap { side, density, obstacles }
    }

    #[inline]
    pub fn in_bounds(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.side && (c as usize) < self.side
    }

    #[inline]
    pub fn is_obstacle(&self, r: usize, c: usize) -> bool {
        self.obstacles[r * self.side + c]
    }

    pub fn obstacle_count(&self) -> usize {
        self.obstacles.iter().filter(|&&b| b).count()
    }

    pub fn obstacle_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.side {
            for c in 0..self.side {
                if self.is_obstacle(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Per-agent dynamic state.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub pos: (usize, usize),
    pub goal: (usize, usize),
    pub reached: bool,
}

/// Full episode state.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeState {
    pub map: GridMap,
    pub agents: Vec<AgentState>,
    pub t: usize,
    pub horizon: usize,
}

/// Environment parameters for instance generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub side: usize,
    pub density: f64,
    pub num_agents: usize,
    pub horizon: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { side: 8, density: 0.1, num_agents: 4, horizon: 64 }
    }
}

/// Per-step result.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<f32>,
    pub collisions: Vec<bool>,
    pub done: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment parameters: {0}")]
    InvalidParams(&'static str),
    #[error("instance generation failed after {0} attempts")]
    GenerationFailed(usize),
    #[error("episode is terminal; cannot step")]
    Terminal,
    #[error("episode is not terminal; success rate undefined")]
    NotTerminal,
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("malformed instance document: {0}")]
    BadInstance(String),
}

/// Instance wire format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceDoc {
    #[serde(rename = "L")]
    pub side: usize,
    pub rho: f64,
    #[serde(rename = "N")]
    pub num_agents: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub obstacles: Vec<[usize; 2]>,
    pub starts: Vec<[usize; 2]>,
    pub goals: Vec<[usize; 2]>,
}

impl EpisodeState {
    /// Terminal when the horizon is exhausted or every agent reached.
    pub fn is_terminal(&self) -> bool {
        self.t >= self.horizon || self.agents.iter().all(|a| a.reached)
    }

    /// Fraction of agents that reached their goal; defined on terminal
    /// states only.
    pub fn success_rate(&self) -> Result<f32, EnvError> {
        if !self.is_terminal() {
            return Err(EnvError::NotTerminal);
        }
        let reached = self.agents.iter().filter(|a| a.reached).count();
        Ok(reached as f32 / self.agents.len() as f32)
    }

    /// Simultaneous-move transition. Conflicting movers revert to WAIT
    /// with their collision flags set; reverts cascade until stable.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::Terminal);
        }
        let n = self.agents.len();
        if actions.len() != n {
            return Err(EnvError::ActionCount { expected: n, got: actions.len() });
        }

        // Proposals: parked agents keep their cell; blocked moves (wall,
        // obstacle) silently revert without a collision flag.
        let mut target: Vec<(usize, usize)> = Vec::with_capacity(n);
        for (agent, &act) in self.agents.iter().zip(actions.iter()) {
            if agent.reached {
                target.push(agent.pos);
                continue;
            }
            let (dr, dc) = act.delta();
            let nr = agent.pos.0 as isize + dr;
            let nc = agent.pos.1 as isize + dc;
            if self.map.in_bounds(nr, nc) && !self.map.is_obstacle(nr as usize, nc as usize) {
                target.push((nr as usize, nc as usize));
            } else {
                target.push(agent.pos);
            }
        }

        let mut collided = vec![false; n];
        let side = self.map.side;
        let mut counts = vec![0u8; side * side];
        loop {
            let mut changed = false;

            // Vertex conflicts: every agent claims its target cell
            // (stationary agents claim their own), movers into a cell
            // claimed more than once revert.
            for c in counts.iter_mut() {
                *c = 0;
            }
            for &(r, c) in target.iter() {
                let slot = &mut counts[r * side + c];
                *slot = slot.saturating_add(1);
            }
            for i in 0..n {
                let moving = target[i] != self.agents[i].pos;
                if moving && counts[target[i].0 * side + target[i].1] >= 2 {
                    target[i] = self.agents[i].pos;
                    collided[i] = true;
                    changed = true;
                }
            }

            // Swap conflicts among the remaining movers.
            for i in 0..n {
                if target[i] == self.agents[i].pos {
                    continue;
                }
                for j in i + 1..n {
                    if target[j] == self.agents[j].pos {
                        continue;
                    }
                    if target[i] == self.agents[j].pos && target[j] == self.agents[i].pos {
                        target[i] = self.agents[i].pos;
                        target[j] = self.agents[j].pos;
                        collided[i] = true;
                        collided[j] = true;
                        changed = true;
                    }
                }
            }

            if !changed {
                break;
            }
        }

        // Apply moves, rewards, and reach flags.
        let mut rewards = vec![0.0f32; n];
        for i in 0..n {
            let was_reached = self.agents[i].reached;
            self.agents[i].pos = target[i];
            if was_reached {
                continue;
            }
            let mut r = REWARD_STEP;
            if collided[i] {
                r += REWARD_COLLISION;
            }
            if self.agents[i].pos == self.agents[i].goal {
                r += REWARD_GOAL;
                self.agents[i].reached = true;
            }
            rewards[i] = r;
        }
        self.t += 1;

        debug_assert!(distinct_positions(&self.agents));

        Ok(StepOutcome { rewards, collisions: collided, done: self.is_terminal() })
    }

    /// Instance wire document; positions are recorded as start cells, so
    /// dump fresh (t = 0) states to capture the generated instance.
    pub fn to_doc(&self) -> InstanceDoc {
        InstanceDoc {
            side: self.map.side,
            rho: self.map.density,
            num_agents: self.agents.len(),
            horizon: self.horizon,
            obstacles: self.map.obstacle_cells().iter().map(|&(r, c)| [r, c]).collect(),
            starts: self.agents.iter().map(|a| [a.pos.0, a.pos.1]).collect(),
            goals: self.agents.iter().map(|a| [a.goal.0, a.goal.1]).collect(),
        }
    }

    pub fn from_doc(doc: &InstanceDoc) -> Result<EpisodeState, EnvError> {
        use alloc::format;
        if doc.side == 0 {
            return Err(EnvError::BadInstance(String::from("zero side")));
        }
        if doc.starts.len() != doc.num_agents || doc.goals.len() != doc.num_agents {
            return Err(EnvError::BadInstance(String::from("start/goal count mismatch")));
        }
        for cell in doc.obstacles.iter().chain(doc.starts.iter()).chain(doc.goals.iter()) {
            if cell[0] >= doc.side || cell[1] >= doc.side {
                return Err(EnvError::BadInstance(format!("cell [{}, {}] out of bounds", cell[0], cell[1])));
            }
        }
        let map = GridMap::new(
            doc.side,
            doc.rho,
            &doc.obstacles.iter().map(|c| (c[0], c[1])).collect::<Vec<_>>(),
        );
        for (name, cells) in [("start", &doc.starts), ("goal", &doc.goals)] {
            for cell in cells.iter() {
                if map.is_obstacle(cell[0], cell[1]) {
                    return Err(EnvError::BadInstance(format!("{name} on an obstacle cell")));
                }
            }
        }
        let agents: Vec<AgentState> = doc
            .starts
            .iter()
            .zip(doc.goals.iter())
            .map(|(s, g)| AgentState {
                pos: (s[0], s[1]),
                goal: (g[0], g[1]),
                reached: (s[0], s[1]) == (g[0], g[1]),
            })
            .collect();
        if !distinct_positions(&agents) {
            return Err(EnvError::BadInstance(String::from("duplicate start cells")));
        }
        Ok(EpisodeState { map, agents, t: 0, horizon: doc.horizon })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("instance serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<EpisodeState, EnvError> {
        use alloc::string::ToString;
        let doc: InstanceDoc =
            serde_json::from_str(text).map_err(|e| EnvError::BadInstance(e.to_string()))?;
        EpisodeState::from_doc(&doc)
    }
}

fn distinct_positions(agents: &[AgentState]) -> bool {
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            if agents[i].pos == agents[j].pos {
                return false;
            }
        }
    }
    true
}

/// Draws a solvable instance: `floor(density * side^2)` obstacles by
/// seeded shuffle, then distinct free start and goal cells. Attempts
/// whose start-goal pairs are not connected are fully resampled.
pub fn generate_instance(seed: u64, cfg: &EnvConfig) -> Result<EpisodeState, EnvError> {
    if cfg.side < 4 {
        return Err(EnvError::InvalidParams("side must be at least 4"));
    }
    if !(0.0..0.5).contains(&cfg.density) {
        return Err(EnvError::InvalidParams("density must lie in [0, 0.5)"));
    }
    if cfg.num_agents < 1 {
        return Err(EnvError::InvalidParams("need at least one agent"));
    }
    if cfg.horizon < 1 {
        return Err(EnvError::InvalidParams("horizon must be positive"));
    }
    let cells = cfg.side * cfg.side;
    let n_obstacles = crate::math::floor(cfg.density * cells as f64) as usize;
    if cells - n_obstacles < 2 * cfg.num_agents {
        return Err(EnvError::InvalidParams("not enough free cells for starts and goals"));
    }

    let mut rng = rng::stream(&[rng::tag::INSTANCE, seed]);
    let mut order: Vec<usize> = (0..cells).collect();

    for _ in 0..MAX_GENERATION_ATTEMPTS {
        order.shuffle(&mut rng);
        let obstacle_cells: Vec<(usize, usize)> =
            order[..n_obstacles].iter().map(|&i| (i / cfg.side, i % cfg.side)).collect();
        let map = GridMap::new(cfg.side, cfg.density, &obstacle_cells);

        let starts = &order[n_obstacles..n_obstacles + cfg.num_agents];
        let goals = &order[n_obstacles + cfg.num_agents..n_obstacles + 2 * cfg.num_agents];

        let connected = starts.iter().zip(goals.iter()).all(|(&s, &g)| {
            bfs_reachable(&map, (s / cfg.side, s % cfg.side), (g / cfg.side, g % cfg.side))
        });
        if !connected {
            continue;
        }

        let agents: Vec<AgentState> = starts
            .iter()
            .zip(goals.iter())
            .map(|(&s, &g)| AgentState {
                pos: (s / cfg.side, s % cfg.side),
                goal: (g / cfg.side, g % cfg.side),
                reached: false,
            })
            .collect();
        return Ok(EpisodeState { map, agents, t: 0, horizon: cfg.horizon });
    }
    Err(EnvError::GenerationFailed(MAX_GENERATION_ATTEMPTS))
}

/// Breadth-first reachability over free cells (4-neighborhood).
pub fn bfs_reachable(map: &GridMap, from: (usize, usize), to: (usize, usize)) -> bool {
    if map.is_obstacle(from.0, from.1) || map.is_obstacle(to.0, to.1) {
        return false;
    }
    if from == to {
        return true;
    }
    let side = map.side;
    let mut seen = vec![false; side * side];
    let mut queue = VecDeque::new();
    seen[from.0 * side + from.1] = true;
    queue.push_back(from);
    while let Some((r, c)) = queue.pop_front() {
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if !map.in_bounds(nr, nc) {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if seen[nr * side + nc] || map.is_obstacle(nr, nc) {
                continue;
            }
            if (nr, nc) == to {
                return true;
            }
            seen[nr * side + nc] = true;
            queue.push_back((nr, nc));
        }
    }
    false
}

/// Local observation for one agent.
///
/// Channel 0 marks obstacles (cells beyond the grid count as obstacles),
/// channel 1 marks other agents, and channel 2 holds a single hint cell:
/// the goal itself when visible, otherwise the window-border cell nearest
/// (Euclidean, row-major tie-break) to the ray from the agent toward the
/// goal.
pub fn observe(state: &EpisodeState, agent_idx: usize) -> Obs {
    let agent = &state.agents[agent_idx];
    let (ar, ac) = (agent.pos.0 as isize, agent.pos.1 as isize);
    let mut obs = Obs::zeros();
    let r = OBS_RADIUS as isize;

    for dr in -r..=r {
        for dc in -r..=r {
            let (wr, wc) = ((dr + r) as usize, (dc + r) as usize);
            let (gr, gc) = (ar + dr, ac + dc);
            if !state.map.in_bounds(gr, gc) {
                obs.data[Obs::index(0, wr, wc)] = 1.0;
                continue;
            }
            if state.map.is_obstacle(gr as usize, gc as usize) {
                obs.data[Obs::index(0, wr, wc)] = 1.0;
            }
        }
    }

    for (i, other) in state.agents.iter().enumerate() {
        if i == agent_idx {
            continue;
        }
        let dr = other.pos.0 as isize - ar;
        let dc = other.pos.1 as isize - ac;
        if dr.abs() <= r && dc.abs() <= r {
            obs.data[Obs::index(1, (dr + r) as usize, (dc + r) as usize)] = 1.0;
        }
    }

    let gdr = agent.goal.0 as isize - ar;
    let gdc = agent.goal.1 as isize - ac;
    if gdr.abs() <= r && gdc.abs() <= r {
        obs.data[Obs::index(2, (gdr + r) as usize, (gdc + r) as usize)] = 1.0;
    } else {
        let (wr, wc) = hint_border_cell(gdr, gdc);
        obs.data[Obs::index(2, wr, wc)] = 1.0;
    }
    obs
}

/// Window-border cell nearest to the ray pointing at the (out-of-window)
/// goal; scanned row-major so ties resolve to the first candidate.
fn hint_border_cell(gdr: isize, gdc: isize) -> (usize, usize) {
    let r = OBS_RADIUS as isize;
    let (dx, dy) = (gdr as f64, gdc as f64);
    let norm_sq = dx * dx + dy * dy;
    let mut best = (0usize, 0usize);
    let mut best_dist = f64::INFINITY;
    for br in -r..=r {
        for bc in -r..=r {
            if br.abs() != r && bc.abs() != r {
                continue;
            }
            let (px, py) = (br as f64, bc as f64);
            // Distance from the border cell to the ray {t * goal_dir, t >= 0}.
            let t = ((px * dx + py * dy) / norm_sq).max(0.0);
            let (rx, ry) = (px - t * dx, py - t * dy);
            let dist = rx * rx + ry * ry;
            if dist < best_dist {
                best_dist = dist;
                best = ((br + r) as usize, (bc + r) as usize);
            }
        }
    }
    best
}
