//! Constrained Markov game interface and the two particle-world benchmarks:
//! cooperative navigation and predator-prey.
//!
//! The world is a continuous plane. The safety box `[box_min, box_max]²` is
//! not a wall: agents may leave it, and being outside is the peak violation
//! (`K = 0`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Stream;

pub const OBS_DIM: usize = 20;
pub const N_ACTIONS: usize = 5;

const NEIGHBOR_SLOTS: usize = 4;

pub type Observation = [f64; OBS_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub fn from_index(i: usize) -> Result<Self> {
        Ok(match i {
            0 => Action::Up,
            1 => Action::Down,
            2 => Action::Left,
            3 => Action::Right,
            4 => Action::Stay,
            other => return Err(Error::ActionOutOfRange(other)),
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> [f64; 2] {
        match self {
            Action::Up => [0.0, 1.0],
            Action::Down => [0.0, -1.0],
            Action::Left => [-1.0, 0.0],
            Action::Right => [1.0, 0.0],
            Action::Stay => [0.0, 0.0],
        }
    }
}

/// Result of one environment transition. Every scalar channel is per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<S> {
    pub next_state: S,
    pub rewards: Vec<f64>,
    pub utilities: Vec<f64>,
    pub peak_values: Vec<f64>,
    /// Always false: episodes end at the horizon.
    pub done: bool,
}

/// A finite-agent constrained Markov game.
pub trait Environment: Sync {
    type State: Clone + Send + Sync;

    fn n_agents(&self) -> usize;

    /// Samples an initial state.
    fn reset(&self, rng: &mut Stream) -> Self::State;

    fn step(&self, state: &Self::State, joint_action: &[usize])
        -> Result<StepOutcome<Self::State>>;

    fn observe(&self, state: &Self::State, agent: usize) -> Observation;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    CoopNav,
    PredatorPrey,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::CoopNav => "coop_nav",
            EnvKind::PredatorPrey => "predator_prey",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Navigator,
    Predator,
    Prey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Cooperative navigation only; predator-prey derives it from the role counts.
    pub n_agents: usize,
    pub n_predators: usize,
    pub n_preys: usize,
    pub box_min: f64,
    pub box_max: f64,
    pub collision_radius: f64,
    pub move_step: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            kind: EnvKind::CoopNav,
            n_agents: 3,
            n_predators: 2,
            n_preys: 1,
            box_min: -1.0,
            box_max: 1.0,
            collision_radius: 0.1,
            move_step: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn coop_nav(n_agents: usize) -> Self {
        EnvConfig {
            kind: EnvKind::CoopNav,
            n_agents,
            ..Default::default()
        }
    }

    pub fn predator_prey(n_predators: usize, n_preys: usize) -> Self {
        EnvConfig {
            kind: EnvKind::PredatorPrey,
            n_agents: n_predators + n_preys,
            n_predators,
            n_preys,
            ..Default::default()
        }
    }

    pub fn agent_count(&self) -> usize {
        match self.kind {
            EnvKind::CoopNav => self.n_agents,
            EnvKind::PredatorPrey => self.n_predators + self.n_preys,
        }
    }

    pub fn roles(&self) -> Vec<Role> {
        match self.kind {
            EnvKind::CoopNav => vec![Role::Navigator; self.n_agents],
            EnvKind::PredatorPrey => std::iter::repeat_n(Role::Predator, self.n_predators)
                .chain(std::iter::repeat_n(Role::Prey, self.n_preys))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key, reason: &str| {
            Err(Error::InvalidConfig {
                key,
                reason: reason.into(),
            })
        };
        match self.kind {
            EnvKind::CoopNav if self.n_agents < 1 => return invalid("n_agents", "must be >= 1"),
            EnvKind::PredatorPrey if self.n_predators < 1 => {
                return invalid("n_predators", "must be >= 1")
            }
            EnvKind::PredatorPrey if self.n_preys < 1 => return invalid("n_preys", "must be >= 1"),
            _ => {}
        }
        if !(self.box_min.is_finite() && self.box_max.is_finite() && self.box_max > self.box_min) {
            return invalid("box_max", "must be finite and greater than box_min");
        }
        if !(self.collision_radius > 0.0 && self.collision_radius.is_finite()) {
            return invalid("collision_radius", "must be > 0");
        }
        if !(self.move_step > 0.0 && self.move_step.is_finite()) {
            return invalid("move_step", "must be > 0");
        }
        Ok(())
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.box_max - self.box_min)
    }

    fn diagonal(&self) -> f64 {
        (self.box_max - self.box_min) * std::f64::consts::SQRT_2
    }

    pub fn inside(&self, p: [f64; 2]) -> bool {
        p.iter().all(|&c| c >= self.box_min && c <= self.box_max)
    }

    /// Signed distance to the nearest box edge over the half width:
    /// 1 at the center, 0 on the boundary, negative outside.
    fn edge_margin(&self, p: [f64; 2]) -> f64 {
        let d = p
            .iter()
            .map(|&c| (c - self.box_min).min(self.box_max - c))
            .fold(f64::INFINITY, f64::min);
        d / self.half_width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub agent_positions: Vec<[f64; 2]>,
    /// Empty for predator-prey.
    pub landmark_positions: Vec<[f64; 2]>,
    pub agent_roles: Vec<Role>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Positions sampled uniformly inside the safety box.
pub fn reset(cfg: &EnvConfig, rng: &mut Stream) -> GlobalState {
    let mut sample = || {
        [
            rng.random_range(cfg.box_min..=cfg.box_max),
            rng.random_range(cfg.box_min..=cfg.box_max),
        ]
    };
    let n = cfg.agent_count();
    let agent_positions: Vec<_> = (0..n).map(|_| sample()).collect();
    let landmark_positions = match cfg.kind {
        EnvKind::CoopNav => (0..n).map(|_| sample()).collect(),
        EnvKind::PredatorPrey => Vec::new(),
    };
    GlobalState {
        agent_positions,
        landmark_positions,
        agent_roles: cfg.roles(),
    }
}

pub fn step(
    cfg: &EnvConfig,
    state: &GlobalState,
    joint_action: &[usize],
) -> Result<StepOutcome<GlobalState>> {
    let n = state.agent_positions.len();
    if joint_action.len() != n {
        return Err(Error::JointActionLength {
            expected: n,
            got: joint_action.len(),
        });
    }
    let mut next = state.clone();
    for (pos, &a) in next.agent_positions.iter_mut().zip(joint_action) {
        let d = Action::from_index(a)?.delta();
        pos[0] += cfg.move_step * d[0];
        pos[1] += cfg.move_step * d[1];
    }

    let pos = &next.agent_positions;
    let roles = &next.agent_roles;
    let within = |i: usize, j: usize| dist(pos[i], pos[j]) <= cfg.collision_radius;

    let mut rewards = vec![0.0; n];
    let mut utilities = vec![0.0; n];
    for i in 0..n {
        match cfg.kind {
            EnvKind::CoopNav => {
                let collisions = (0..n).filter(|&j| j != i && within(i, j)).count() as f64;
                rewards[i] = -dist(pos[i], next.landmark_positions[i]) - collisions;
                utilities[i] = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| dist(pos[i], pos[j]))
                    .fold(f64::INFINITY, f64::min);
                if !utilities[i].is_finite() {
                    // A lone navigator has no neighbor to keep distance from.
                    utilities[i] = cfg.diagonal();
                }
            }
            EnvKind::PredatorPrey => {
                let opposite = (0..n)
                    .filter(|&j| roles[j] != roles[i] && within(i, j))
                    .count() as f64;
                rewards[i] = match roles[i] {
                    Role::Predator => opposite,
                    _ => -opposite,
                };
                utilities[i] = (0..n)
                    .filter(|&j| j != i && roles[j] == roles[i])
                    .map(|j| dist(pos[i], pos[j]))
                    .fold(cfg.diagonal(), f64::min);
            }
        }
    }
    let peak_values = pos
        .iter()
        .map(|&p| if cfg.inside(p) { 1.0 } else { 0.0 })
        .collect();

    Ok(StepOutcome {
        next_state: next,
        rewards,
        utilities,
        peak_values,
        done: false,
    })
}

/// Relative offsets from `origin` to `points`, nearest first. Equidistant
/// points are ordered by their offset, so the result does not depend on
/// storage order.
fn nearest_offsets(origin: [f64; 2], points: impl Iterator<Item = [f64; 2]>) -> Vec<[f64; 2]> {
    let mut rel: Vec<(f64, [f64; 2])> = points
        .map(|p| {
            let d = [p[0] - origin[0], p[1] - origin[1]];
            (d[0].hypot(d[1]), d)
        })
        .collect();
    rel.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1[0].total_cmp(&b.1[0]))
            .then(a.1[1].total_cmp(&b.1[1]))
    });
    rel.into_iter().map(|(_, d)| d).collect()
}

/// Observation layout (20 entries):
///
/// | range    | contents                                                       |
/// |----------|----------------------------------------------------------------|
/// | `0..2`   | own position                                                   |
/// | `2..10`  | offsets to the 4 nearest other agents                          |
/// | `10..18` | coop-nav: own landmark, then nearest other landmarks; predator-prey: nearest opposite-role agents |
/// | `18`     | 1 if inside the safety box, else 0                             |
/// | `19`     | signed distance to the box edge over the half width            |
///
/// Missing slots are zero.
pub fn observe(cfg: &EnvConfig, state: &GlobalState, agent: usize) -> Observation {
    let mut obs = [0.0; OBS_DIM];
    let me = state.agent_positions[agent];
    obs[0] = me[0];
    obs[1] = me[1];

    let others = nearest_offsets(
        me,
        state
            .agent_positions
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != agent)
            .map(|(_, &p)| p),
    );
    for (slot, d) in others.iter().take(NEIGHBOR_SLOTS).enumerate() {
        obs[2 + 2 * slot..4 + 2 * slot].copy_from_slice(d);
    }

    let targets = match cfg.kind {
        EnvKind::CoopNav => {
            let own = state.landmark_positions[agent];
            let mut t = vec![[own[0] - me[0], own[1] - me[1]]];
            t.extend(nearest_offsets(
                me,
                state
                    .landmark_positions
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != agent)
                    .map(|(_, &p)| p),
            ));
            t
        }
        EnvKind::PredatorPrey => {
            let my_role = state.agent_roles[agent];
            nearest_offsets(
                me,
                state
                    .agent_positions
                    .iter()
                    .zip(&state.agent_roles)
                    .filter(|&(_, &r)| r != my_role)
                    .map(|(&p, _)| p),
            )
        }
    };
    for (slot, d) in targets.iter().take(NEIGHBOR_SLOTS).enumerate() {
        obs[10 + 2 * slot..12 + 2 * slot].copy_from_slice(d);
    }

    obs[18] = if cfg.inside(me) { 1.0 } else { 0.0 };
    obs[19] = cfg.edge_margin(me);
    obs
}

/// The particle world configured by an [`EnvConfig`].
#[derive(Debug, Clone)]
pub struct ParticleWorld {
    cfg: EnvConfig,
}

impl ParticleWorld {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ParticleWorld { cfg })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }
}

impl Environment for ParticleWorld {
    type State = GlobalState;

    fn n_agents(&self) -> usize {
        self.cfg.agent_count()
    }

    fn reset(&self, rng: &mut Stream) -> GlobalState {
        reset(&self.cfg, rng)
    }

    fn step(
        &self,
        state: &GlobalState,
        joint_action: &[usize],
    ) -> Result<StepOutcome<GlobalState>> {
        step(&self.cfg, state, joint_action)
    }

    fn observe(&self, state: &GlobalState, agent: usize) -> Observation {
        observe(&self.cfg, state, agent)
    }
}

/// Environment that emits zero reward, zero utility and never violates the
/// peak constraint. Every policy gradient it produces is exactly zero.
#[derive(Debug, Clone, Copy)]
pub struct NullEnv {
    pub n_agents: usize,
}

impl Environment for NullEnv {
    type State = ();

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn reset(&self, _rng: &mut Stream) {}

    fn step(&self, _state: &(), joint_action: &[usize]) -> Result<StepOutcome<()>> {
        if joint_action.len() != self.n_agents {
            return Err(Error::JointActionLength {
                expected: self.n_agents,
                got: joint_action.len(),
            });
        }
        if let Some(&a) = joint_action.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(Error::ActionOutOfRange(a));
        }
        Ok(StepOutcome {
            next_state: (),
            rewards: vec![0.0; self.n_agents],
            utilities: vec![0.0; self.n_agents],
            peak_values: vec![1.0; self.n_agents],
            done: false,
        })
    }

    fn observe(&self, _state: &(), _agent: usize) -> Observation {
        [0.0; OBS_DIM]
    }
}
