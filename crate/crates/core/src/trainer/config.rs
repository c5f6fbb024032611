use std::path::PathBuf;

use serde::Deserialize;

use crate::envs::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::estimator::{BaselineMode, ConstraintSpec, WeightClip};
use crate::topology::TopologyKind;

/// A fully resolved training run. Every field has a default, so an empty
/// config file is a valid run.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of main-loop iterations `T`.
    pub iterations: usize,
    /// Episode length `H`.
    pub horizon: usize,
    /// Trajectories per agent per iteration `B`.
    pub batch_size: usize,
    pub primal_lr: f64,
    pub dual_lr: f64,
    pub critic_lr: f64,
    /// Momentum weight on the fresh estimate; 1 disables momentum.
    pub beta: f64,
    pub gamma: f64,
    /// Average-constraint threshold.
    pub c: f64,
    /// Peak threshold.
    pub k: f64,
    /// Utility penalty for a peak violation.
    pub penalty: f64,
    pub lambda_max: f64,
    pub initial_lambda: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Largest Euclidean norm of a raw primal estimate; longer estimates are
    /// rescaled to this length. 0 disables the cap.
    pub max_grad_norm: f64,
    pub baseline: BaselineMode,
    pub momentum: bool,
    pub topology: TopologyKind,
    pub env: EnvKind,
    /// Cooperative navigation agent count.
    pub n_agents: usize,
    pub n_predators: usize,
    pub n_preys: usize,
    pub box_min: f64,
    pub box_max: f64,
    pub collision_radius: f64,
    pub move_step: f64,
    pub seed: u64,
    /// Worker threads; 0 picks the machine default.
    pub workers: usize,
    /// Fill the `wall_ms` column. Off by default so metrics files are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        RunConfig {
            iterations: 2000,
            horizon: 20,
            batch_size: 8,
            primal_lr: 0.0003,
            dual_lr: 0.001,
            critic_lr: 0.001,
            beta: 0.2,
            gamma: 0.99,
            c: 10.0,
            k: 1.0,
            penalty: 100.0,
            lambda_max: 50.0,
            initial_lambda: 0.0,
            clip_min: 0.1,
            clip_max: 10.0,
            max_grad_norm: 100.0,
            baseline: BaselineMode::InitialState,
            momentum: true,
            topology: TopologyKind::Ring,
            env: env.kind,
            n_agents: env.n_agents,
            n_predators: env.n_predators,
            n_preys: env.n_preys,
            box_min: env.box_min,
            box_max: env.box_max,
            collision_radius: env.collision_radius,
            move_step: env.move_step,
            seed: 0,
            workers: 0,
            record_wall_time: false,
            output: PathBuf::from("metrics.csv"),
        }
    }
}

fn invalid(key: &'static str, reason: &str) -> Error {
    Error::InvalidConfig {
        key,
        reason: reason.to_string(),
    }
}

fn positive(key: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, "must be > 0"))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("iterations", self.iterations),
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
        ] {
            if v < 1 {
                return Err(invalid(key, "must be >= 1"));
            }
        }
        positive("primal_lr", self.primal_lr)?;
        positive("dual_lr", self.dual_lr)?;
        positive("critic_lr", self.critic_lr)?;
        positive("penalty", self.penalty)?;
        positive("lambda_max", self.lambda_max)?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma", "must be in (0,1)"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(invalid("beta", "must be in (0,1]"));
        }
        if !(self.initial_lambda >= 0.0 && self.initial_lambda <= self.lambda_max) {
            return Err(invalid("initial_lambda", "must be in [0, lambda_max]"));
        }
        if !(self.clip_min > 0.0
            && self.clip_min <= 1.0
            && self.clip_max >= 1.0
            && self.clip_max.is_finite())
        {
            return Err(invalid(
                "clip_min",
                "clip range must satisfy 0 < clip_min <= 1 <= clip_max",
            ));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return Err(invalid("max_grad_norm", "must be >= 0"));
        }
        for (key, v) in [("c", self.c), ("k", self.k)] {
            if !v.is_finite() {
                return Err(invalid(key, "must be finite"));
            }
        }
        if self.topology == TopologyKind::Bipartite && self.agent_count() < 2 {
            return Err(invalid("topology", "bipartite needs at least 2 agents"));
        }
        self.env_config().validate()
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            kind: self.env,
            n_agents: self.n_agents,
            n_predators: self.n_predators,
            n_preys: self.n_preys,
            box_min: self.box_min,
            box_max: self.box_max,
            collision_radius: self.collision_radius,
            move_step: self.move_step,
        }
    }

    pub fn agent_count(&self) -> usize {
        self.env_config().agent_count()
    }

    pub fn constraint_spec(&self) -> ConstraintSpec {
        ConstraintSpec {
            c: self.c,
            k: self.k,
            penalty: self.penalty,
            gamma: self.gamma,
        }
    }

    pub fn weight_clip(&self) -> WeightClip {
        WeightClip {
            min: self.clip_min,
            max: self.clip_max,
        }
    }

    /// Momentum weight actually applied.
    pub fn effective_beta(&self) -> f64 {
        if self.momentum {
            self.beta
        } else {
            1.0
        }
    }
}
