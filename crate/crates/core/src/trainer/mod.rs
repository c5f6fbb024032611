//! The decentralized training loop.
//!
//! Each iteration every agent, independently and in parallel:
//!
//! 1. samples `B` episodes of length `H` from the joint policy in its own
//!    local parameter copy,
//! 2. fits its reward and utility critics to the sampled returns,
//! 3. estimates Lagrangian gradients and smooths them with importance-weighted
//!    momentum,
//!
//! after which the network exchanges gradient-tracking variables (first
//! barrier) and then parameters (second barrier). Cross-agent reads only
//! happen at those barriers, against snapshots, so results do not depend on
//! how workers are scheduled.

mod config;
mod metrics;

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

pub use config::RunConfig;
pub use metrics::{format_sig9, write_metrics_csv, MetricsRecord, CSV_HEADER};

use crate::consensus::{self, MixingRow, StepSizes, TrackerState};
use crate::envs::{Environment, Observation, ParticleWorld, N_ACTIONS};
use crate::error::{Error, Result};
use crate::estimator::{
    self, augment_utility, discounted_return, BaselineMode, Channel, ConstraintSpec,
    EstimatorInputs, GradEstimates, Step, Trajectory,
};
use crate::policy::{self, JointParams, MlpParams};
use crate::seed::{self, Phase, Stream};
use crate::topology::{build_graph, metropolis_weights, WeightMatrix};

/// Runs `batch` episodes of `horizon` steps in lockstep under the joint
/// policy `params`, recording per-step log-probabilities and both raw and
/// peak-augmented utilities.
pub fn sample_trajectories<E: Environment>(
    env: &E,
    params: &JointParams,
    batch: usize,
    horizon: usize,
    spec: &ConstraintSpec,
    rng: &mut Stream,
) -> Result<Vec<Trajectory>> {
    let n = env.n_agents();
    if params.n_agents() != n {
        return Err(Error::LengthMismatch {
            what: "policy slices vs agents",
            left: params.n_agents(),
            right: n,
        });
    }
    let mut states: Vec<E::State> = (0..batch).map(|_| env.reset(rng)).collect();
    let mut trajectories = vec![
        Trajectory {
            steps: Vec::with_capacity(horizon)
        };
        batch
    ];

    for _ in 0..horizon {
        let observations: Vec<Vec<Observation>> = states
            .iter()
            .map(|s| (0..n).map(|j| env.observe(s, j)).collect())
            .collect();
        // probs[j] is batch x N_ACTIONS for agent j
        let probs: Vec<Array2<f64>> = (0..n)
            .map(|j| {
                policy::policy_probs_batch(
                    params.slice(j),
                    policy::obs_matrix(observations.iter().map(|o| &o[j])).view(),
                )
            })
            .collect::<Result<_>>()?;

        for (b, (state, obs)) in states.iter_mut().zip(observations).enumerate() {
            let mut actions = Vec::with_capacity(n);
            let mut log_prob = 0.0;
            for p in &probs {
                let row = p.row(b);
                let a = policy::sample_action(row.as_slice().unwrap(), rng);
                log_prob += row[a].ln();
                actions.push(a);
            }
            let out = env.step(state, &actions)?;
            let augmented_utilities = out
                .utilities
                .iter()
                .zip(&out.peak_values)
                .map(|(&c, &k)| augment_utility(c, k, spec))
                .collect();
            trajectories[b].steps.push(Step {
                observations: obs,
                actions,
                rewards: out.rewards,
                utilities: out.utilities,
                augmented_utilities,
                peak_values: out.peak_values,
                log_prob,
            });
            *state = out.next_state;
        }
    }
    Ok(trajectories)
}

/// Critic regression data for `agent`: initial observations with full
/// returns, or every observation with its discounted reward-to-go.
fn critic_targets(
    batch: &[Trajectory],
    agent: usize,
    channel: Channel,
    gamma: f64,
    mode: BaselineMode,
) -> (Vec<Observation>, Vec<f64>) {
    let mut obs = Vec::new();
    let mut targets = Vec::new();
    for t in batch {
        let values = t.channel(agent, channel);
        match mode {
            BaselineMode::InitialState => {
                obs.push(t.steps[0].observations[agent]);
                targets.push(discounted_return(&values, gamma));
            }
            BaselineMode::PerStep => {
                let mut acc = 0.0;
                let mut to_go = vec![0.0; values.len()];
                for h in (0..values.len()).rev() {
                    acc = values[h] + gamma * acc;
                    to_go[h] = acc;
                }
                obs.extend(t.steps.iter().map(|s| s.observations[agent]));
                targets.extend(to_go);
            }
        }
    }
    (obs, targets)
}

/// Everything one agent keeps between iterations.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub index: usize,
    /// Local copy of the joint policy parameters.
    pub theta: JointParams,
    pub prev_theta: JointParams,
    pub lambda: f64,
    pub critic_reward: MlpParams,
    pub critic_utility: MlpParams,
    /// `x`, `y` and the previous smoothed estimates fed to tracking.
    pub tracker: TrackerState,
    /// Smoothed estimates of the current iteration.
    pub estimate: GradEstimates,
    /// Raw REINFORCE estimates of the current iteration.
    pub raw: GradEstimates,
}

#[derive(Debug, Clone, Copy, Default)]
struct BatchStats {
    objective: f64,
    utility: f64,
    violations: usize,
    steps: usize,
}

/// Hooks into the loop, for diagnostics and tests.
pub trait Observer {
    /// After tracking variables `x^{t+1}, y^{t+1}` are in place;
    /// `tracker.prev_u` then holds the estimates `û^t` that produced them.
    fn after_tracking(&mut self, _iteration: usize, _agents: &[AgentState]) {}

    /// After the parameter update of a main-loop iteration.
    fn after_update(&mut self, _iteration: usize, _agents: &[AgentState], _record: &MetricsRecord) {
    }
}

impl Observer for () {}

/// Final parameters of every agent and one metrics record per iteration.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: Vec<JointParams>,
    pub final_lambdas: Vec<f64>,
    pub metrics: Vec<MetricsRecord>,
}

pub struct Trainer<'a, E: Environment> {
    cfg: &'a RunConfig,
    env: &'a E,
    weights: WeightMatrix,
    rows: Vec<(MixingRow, Vec<usize>)>,
    agents: Vec<AgentState>,
    pool: rayon::ThreadPool,
}

fn diverged(iteration: usize, agent: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Diverged {
            iteration,
            agent,
            what,
        },
        other => other,
    }
}

impl<'a, E: Environment> Trainer<'a, E> {
    pub fn new(cfg: &'a RunConfig, env: &'a E) -> Result<Self> {
        cfg.validate()?;
        let n = env.n_agents();
        let weights = metropolis_weights(&build_graph(cfg.topology, n)?)?;
        let rows = (0..n)
            .map(|i| {
                let nb = weights.neighborhood(i);
                let pos = nb
                    .iter()
                    .position(|&j| j == i)
                    .expect("diagonal weight is positive");
                Ok((MixingRow::new(weights.neighborhood_weights(i), pos)?, nb))
            })
            .collect::<Result<Vec<_>>>()?;

        // Every agent starts from the same joint parameters.
        let slices: Vec<MlpParams> = (0..n)
            .map(|j| MlpParams::init_policy(&mut seed::stream(cfg.seed, j, Phase::PolicyInit, 0)))
            .collect();
        let theta = JointParams::concat(&slices)?;
        let dim = theta.len();
        let agents = (0..n)
            .map(|i| AgentState {
                index: i,
                theta: theta.clone(),
                prev_theta: theta.clone(),
                lambda: cfg.initial_lambda,
                critic_reward: MlpParams::init_critic(&mut seed::stream(
                    cfg.seed,
                    i,
                    Phase::CriticInit,
                    0,
                )),
                critic_utility: MlpParams::init_critic(&mut seed::stream(
                    cfg.seed,
                    i,
                    Phase::CriticInit,
                    1,
                )),
                tracker: TrackerState::zeros(dim),
                estimate: GradEstimates {
                    u: vec![0.0; dim],
                    v: 0.0,
                },
                raw: GradEstimates {
                    u: vec![0.0; dim],
                    v: 0.0,
                },
            })
            .collect();

        let mut builder = rayon::ThreadPoolBuilder::new();
        if cfg.workers > 0 {
            builder = builder.num_threads(cfg.workers);
        }
        let pool = builder.build().map_err(|e| Error::InvalidConfig {
            key: "workers",
            reason: e.to_string(),
        })?;
        Ok(Trainer {
            cfg,
            env,
            weights,
            rows,
            agents,
            pool,
        })
    }

    /// Replaces every agent's starting parameters.
    pub fn with_initial_params(mut self, params: Vec<JointParams>) -> Result<Self> {
        crate::error::ensure_len("initial parameter copies", params.len(), self.agents.len())?;
        for (agent, p) in self.agents.iter_mut().zip(params) {
            crate::error::ensure_len("initial parameters", p.len(), agent.theta.len())?;
            agent.prev_theta = p.clone();
            agent.theta = p;
        }
        Ok(self)
    }

    pub fn weights(&self) -> &WeightMatrix {
        &self.weights
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    /// Sample, fit critics and estimate gradients for every agent.
    fn estimate_phase(&mut self, t: usize) -> Result<Vec<BatchStats>> {
        let cfg = self.cfg;
        let env = self.env;
        self.pool.install(|| {
            self.agents
                .par_iter_mut()
                .map(|agent| {
                    let i = agent.index;
                    Self::estimate_agent(agent, env, cfg, t).map_err(diverged(t, i))
                })
                .collect()
        })
    }

    fn estimate_agent(
        agent: &mut AgentState,
        env: &E,
        cfg: &RunConfig,
        t: usize,
    ) -> Result<BatchStats> {
        let spec = cfg.constraint_spec();
        let beta = cfg.effective_beta();
        let clip = cfg.weight_clip();
        let i = agent.index;
        let mut rng = seed::stream(cfg.seed, i, Phase::Sampling, t);
        let batch = sample_trajectories(
            env,
            &agent.theta,
            cfg.batch_size,
            cfg.horizon,
            &spec,
            &mut rng,
        )?;

        for (critic, channel) in [
            (&mut agent.critic_reward, Channel::Reward),
            (&mut agent.critic_utility, Channel::Utility),
        ] {
            let (obs, targets) = critic_targets(&batch, i, channel, cfg.gamma, cfg.baseline);
            *critic = policy::critic_update(
                critic,
                policy::obs_matrix(&obs).view(),
                &targets,
                cfg.critic_lr,
            )?;
        }

        let raw = estimator::lagrangian_gradients(
            &batch,
            &EstimatorInputs {
                agent: i,
                params: &agent.theta,
                critic_reward: agent.critic_reward.as_slice(),
                critic_utility: agent.critic_utility.as_slice(),
                lambda: agent.lambda,
                spec: &spec,
                mode: cfg.baseline,
            },
        )?;

        let mut raw = raw;
        if cfg.max_grad_norm > 0.0 {
            estimator::cap_norm(&mut raw.u, cfg.max_grad_norm);
        }

        let estimate = if t == 0 || beta == 1.0 {
            raw.clone()
        } else {
            let omega = estimator::batch_importance_weight_stored(&batch, &agent.prev_theta, clip)?;
            GradEstimates {
                u: estimator::momentum_update(
                    &raw.u,
                    &agent.raw.u,
                    &agent.estimate.u,
                    beta,
                    omega,
                )?,
                v: estimator::momentum_update_scalar(
                    raw.v,
                    agent.raw.v,
                    agent.estimate.v,
                    beta,
                    omega,
                ),
            }
        };
        if !(estimate.v.is_finite() && estimate.u.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("gradient estimate"));
        }
        agent.raw = raw;
        agent.estimate = estimate;

        let b = batch.len() as f64;
        Ok(BatchStats {
            objective: batch
                .iter()
                .map(|t| discounted_return(&t.channel(i, Channel::Reward), cfg.gamma))
                .sum::<f64>()
                / b,
            utility: batch
                .iter()
                .map(|t| discounted_return(&t.raw_utilities(i), cfg.gamma))
                .sum::<f64>()
                / b,
            violations: batch.iter().map(|t| t.peak_violations(i, &spec)).sum(),
            steps: batch.iter().map(Trajectory::horizon).sum(),
        })
    }

    /// First barrier: `x_i ← Σ_j W_ij (x_j + û_j − û_j^{prev})`, same for `y`.
    fn tracking_phase(&mut self) -> Result<()> {
        let agents = &self.agents;
        let rows = &self.rows;
        let next: Vec<(Vec<f64>, f64)> = self.pool.install(|| {
            rows.par_iter()
                .map(|(row, nb)| {
                    let x: Vec<&[f64]> = nb.iter().map(|&j| &agents[j].tracker.x[..]).collect();
                    let u: Vec<&[f64]> = nb.iter().map(|&j| &agents[j].estimate.u[..]).collect();
                    let up: Vec<&[f64]> =
                        nb.iter().map(|&j| &agents[j].tracker.prev_u[..]).collect();
                    let y: Vec<f64> = nb.iter().map(|&j| agents[j].tracker.y).collect();
                    let v: Vec<f64> = nb.iter().map(|&j| agents[j].estimate.v).collect();
                    let vp: Vec<f64> = nb.iter().map(|&j| agents[j].tracker.prev_v).collect();
                    Ok((
                        consensus::update_tracking(row, &x, &u, &up)?,
                        consensus::update_tracking_scalar(row, &y, &v, &vp)?,
                    ))
                })
                .collect::<Result<_>>()
        })?;
        for (agent, (x, y)) in self.agents.iter_mut().zip(next) {
            agent.tracker.x = x;
            agent.tracker.y = y;
            agent.tracker.prev_u.clone_from(&agent.estimate.u);
            agent.tracker.prev_v = agent.estimate.v;
        }
        Ok(())
    }

    /// Second barrier: mix parameters along the tracked directions and
    /// project the duals.
    fn update_phase(&mut self, t: usize) -> Result<()> {
        let steps = StepSizes {
            primal: self.cfg.primal_lr,
            dual: self.cfg.dual_lr,
            lambda_max: self.cfg.lambda_max,
        };
        let agents = &self.agents;
        let rows = &self.rows;
        let next: Vec<(Vec<f64>, f64)> = self.pool.install(|| {
            rows.par_iter()
                .enumerate()
                .map(|(i, (row, nb))| {
                    let theta: Vec<&[f64]> =
                        nb.iter().map(|&j| agents[j].theta.as_slice()).collect();
                    let lambda: Vec<f64> = nb.iter().map(|&j| agents[j].lambda).collect();
                    let x: Vec<&[f64]> = nb.iter().map(|&j| &agents[j].tracker.x[..]).collect();
                    let y: Vec<f64> = nb.iter().map(|&j| agents[j].tracker.y).collect();
                    let (theta_next, dual) =
                        consensus::update_params(steps, row, &theta, &lambda, &x, &y)?;
                    if !theta_next.iter().all(|v| v.is_finite()) || !dual.lambda.is_finite() {
                        return Err(Error::Diverged {
                            iteration: t,
                            agent: i,
                            what: "policy parameters",
                        });
                    }
                    Ok((theta_next, dual.lambda))
                })
                .collect::<Result<_>>()
        })?;
        let n_slices = self.agents[0].theta.n_agents();
        for (agent, (theta, lambda)) in self.agents.iter_mut().zip(next) {
            let theta = JointParams::from_vec(theta, n_slices)?;
            agent.prev_theta = std::mem::replace(&mut agent.theta, theta);
            agent.lambda = lambda;
        }
        Ok(())
    }

    pub fn consensus_gap(&self) -> f64 {
        let all: Vec<&[f64]> = self.agents.iter().map(|a| a.theta.as_slice()).collect();
        consensus::consensus_gap(&all)
    }

    /// Runs the initialization pass and `T` main-loop iterations.
    pub fn run(mut self, observer: &mut impl Observer) -> Result<TrainOutcome> {
        let started = Instant::now();
        let n = self.agents.len();

        self.estimate_phase(0)?;
        self.tracking_phase()?;
        observer.after_tracking(0, &self.agents);

        let mut metrics = Vec::with_capacity(self.cfg.iterations);
        for t in 1..=self.cfg.iterations {
            let stats = self.estimate_phase(t)?;
            self.tracking_phase()?;
            observer.after_tracking(t, &self.agents);
            self.update_phase(t)?;

            let lambdas: Vec<f64> = self.agents.iter().map(|a| a.lambda).collect();
            let total_steps: usize = stats.iter().map(|s| s.steps).sum();
            let record = MetricsRecord {
                iteration: t,
                objective_return: stats.iter().map(|s| s.objective).sum::<f64>() / n as f64,
                utility_return: stats.iter().map(|s| s.utility).sum::<f64>() / n as f64,
                peak_violation_rate: stats.iter().map(|s| s.violations).sum::<usize>() as f64
                    / total_steps as f64,
                consensus_gap: self.consensus_gap(),
                mean_lambda: lambdas.iter().sum::<f64>() / n as f64,
                lambdas,
                wall_ms: if self.cfg.record_wall_time {
                    started.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                },
            };
            observer.after_update(t, &self.agents, &record);
            metrics.push(record);
        }

        Ok(TrainOutcome {
            final_lambdas: self.agents.iter().map(|a| a.lambda).collect(),
            final_params: self.agents.into_iter().map(|a| a.theta).collect(),
            metrics,
        })
    }
}

/// Trains on the particle world described by `cfg`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let env = ParticleWorld::new(cfg.env_config())?;
    Trainer::new(cfg, &env)?.run(&mut ())
}

/// Monte-Carlo performance of a set of trained agents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub objective_return: f64,
    pub utility_return: f64,
    pub peak_violation_rate: f64,
}

/// Decentralized execution: agent `j` acts with its own slice of its own
/// parameter copy `params[j]`.
pub fn executed_policy(params: &[JointParams]) -> Result<JointParams> {
    let slices: Vec<MlpParams> = params
        .iter()
        .enumerate()
        .map(|(j, p)| p.split().swap_remove(j))
        .collect();
    JointParams::concat(&slices)
}

pub fn evaluate<E: Environment>(
    params: &[JointParams],
    env: &E,
    episodes: usize,
    horizon: usize,
    spec: &ConstraintSpec,
    seed: u64,
) -> Result<Evaluation> {
    crate::error::ensure_len("parameter copies vs agents", params.len(), env.n_agents())?;
    if episodes == 0 {
        return Err(Error::EmptyBatch);
    }
    let policy = executed_policy(params)?;
    let mut rng = seed::stream(seed, 0, Phase::Evaluation, 0);
    let batch = sample_trajectories(env, &policy, episodes, horizon, spec, &mut rng)?;
    let n = env.n_agents();
    let per_agent = |f: &dyn Fn(&Trajectory, usize) -> f64| -> f64 {
        batch
            .iter()
            .map(|t| (0..n).map(|i| f(t, i)).sum::<f64>())
            .sum::<f64>()
            / (episodes * n) as f64
    };
    let objective_return =
        per_agent(&|t, i| discounted_return(&t.channel(i, Channel::Reward), spec.gamma));
    let utility_return = per_agent(&|t, i| discounted_return(&t.raw_utilities(i), spec.gamma));
    let violations: usize = batch
        .iter()
        .map(|t| (0..n).map(|i| t.peak_violations(i, spec)).sum::<usize>())
        .sum();
    Ok(Evaluation {
        objective_return,
        utility_return,
        peak_violation_rate: violations as f64 / (episodes * horizon * n) as f64,
    })
}

/// Parameters of a uniform-random policy for `n` agents.
pub fn uniform_policy(n: usize) -> Result<Vec<JointParams>> {
    let zeros = JointParams::concat(&vec![MlpParams::zeros(N_ACTIONS); n])?;
    Ok(vec![zeros; n])
}
