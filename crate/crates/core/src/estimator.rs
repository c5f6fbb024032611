//! Gradient estimation for the per-agent Lagrangian
//! `J_R(θ) + λ (J_Ĉ(θ) − c)`.
//!
//! Utilities are peak-augmented before they enter any estimate:
//! `Ĉ = C − M` on steps where the peak value falls below its threshold.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::envs::Observation;
use crate::error::{ensure_len, Error, Result};
use crate::policy::{self, JointParams, POLICY_PARAMS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSpec {
    /// Average-constraint threshold.
    pub c: f64,
    /// Peak threshold.
    pub k: f64,
    /// Penalty subtracted from the utility on a peak violation.
    pub penalty: f64,
    pub gamma: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        ConstraintSpec {
            c: 10.0,
            k: 1.0,
            penalty: 100.0,
            gamma: 0.99,
        }
    }
}

pub fn augment_utility(utility: f64, peak_value: f64, spec: &ConstraintSpec) -> f64 {
    if peak_value < spec.k {
        utility - spec.penalty
    } else {
        utility
    }
}

/// `Σ_h γ^h · values[h]`
pub fn discounted_return(values: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for v in values {
        total += discount * v;
        discount *= gamma;
    }
    total
}

/// Discounted sums from every step to the end, each still discounted from
/// step zero: `tail[h] = Σ_{h' ≥ h} γ^{h'} values[h']`.
fn discounted_tails(values: &[f64], gamma: f64) -> Vec<f64> {
    let discounts: Vec<f64> = std::iter::successors(Some(1.0), |d| Some(d * gamma))
        .take(values.len())
        .collect();
    let mut tails = vec![0.0; values.len()];
    let mut acc = 0.0;
    for h in (0..values.len()).rev() {
        acc += discounts[h] * values[h];
        tails[h] = acc;
    }
    tails
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Reward,
    Utility,
}

/// Where the critic baseline enters the advantage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Whole-trajectory score times `(return − V(s⁰))`.
    #[default]
    InitialState,
    /// Each step's score times its discounted reward-to-go minus `γ^h V(s^h)`.
    PerStep,
}

/// One joint transition as seen by the sampling agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Observation of every agent, indexed by agent.
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub utilities: Vec<f64>,
    pub augmented_utilities: Vec<f64>,
    pub peak_values: Vec<f64>,
    /// Joint log-probability of `actions` under the generating parameters.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Per-step values of `agent`'s reward, or of its augmented utility.
    pub fn channel(&self, agent: usize, channel: Channel) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| match channel {
                Channel::Reward => s.rewards[agent],
                Channel::Utility => s.augmented_utilities[agent],
            })
            .collect()
    }

    pub fn raw_utilities(&self, agent: usize) -> Vec<f64> {
        self.steps.iter().map(|s| s.utilities[agent]).collect()
    }

    pub fn peak_violations(&self, agent: usize, spec: &ConstraintSpec) -> usize {
        self.steps
            .iter()
            .filter(|s| s.peak_values[agent] < spec.k)
            .count()
    }
}

/// A differentiable joint policy `π_θ(a | s) = Π_j π_θ[j](a_j | o_j)`.
pub trait ScoreFunction {
    fn dim(&self) -> usize;

    fn log_prob(&self, observations: &[Observation], actions: &[usize]) -> Result<f64>;

    /// Adds `weight · ∇_θ log π_θ(actions | observations)` to `grad`.
    fn add_score(
        &self,
        observations: &[Observation],
        actions: &[usize],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<()>;
}

/// State-value estimate used as a baseline.
pub trait Baseline {
    fn value(&self, obs: &Observation) -> Result<f64>;

    fn values(&self, obs: &[Observation]) -> Result<Vec<f64>> {
        obs.iter().map(|o| self.value(o)).collect()
    }
}

impl Baseline for f64 {
    fn value(&self, _obs: &Observation) -> Result<f64> {
        Ok(*self)
    }
}

/// A critic network's flat parameters, viewed as a baseline.
#[derive(Debug, Clone, Copy)]
pub struct Critic<'a>(pub &'a [f64]);

impl Baseline for Critic<'_> {
    fn value(&self, obs: &Observation) -> Result<f64> {
        policy::critic_forward(self.0, obs)
    }

    fn values(&self, obs: &[Observation]) -> Result<Vec<f64>> {
        policy::critic_forward_batch(self.0, policy::obs_matrix(obs).view())
    }
}

/// One agent's local copy of the joint policy.
#[derive(Debug, Clone, Copy)]
pub struct JointPolicy<'a>(pub &'a JointParams);

impl ScoreFunction for JointPolicy<'_> {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn log_prob(&self, observations: &[Observation], actions: &[usize]) -> Result<f64> {
        ensure_len("joint action", actions.len(), self.0.n_agents())?;
        let mut total = 0.0;
        for (j, (obs, &a)) in observations.iter().zip(actions).enumerate() {
            let m = policy::obs_matrix([obs]);
            total += policy::log_probs_batch(self.0.slice(j), m.view(), &[a])?[0];
        }
        Ok(total)
    }

    fn add_score(
        &self,
        observations: &[Observation],
        actions: &[usize],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        ensure_len("joint action", actions.len(), self.0.n_agents())?;
        ensure_len("gradient buffer", grad.len(), self.0.len())?;
        for (j, (obs, &a)) in observations.iter().zip(actions).enumerate() {
            let m = policy::obs_matrix([obs]);
            let slice = &mut grad[j * POLICY_PARAMS..(j + 1) * POLICY_PARAMS];
            policy::accumulate_score_batch(self.0.slice(j), m.view(), &[a], &[weight], slice)?;
        }
        Ok(())
    }
}

/// Per-step multipliers of `∇ log π(a^h | s^h)` for one trajectory, so that
/// the REINFORCE estimate is `Σ_h w_h ∇ log π(a^h | s^h)`.
pub fn advantage_weights(
    traj: &Trajectory,
    agent: usize,
    channel: Channel,
    baseline: &impl Baseline,
    gamma: f64,
    mode: BaselineMode,
) -> Result<Vec<f64>> {
    let values = traj.channel(agent, channel);
    match mode {
        BaselineMode::InitialState => {
            let first = traj.steps.first().ok_or(Error::EmptyBatch)?;
            let advantage =
                discounted_return(&values, gamma) - baseline.value(&first.observations[agent])?;
            Ok(vec![advantage; values.len()])
        }
        BaselineMode::PerStep => {
            let obs: Vec<Observation> = traj.steps.iter().map(|s| s.observations[agent]).collect();
            let v = baseline.values(&obs)?;
            let tails = discounted_tails(&values, gamma);
            let mut discount = 1.0;
            Ok(tails
                .into_iter()
                .zip(v)
                .map(|(tail, v)| {
                    let w = tail - discount * v;
                    discount *= gamma;
                    w
                })
                .collect())
        }
    }
}

/// Mini-batch REINFORCE estimate of `∇_θ J_F(θ)` for `agent`'s reward or
/// augmented-utility channel.
pub fn reinforce_gradient(
    batch: &[Trajectory],
    agent: usize,
    channel: Channel,
    policy: &impl ScoreFunction,
    baseline: &impl Baseline,
    gamma: f64,
    mode: BaselineMode,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; policy.dim()];
    for traj in batch {
        let weights = advantage_weights(traj, agent, channel, baseline, gamma, mode)?;
        for (step, w) in traj.steps.iter().zip(weights) {
            policy.add_score(&step.observations, &step.actions, scale * w, &mut grad)?;
        }
    }
    Ok(grad)
}

/// `grad_r + λ · grad_c`
pub fn lagrangian_primal_gradient(grad_r: &[f64], grad_c: &[f64], lambda: f64) -> Result<Vec<f64>> {
    ensure_len("primal gradients", grad_r.len(), grad_c.len())?;
    Ok(grad_r
        .iter()
        .zip(grad_c)
        .map(|(r, c)| r + lambda * c)
        .collect())
}

/// Batch estimate of `J_Ĉ` for `agent`.
pub fn utility_return_estimate(batch: &[Trajectory], agent: usize, gamma: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = batch
        .iter()
        .map(|t| discounted_return(&t.channel(agent, Channel::Utility), gamma))
        .sum();
    Ok(total / batch.len() as f64)
}

/// `Ĵ_Ĉ − c`
pub fn lagrangian_dual_gradient(
    batch: &[Trajectory],
    agent: usize,
    spec: &ConstraintSpec,
) -> Result<f64> {
    Ok(utility_return_estimate(batch, agent, spec.gamma)? - spec.c)
}

/// Bounds applied to importance weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightClip {
    pub min: f64,
    pub max: f64,
}

impl Default for WeightClip {
    fn default() -> Self {
        WeightClip {
            min: 0.1,
            max: 10.0,
        }
    }
}

impl WeightClip {
    pub fn apply(&self, w: f64) -> f64 {
        w.clamp(self.min, self.max)
    }
}

/// `p(τ | old) / p(τ | new)` before clipping. Transition probabilities cancel,
/// leaving the product of per-step policy ratios.
pub fn importance_weight_unclipped(
    traj: &Trajectory,
    old: &impl ScoreFunction,
    new: &impl ScoreFunction,
) -> Result<f64> {
    let mut log_ratio = 0.0;
    for s in &traj.steps {
        log_ratio += old.log_prob(&s.observations, &s.actions)?
            - new.log_prob(&s.observations, &s.actions)?;
    }
    if !log_ratio.is_finite() {
        return Err(Error::NonFinite("log-probability"));
    }
    Ok(log_ratio.exp())
}

pub fn importance_weight(
    traj: &Trajectory,
    old: &impl ScoreFunction,
    new: &impl ScoreFunction,
    clip: WeightClip,
) -> Result<f64> {
    Ok(clip.apply(importance_weight_unclipped(traj, old, new)?))
}

/// Primal and dual gradient estimates of one agent at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimates {
    pub u: Vec<f64>,
    pub v: f64,
}

/// `β·current + (1−β)·(prev_momentum + current − ω·prev_raw)`
pub fn momentum_update(
    current: &[f64],
    prev_raw: &[f64],
    prev_momentum: &[f64],
    beta: f64,
    omega: f64,
) -> Result<Vec<f64>> {
    ensure_len("previous raw estimate", prev_raw.len(), current.len())?;
    ensure_len(
        "previous momentum estimate",
        prev_momentum.len(),
        current.len(),
    )?;
    if beta == 1.0 {
        return Ok(current.to_vec());
    }
    Ok(current
        .iter()
        .zip(prev_raw)
        .zip(prev_momentum)
        .map(|((&c, &r), &m)| momentum_update_scalar(c, r, m, beta, omega))
        .collect())
}

pub fn momentum_update_scalar(
    current: f64,
    prev_raw: f64,
    prev_momentum: f64,
    beta: f64,
    omega: f64,
) -> f64 {
    if beta == 1.0 {
        return current;
    }
    beta * current + (1.0 - beta) * (prev_momentum + current - omega * prev_raw)
}

/// Everything [`lagrangian_gradients`] needs besides the batch.
pub struct EstimatorInputs<'a> {
    pub agent: usize,
    pub params: &'a JointParams,
    pub critic_reward: &'a [f64],
    pub critic_utility: &'a [f64],
    pub lambda: f64,
    pub spec: &'a ConstraintSpec,
    pub mode: BaselineMode,
}

/// Raw Lagrangian gradient estimates `(u, v)` for one agent.
///
/// Numerically this is `lagrangian_primal_gradient(reinforce_gradient(R),
/// reinforce_gradient(Ĉ), λ)` and `lagrangian_dual_gradient`, but both
/// channels share one batched backward pass per policy slice.
pub fn lagrangian_gradients(
    batch: &[Trajectory],
    inp: &EstimatorInputs<'_>,
) -> Result<GradEstimates> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let agent = inp.agent;
    let gamma = inp.spec.gamma;
    let scale = 1.0 / batch.len() as f64;

    let mut weights = Vec::with_capacity(batch.iter().map(Trajectory::horizon).sum());
    for traj in batch {
        let wr = advantage_weights(
            traj,
            agent,
            Channel::Reward,
            &Critic(inp.critic_reward),
            gamma,
            inp.mode,
        )?;
        let wc = advantage_weights(
            traj,
            agent,
            Channel::Utility,
            &Critic(inp.critic_utility),
            gamma,
            inp.mode,
        )?;
        weights.extend(
            wr.into_iter()
                .zip(wc)
                .map(|(r, c)| scale * (r + inp.lambda * c)),
        );
    }

    let n = inp.params.n_agents();
    let mut u = vec![0.0; inp.params.len()];
    for j in 0..n {
        let obs = stacked_observations(batch, j);
        let actions: Vec<usize> = batch
            .iter()
            .flat_map(|t| t.steps.iter().map(move |s| s.actions[j]))
            .collect();
        policy::accumulate_score_batch(
            inp.params.slice(j),
            obs.view(),
            &actions,
            &weights,
            &mut u[j * POLICY_PARAMS..(j + 1) * POLICY_PARAMS],
        )?;
    }
    let v = lagrangian_dual_gradient(batch, agent, inp.spec)?;
    Ok(GradEstimates { u, v })
}

/// Rescales `g` so its Euclidean norm is at most `max_norm`.
pub fn cap_norm(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// Every step's observation for agent `j`, in batch order.
pub fn stacked_observations(batch: &[Trajectory], j: usize) -> Array2<f64> {
    policy::obs_matrix(
        batch
            .iter()
            .flat_map(|t| t.steps.iter().map(move |s| &s.observations[j])),
    )
}

/// Per-trajectory joint log-probabilities under `params`, computed with one
/// batched forward pass per policy slice.
pub fn batch_log_probs(batch: &[Trajectory], params: &JointParams) -> Result<Vec<f64>> {
    let mut per_step = vec![0.0; batch.iter().map(Trajectory::horizon).sum()];
    for j in 0..params.n_agents() {
        let obs = stacked_observations(batch, j);
        let actions: Vec<usize> = batch
            .iter()
            .flat_map(|t| t.steps.iter().map(move |s| s.actions[j]))
            .collect();
        let lp = policy::log_probs_batch(params.slice(j), obs.view(), &actions)?;
        per_step.iter_mut().zip(lp).for_each(|(acc, l)| *acc += l);
    }
    let mut out = Vec::with_capacity(batch.len());
    let mut offset = 0;
    for t in batch {
        out.push(per_step[offset..offset + t.horizon()].iter().sum());
        offset += t.horizon();
    }
    Ok(out)
}

/// Mean clipped importance weight of a batch sampled under `new`, relative
/// to `old`.
pub fn batch_importance_weight(
    batch: &[Trajectory],
    old: &JointParams,
    new: &JointParams,
    clip: WeightClip,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lp_old = batch_log_probs(batch, old)?;
    let lp_new = batch_log_probs(batch, new)?;
    mean_clipped_ratio(&lp_old, &lp_new, clip)
}

/// Like [`batch_importance_weight`], reading the log-probabilities under the
/// generating parameters from the trajectories instead of recomputing them.
pub fn batch_importance_weight_stored(
    batch: &[Trajectory],
    old: &JointParams,
    clip: WeightClip,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lp_old = batch_log_probs(batch, old)?;
    let lp_new: Vec<f64> = batch
        .iter()
        .map(|t| t.steps.iter().map(|s| s.log_prob).sum())
        .collect();
    mean_clipped_ratio(&lp_old, &lp_new, clip)
}

fn mean_clipped_ratio(lp_old: &[f64], lp_new: &[f64], clip: WeightClip) -> Result<f64> {
    let mut total = 0.0;
    for (o, n) in lp_old.iter().zip(lp_new) {
        let log_ratio = o - n;
        if !log_ratio.is_finite() {
            return Err(Error::NonFinite("log-probability"));
        }
        total += clip.apply(log_ratio.exp());
    }
    Ok(total / lp_old.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::OBS_DIM;
    use crate::policy::MlpParams;
    use crate::seed::{stream, Phase};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const ZERO_OBS: Observation = [0.0; OBS_DIM];

    fn step(action: usize, reward: f64, utility: f64, peak: f64, spec: &ConstraintSpec) -> Step {
        Step {
            observations: vec![ZERO_OBS],
            actions: vec![action],
            rewards: vec![reward],
            utilities: vec![utility],
            augmented_utilities: vec![augment_utility(utility, peak, spec)],
            peak_values: vec![peak],
            log_prob: 0.0,
        }
    }

    /// Single-agent softmax over two actions with logits `θ`.
    struct TwoArm([f64; 2]);

    impl TwoArm {
        fn probs(&self) -> [f64; 2] {
            let m = self.0[0].max(self.0[1]);
            let e = [(self.0[0] - m).exp(), (self.0[1] - m).exp()];
            let s = e[0] + e[1];
            [e[0] / s, e[1] / s]
        }
    }

    impl ScoreFunction for TwoArm {
        fn dim(&self) -> usize {
            2
        }
        fn log_prob(&self, _o: &[Observation], a: &[usize]) -> Result<f64> {
            Ok(self.probs()[a[0]].ln())
        }
        fn add_score(&self, _o: &[Observation], a: &[usize], w: f64, g: &mut [f64]) -> Result<()> {
            let p = self.probs();
            for k in 0..2 {
                g[k] += w * ((a[0] == k) as u8 as f64 - p[k]);
            }
            Ok(())
        }
    }

    #[test]
    fn augmentation() {
        let spec = ConstraintSpec {
            penalty: 100.0,
            k: 1.0,
            ..Default::default()
        };
        assert_eq!(augment_utility(2.0, 1.0, &spec), 2.0);
        assert_eq!(augment_utility(2.0, 0.0, &spec), -98.0);
        let free = ConstraintSpec {
            penalty: 0.0,
            ..spec
        };
        assert_eq!(augment_utility(2.0, 0.0, &free), 2.0);
    }

    #[test]
    fn discounted_sums() {
        assert_abs_diff_eq!(
            discounted_return(&[1.0, 1.0, 1.0], 0.5),
            1.75,
            epsilon = 1e-15
        );
        assert_eq!(discounted_return(&[3.0, 7.0, -2.0], 0.0), 3.0);
        let closed = (1.0 - 0.99f64.powi(20)) / 0.01;
        assert_abs_diff_eq!(discounted_return(&[1.0; 20], 0.99), closed, epsilon = 1e-12);
        assert_abs_diff_eq!(closed, 18.209, epsilon = 1e-3);
        assert_eq!(discounted_tails(&[1.0, 2.0, 4.0], 0.5), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn vanishing_advantage_gives_zero_gradient() {
        let spec = ConstraintSpec::default();
        let traj = Trajectory {
            steps: vec![step(0, 2.0, 0.0, 1.0, &spec)],
        };
        let g = reinforce_gradient(
            &[traj],
            0,
            Channel::Reward,
            &TwoArm([0.3, -0.1]),
            &2.0,
            0.9,
            BaselineMode::InitialState,
        )
        .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn single_step_matches_hand_expansion() {
        let spec = ConstraintSpec::default();
        let policy = TwoArm([0.0, 0.0]);
        let traj = Trajectory {
            steps: vec![step(1, 3.0, 0.0, 1.0, &spec)],
        };
        let g = reinforce_gradient(
            &[traj],
            0,
            Channel::Reward,
            &policy,
            &1.0,
            0.9,
            BaselineMode::InitialState,
        )
        .unwrap();
        // score (onehot(1) − [½, ½]) times advantage (3 − 1)
        assert_eq!(g, vec![-1.0, 1.0]);
    }

    #[test]
    fn empty_batches_are_errors() {
        let p = TwoArm([0.0, 0.0]);
        let spec = ConstraintSpec::default();
        assert_eq!(
            reinforce_gradient(
                &[],
                0,
                Channel::Reward,
                &p,
                &0.0,
                0.9,
                BaselineMode::InitialState
            ),
            Err(Error::EmptyBatch)
        );
        assert_eq!(
            lagrangian_dual_gradient(&[], 0, &spec),
            Err(Error::EmptyBatch)
        );
    }

    #[test]
    fn primal_combination() {
        assert_eq!(
            lagrangian_primal_gradient(&[1.0, 2.0], &[3.0, 4.0], 2.0).unwrap(),
            vec![7.0, 10.0]
        );
        assert_eq!(
            lagrangian_primal_gradient(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            lagrangian_primal_gradient(&[1.0, 2.0], &[0.0, 0.0], 5.0).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(lagrangian_primal_gradient(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn dual_gradient_examples() {
        let spec = ConstraintSpec {
            c: 10.0,
            gamma: 0.5,
            ..Default::default()
        };
        let zero = Trajectory {
            steps: vec![step(0, 0.0, 0.0, 1.0, &spec); 3],
        };
        assert_abs_diff_eq!(lagrangian_dual_gradient(&[zero], 0, &spec).unwrap(), -10.0);

        let one = |u| Trajectory {
            steps: vec![step(0, 0.0, u, 1.0, &spec)],
        };
        assert_abs_diff_eq!(
            lagrangian_dual_gradient(&[one(8.0), one(12.0)], 0, &spec).unwrap(),
            0.0
        );

        let spec1 = ConstraintSpec { c: 1.0, ..spec };
        let ones = Trajectory {
            steps: vec![step(0, 0.0, 1.0, 1.0, &spec1); 3],
        };
        assert_abs_diff_eq!(
            lagrangian_dual_gradient(&[ones], 0, &spec1).unwrap(),
            0.75,
            epsilon = 1e-15
        );
    }

    #[test]
    fn importance_weight_examples() {
        let spec = ConstraintSpec::default();
        let traj = Trajectory {
            steps: vec![step(0, 0.0, 0.0, 1.0, &spec)],
        };
        let same = TwoArm([0.2, -0.4]);
        assert_eq!(
            importance_weight_unclipped(&traj, &same, &same).unwrap(),
            1.0
        );

        // π_old(0) = ½, π_new(0) = ¼
        let old = TwoArm([0.0, 0.0]);
        let new = TwoArm([0.0, 3f64.ln()]);
        let w = importance_weight(&traj, &old, &new, WeightClip::default()).unwrap();
        assert_abs_diff_eq!(w, 2.0, epsilon = 1e-12);

        let far = TwoArm([0.0, 20.0]);
        assert_eq!(
            importance_weight(&traj, &old, &far, WeightClip::default()).unwrap(),
            10.0
        );
    }

    #[test]
    fn importance_weight_equals_trajectory_probability_ratio() {
        // Two-step toy MDP: state 0 -> (action 0: state 0, action 1: state 1) with
        // transition probabilities that cancel in the ratio.
        let transition = |s: usize, a: usize, s2: usize| -> f64 {
            let p_stay = if a == 0 { 0.7 } else { 0.2 };
            let _ = s;
            if s2 == 0 {
                p_stay
            } else {
                1.0 - p_stay
            }
        };
        let old = TwoArm([0.4, -0.3]);
        let new = TwoArm([-0.2, 0.5]);
        let spec = ConstraintSpec::default();
        for a0 in 0..2 {
            for a1 in 0..2 {
                for s1 in 0..2 {
                    let traj_prob = |pol: &TwoArm| {
                        let p = pol.probs();
                        p[a0] * transition(0, a0, s1) * p[a1]
                    };
                    let ratio = traj_prob(&old) / traj_prob(&new);
                    let traj = Trajectory {
                        steps: vec![
                            step(a0, 0.0, 0.0, 1.0, &spec),
                            step(a1, 0.0, 0.0, 1.0, &spec),
                        ],
                    };
                    let w = importance_weight_unclipped(&traj, &old, &new).unwrap();
                    assert_abs_diff_eq!(w, ratio, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn momentum_examples() {
        assert_eq!(
            momentum_update(&[1.5, -2.0], &[9.0, 9.0], &[4.0, 4.0], 1.0, 3.0).unwrap(),
            vec![1.5, -2.0]
        );
        assert_eq!(
            momentum_update_scalar(-0.0, 1.0, 2.0, 1.0, 1.0).to_bits(),
            (-0.0f64).to_bits()
        );
        let m = momentum_update(&[5.0], &[5.0], &[2.0], 0.3, 1.0).unwrap();
        assert_abs_diff_eq!(m[0], 0.3 * 5.0 + 0.7 * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            momentum_update_scalar(10.0, 8.0, 9.0, 0.2, 1.0),
            10.8,
            epsilon = 1e-12
        );
        assert!(momentum_update(&[1.0, 2.0], &[1.0], &[1.0, 2.0], 0.5, 1.0).is_err());
    }

    #[test]
    fn bandit_estimator_is_unbiased() {
        // One state, two arms, H = 2, rewards r(0) = 1, r(1) = 3.
        let gamma = 0.9;
        let rewards = [1.0, 3.0];
        let policy = TwoArm([0.3, -0.2]);
        let p = policy.probs();
        let spec = ConstraintSpec::default();

        // exact: Σ_τ p(τ) · (Σ_h ∇ log π(a_h)) · G(τ)
        let mut exact = [0.0; 2];
        for a0 in 0..2 {
            for a1 in 0..2 {
                let prob = p[a0] * p[a1];
                let ret = rewards[a0] + gamma * rewards[a1];
                for k in 0..2 {
                    let score = ((a0 == k) as u8 as f64 - p[k]) + ((a1 == k) as u8 as f64 - p[k]);
                    exact[k] += prob * score * ret;
                }
            }
        }

        let mut rng = stream(99, 0, Phase::Sampling, 0);
        let batches = 20_000;
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for _ in 0..batches {
            let steps = (0..2)
                .map(|_| {
                    let a = policy::sample_action(&p, &mut rng);
                    step(a, rewards[a], 0.0, 1.0, &spec)
                })
                .collect();
            let g = reinforce_gradient(
                &[Trajectory { steps }],
                0,
                Channel::Reward,
                &policy,
                &0.5,
                gamma,
                BaselineMode::InitialState,
            )
            .unwrap();
            for k in 0..2 {
                sum[k] += g[k];
                sum_sq[k] += g[k] * g[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / batches as f64;
            let var = sum_sq[k] / batches as f64 - mean * mean;
            let se = (var / batches as f64).sqrt();
            assert!(
                (mean - exact[k]).abs() < 4.0 * se,
                "arm {k}: {mean} vs {}",
                exact[k]
            );
        }
    }

    fn sample_batch(
        params: &JointParams,
        n: usize,
        b: usize,
        h: usize,
        seed: u64,
    ) -> Vec<Trajectory> {
        let spec = ConstraintSpec::default();
        let mut rng = stream(seed, 0, Phase::Sampling, 0);
        use rand::Rng;
        (0..b)
            .map(|_| Trajectory {
                steps: (0..h)
                    .map(|_| {
                        let observations: Vec<Observation> = (0..n)
                            .map(|_| {
                                let mut o = [0.0; OBS_DIM];
                                o.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
                                o
                            })
                            .collect();
                        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
                        let peak_values: Vec<f64> = (0..n)
                            .map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 })
                            .collect();
                        let utilities: Vec<f64> =
                            (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                        let augmented_utilities = utilities
                            .iter()
                            .zip(&peak_values)
                            .map(|(&c, &k)| augment_utility(c, k, &spec))
                            .collect();
                        let log_prob = JointPolicy(params)
                            .log_prob(&observations, &actions)
                            .unwrap();
                        Step {
                            observations,
                            actions,
                            rewards: (0..n).map(|_| rng.random_range(-1.0..0.0)).collect(),
                            utilities,
                            augmented_utilities,
                            peak_values,
                            log_prob,
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    fn joint(n: usize, seed: u64) -> JointParams {
        let parts: Vec<_> = (0..n)
            .map(|j| MlpParams::init_policy(&mut stream(seed, j, Phase::PolicyInit, 0)))
            .collect();
        JointParams::concat(&parts).unwrap()
    }

    #[test]
    fn fused_estimator_matches_separate_channels() {
        let n = 2;
        let params = joint(n, 5);
        // nonzero output layer so the baseline actually matters
        let critic_r: Vec<f64> = MlpParams::init_critic(&mut stream(6, 0, Phase::CriticInit, 0))
            .into_vec()
            .into_iter()
            .enumerate()
            .map(|(i, w)| w + 0.01 * ((i % 5) as f64 - 2.0))
            .collect();
        let critic_c = MlpParams::init_critic(&mut stream(7, 0, Phase::CriticInit, 0)).into_vec();
        let spec = ConstraintSpec::default();
        let batch = sample_batch(&params, n, 3, 4, 8);
        for mode in [BaselineMode::InitialState, BaselineMode::PerStep] {
            let lambda = 0.7;
            let fused = lagrangian_gradients(
                &batch,
                &EstimatorInputs {
                    agent: 1,
                    params: &params,
                    critic_reward: &critic_r,
                    critic_utility: &critic_c,
                    lambda,
                    spec: &spec,
                    mode,
                },
            )
            .unwrap();
            let pol = JointPolicy(&params);
            let gr = reinforce_gradient(
                &batch,
                1,
                Channel::Reward,
                &pol,
                &Critic(&critic_r),
                spec.gamma,
                mode,
            )
            .unwrap();
            let gc = reinforce_gradient(
                &batch,
                1,
                Channel::Utility,
                &pol,
                &Critic(&critic_c),
                spec.gamma,
                mode,
            )
            .unwrap();
            let separate = lagrangian_primal_gradient(&gr, &gc, lambda).unwrap();
            let scale = separate.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (a, b) in fused.u.iter().zip(&separate) {
                assert!((a - b).abs() <= 1e-10 * scale.max(1.0));
            }
            assert_eq!(fused.v, lagrangian_dual_gradient(&batch, 1, &spec).unwrap());
        }
    }

    #[test]
    fn batched_importance_weight_matches_per_trajectory() {
        let n = 2;
        let old = joint(n, 1);
        let mut new = old.clone();
        new.as_mut_slice()
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x += 1e-3 * ((i % 7) as f64 - 3.0));
        let batch = sample_batch(&new, n, 4, 3, 2);
        let clip = WeightClip::default();
        let mean: f64 = batch
            .iter()
            .map(|t| importance_weight(t, &JointPolicy(&old), &JointPolicy(&new), clip).unwrap())
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(
            batch_importance_weight(&batch, &old, &new, clip).unwrap(),
            mean,
            epsilon = 1e-10
        );
        assert_eq!(
            batch_importance_weight(&batch, &new, &new, clip).unwrap(),
            1.0
        );
        // stored log-probs agree with recomputation
        let lp = batch_log_probs(&batch, &new).unwrap();
        let stored: f64 = batch[0].steps.iter().map(|s| s.log_prob).sum();
        assert_abs_diff_eq!(lp[0], stored, epsilon = 1e-10);
    }

    #[test]
    fn stored_importance_weight_matches_recomputed() {
        let n = 2;
        let old = joint(n, 3);
        let mut new = old.clone();
        new.as_mut_slice()
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x -= 2e-3 * ((i % 5) as f64 - 2.0));
        let batch = sample_batch(&new, n, 5, 4, 7);
        let clip = WeightClip::default();
        assert_abs_diff_eq!(
            batch_importance_weight_stored(&batch, &old, clip).unwrap(),
            batch_importance_weight(&batch, &old, &new, clip).unwrap(),
            epsilon = 1e-10
        );
        assert!(batch_importance_weight_stored(&[], &old, clip).is_err());
    }

    #[test]
    fn cap_norm_examples() {
        let mut g = [3.0, 4.0];
        cap_norm(&mut g, 10.0);
        assert_eq!(g, [3.0, 4.0]);
        cap_norm(&mut g, 1.0);
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.8, epsilon = 1e-15);
        let mut z = [0.0; 3];
        cap_norm(&mut z, 0.5);
        assert_eq!(z, [0.0; 3]);
    }

    proptest! {
        #[test]
        fn augmentation_never_increases_utility(c in -50.0f64..50.0, k in -1.0f64..2.0, m in 0.0f64..500.0) {
            let spec = ConstraintSpec { k: 1.0, penalty: m, ..Default::default() };
            let a = augment_utility(c, k, &spec);
            prop_assert!(a <= c);
            if k >= 1.0 {
                prop_assert_eq!(a, c);
            }
        }
    }
}
