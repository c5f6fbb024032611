//! Fixtures shared by the benchmarks.

use depaint_core::estimator::{ConstraintSpec, Trajectory};
use depaint_core::policy::MlpParams;
use depaint_core::seed::{stream, Phase};
use depaint_core::trainer::sample_trajectories;
use depaint_core::{EnvConfig, JointParams, ParticleWorld};

pub struct Fixture {
    pub world: ParticleWorld,
    pub params: JointParams,
    pub critic: MlpParams,
    pub batch: Vec<Trajectory>,
    pub spec: ConstraintSpec,
}

/// Freshly initialized coop-nav agents with one sampled batch of `b`
/// episodes of length `h`.
pub fn fixture(n_agents: usize, b: usize, h: usize) -> Fixture {
    let world = ParticleWorld::new(EnvConfig::coop_nav(n_agents)).expect("valid world");
    let slices: Vec<MlpParams> = (0..n_agents)
        .map(|j| MlpParams::init_policy(&mut stream(0, j, Phase::PolicyInit, 0)))
        .collect();
    let params = JointParams::concat(&slices).expect("same shapes");
    let critic = MlpParams::init_critic(&mut stream(0, 0, Phase::CriticInit, 0));
    let spec = ConstraintSpec::default();
    let batch = sample_trajectories(
        &world,
        &params,
        b,
        h,
        &spec,
        &mut stream(0, 0, Phase::Sampling, 0),
    )
    .expect("sampling");
    Fixture {
        world,
        params,
        critic,
        batch,
        spec,
    }
}
