use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use depaint_bench::fixture;
use depaint_core::consensus::{update_tracking, MixingRow};
use depaint_core::estimator::{
    batch_importance_weight_stored, lagrangian_gradients, stacked_observations, BaselineMode,
    EstimatorInputs, WeightClip,
};
use depaint_core::policy;
use depaint_core::seed::{stream, Phase};
use depaint_core::topology::{
    build_graph, metropolis_weights, second_largest_eigenvalue_magnitude, TopologyKind,
};
use depaint_core::trainer::{sample_trajectories, Trainer};
use depaint_core::RunConfig;
use std::hint::black_box;

fn networks(c: &mut Criterion) {
    let f = fixture(3, 8, 20);
    let obs = stacked_observations(&f.batch, 0);
    let slice = f.params.slice(0);
    let actions: Vec<usize> = f
        .batch
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| s.actions[0]))
        .collect();
    let weights = vec![0.5; actions.len()];

    c.bench_function("policy_probs_160", |b| {
        b.iter(|| policy::policy_probs_batch(slice, black_box(obs.view())).unwrap())
    });
    c.bench_function("score_backward_160", |b| {
        b.iter_batched(
            || vec![0.0; slice.len()],
            |mut grad| {
                policy::accumulate_score_batch(slice, obs.view(), &actions, &weights, &mut grad)
                    .unwrap()
            },
            BatchSize::LargeInput,
        )
    });
    let targets = vec![1.0; 8];
    let first = obs.slice(ndarray::s![..8, ..]);
    c.bench_function("critic_update_8", |b| {
        b.iter(|| policy::critic_update(&f.critic, first, &targets, 1e-3).unwrap())
    });
}

fn estimation(c: &mut Criterion) {
    let f = fixture(3, 8, 20);
    c.bench_function("sample_b8_h20_n3", |b| {
        b.iter(|| {
            sample_trajectories(
                &f.world,
                &f.params,
                8,
                20,
                &f.spec,
                &mut stream(0, 0, Phase::Sampling, 1),
            )
            .unwrap()
        })
    });
    let inputs = EstimatorInputs {
        agent: 0,
        params: &f.params,
        critic_reward: f.critic.as_slice(),
        critic_utility: f.critic.as_slice(),
        lambda: 1.0,
        spec: &f.spec,
        mode: BaselineMode::InitialState,
    };
    c.bench_function("lagrangian_gradients_n3", |b| {
        b.iter(|| lagrangian_gradients(black_box(&f.batch), &inputs).unwrap())
    });
    c.bench_function("importance_weight_n3", |b| {
        b.iter(|| {
            batch_importance_weight_stored(black_box(&f.batch), &f.params, WeightClip::default())
                .unwrap()
        })
    });
}

fn mixing(c: &mut Criterion) {
    let f = fixture(3, 1, 1);
    let dim = f.params.len();
    let x = vec![vec![0.1; dim]; 3];
    let u = vec![vec![0.2; dim]; 3];
    let up = vec![vec![0.3; dim]; 3];
    let row = MixingRow::new(vec![1.0 / 3.0; 3], 0).unwrap();
    let (x, u, up) = (refs(&x), refs(&u), refs(&up));
    c.bench_function("update_tracking_n3", |b| {
        b.iter(|| update_tracking(&row, black_box(&x), &u, &up).unwrap())
    });

    c.bench_function("metropolis_lambda2_ring16", |b| {
        b.iter(|| {
            let w = metropolis_weights(&build_graph(TopologyKind::Ring, 16).unwrap()).unwrap();
            second_largest_eigenvalue_magnitude(&w).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let cfg = RunConfig {
        iterations: 5,
        ..Default::default()
    };
    let env = depaint_core::ParticleWorld::new(cfg.env_config()).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("five_iterations_n3", |b| {
        b.iter(|| Trainer::new(&cfg, &env).unwrap().run(&mut ()).unwrap())
    });
    group.finish();
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

criterion_group!(benches, networks, estimation, mixing, training);
criterion_main!(benches);
