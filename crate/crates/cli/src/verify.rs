//! Self-checks of the numerical building blocks on a fresh build.

use depaint_core::consensus::{update_tracking, MixingRow};
use depaint_core::envs::{Environment, N_ACTIONS};
use depaint_core::policy::{self, MlpParams};
use depaint_core::seed::{stream, Phase};
use depaint_core::topology::{
    build_graph, metropolis_weights, second_largest_eigenvalue_magnitude, TopologyKind,
};
use depaint_core::{EnvConfig, ParticleWorld};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn doubly_stochastic() -> Check {
    let mut worst = 0.0f64;
    let mut worst_l2 = 0.0f64;
    let mut failures = Vec::new();
    for kind in TopologyKind::ALL {
        for n in 2..=16 {
            let built = build_graph(kind, n).and_then(|g| metropolis_weights(&g));
            match built.and_then(|w| {
                Ok((
                    w.max_row_sum_error().max(w.max_col_sum_error()),
                    second_largest_eigenvalue_magnitude(&w)?,
                ))
            }) {
                Ok((err, l2)) => {
                    worst = worst.max(err);
                    worst_l2 = worst_l2.max(l2);
                }
                Err(e) => failures.push(format!("{kind} n={n}: {e}")),
            }
        }
    }
    Check {
        name: "doubly-stochastic",
        pass: failures.is_empty() && worst <= 1e-12 && worst_l2 < 1.0,
        detail: if failures.is_empty() {
            format!("max |sum - 1| = {worst:.1e}, max |λ₂| = {worst_l2:.6}")
        } else {
            failures.join("; ")
        },
    }
}

fn gradients() -> Check {
    let world = ParticleWorld::new(EnvConfig::coop_nav(3)).expect("default world is valid");
    let mut worst_policy = 0.0f64;
    let mut worst_critic = 0.0f64;
    for trial in 0..5 {
        let state = world.reset(&mut stream(trial, 0, Phase::Evaluation, 0));
        let obs = world.observe(&state, trial as usize % 3);
        let x = policy::obs_matrix([&obs]);
        let action = trial as usize % N_ACTIONS;

        let p = MlpParams::init_policy(&mut stream(trial, 0, Phase::PolicyInit, 0)).into_vec();
        let analytic = policy::logprob_gradient(&p, &obs, action).expect("finite observation");
        let f = |q: &[f64]| policy::log_probs_batch(q, x.view(), &[action]).expect("finite")[0];
        worst_policy = worst_policy.max(relative_error(&p, &analytic, f));

        let target = [1.5];
        // move off the zero output layer
        let mut critic = MlpParams::init_critic(&mut stream(trial, 0, Phase::CriticInit, 0));
        for _ in 0..3 {
            critic = policy::critic_update(&critic, x.view(), &target, 0.5).expect("finite");
        }
        let c = critic.into_vec();
        let (_, analytic) = policy::critic_loss_gradient(&c, x.view(), &target).expect("finite");
        let f = |q: &[f64]| {
            policy::critic_loss_gradient(q, x.view(), &target)
                .expect("finite")
                .0
        };
        worst_critic = worst_critic.max(relative_error(&c, &analytic, f));
    }
    Check {
        name: "finite-difference gradients",
        pass: worst_policy < 1e-4 && worst_critic < 1e-4,
        detail: format!(
            "worst relative error policy {worst_policy:.2e}, critic {worst_critic:.2e}"
        ),
    }
}

/// Relative error of `analytic` against central differences of `f` on a
/// strided subset of coordinates.
fn relative_error(params: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let eps = 1e-5;
    let mut p = params.to_vec();
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for k in (0..p.len()).step_by(97) {
        let orig = p[k];
        p[k] = orig + eps;
        let up = f(&p);
        p[k] = orig - eps;
        let down = f(&p);
        p[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        diff += (numeric - analytic[k]).powi(2);
        norm_a += analytic[k] * analytic[k];
        norm_n += numeric * numeric;
    }
    diff.sqrt() / f64::max(norm_a, norm_n).sqrt().max(1e-12)
}

fn conservation() -> Check {
    let n = 5;
    let w = metropolis_weights(&build_graph(TopologyKind::Ring, n).expect("ring of five"))
        .expect("connected");
    let vecs = |seed: u64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                MlpParams::init_policy(&mut stream(seed, i, Phase::Perturbation, 0)).into_vec()
                    [..64]
                    .to_vec()
            })
            .collect()
    };
    let (x, u, up) = (vecs(1), vecs(2), vecs(3));
    let dim = x[0].len();
    let mut next_sum = vec![0.0; dim];
    for i in 0..n {
        let nb = w.neighborhood(i);
        let pos = nb.iter().position(|&j| j == i).expect("self loop");
        let row = MixingRow::new(w.neighborhood_weights(i), pos).expect("aligned row");
        let next = update_tracking(&row, &pick(&x, &nb), &pick(&u, &nb), &pick(&up, &nb))
            .expect("aligned lists");
        next_sum.iter_mut().zip(next).for_each(|(s, v)| *s += v);
    }
    let worst = (0..dim)
        .map(|k| {
            let expected: f64 = (0..n).map(|i| x[i][k] + u[i][k] - up[i][k]).sum();
            (next_sum[k] - expected).abs()
        })
        .fold(0.0, f64::max);
    Check {
        name: "tracking conservation",
        pass: worst < 1e-9,
        detail: format!("max |Σx' − Σ(x + u − u_prev)| = {worst:.1e}"),
    }
}

fn pick<'v>(v: &'v [Vec<f64>], nb: &[usize]) -> Vec<&'v [f64]> {
    nb.iter().map(|&j| v[j].as_slice()).collect()
}

pub fn run_checks() -> Vec<Check> {
    vec![doubly_stochastic(), gradients(), conservation()]
}
