//! Gradient tracking, gossip mixing of parameters, and dual projection.
//!
//! All mixing is written as `z_i + Σ_{j≠i} W_ij (z_j − z_i)`, which equals
//! `Σ_j W_ij z_j` for a row-stochastic `W` but leaves `z_i` bit-for-bit
//! unchanged whenever every neighbor already agrees with it.

use crate::error::{ensure_len, Error, Result};

/// Per-agent tracking variables.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    /// Primal tracker.
    pub x: Vec<f64>,
    /// Dual tracker.
    pub y: f64,
    /// Gradient estimates from the previous iteration.
    pub prev_u: Vec<f64>,
    pub prev_v: f64,
}

impl TrackerState {
    pub fn zeros(dim: usize) -> Self {
        TrackerState {
            x: vec![0.0; dim],
            y: 0.0,
            prev_u: vec![0.0; dim],
            prev_v: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualState {
    pub lambda: f64,
}

/// Weights and neighbor indices of one row of `W`; `self_pos` is where the
/// agent itself sits in the list.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingRow {
    pub weights: Vec<f64>,
    pub self_pos: usize,
}

impl MixingRow {
    pub fn new(weights: Vec<f64>, self_pos: usize) -> Result<Self> {
        if self_pos >= weights.len() {
            return Err(Error::LengthMismatch {
                what: "self position in mixing row",
                left: self_pos,
                right: weights.len(),
            });
        }
        Ok(MixingRow { weights, self_pos })
    }

    /// A lone agent.
    pub fn identity() -> Self {
        MixingRow {
            weights: vec![1.0],
            self_pos: 0,
        }
    }

    fn check(&self, what: &'static str, len: usize) -> Result<()> {
        ensure_len(what, len, self.weights.len())
    }

    /// `Σ_j w_j z_j` in deviation form, where `z_j = f(j, k)` for component `k`.
    fn mix(&self, dim: usize, z: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let me = self.self_pos;
        (0..dim)
            .map(|k| {
                let own = z(me, k);
                let mut acc = 0.0;
                for (j, &w) in self.weights.iter().enumerate() {
                    if j != me {
                        acc += w * (z(j, k) - own);
                    }
                }
                own + acc
            })
            .collect()
    }
}

fn common_dim(what: &'static str, lists: &[&[&[f64]]]) -> Result<usize> {
    let dim = lists.first().and_then(|l| l.first()).map_or(0, |v| v.len());
    for list in lists {
        for v in *list {
            ensure_len(what, v.len(), dim)?;
        }
    }
    Ok(dim)
}

/// `x_i^{t+1} = Σ_j W_ij (x_j^t + u_j^t − u_j^{t−1})`
pub fn update_tracking(
    row: &MixingRow,
    x: &[&[f64]],
    u_curr: &[&[f64]],
    u_prev: &[&[f64]],
) -> Result<Vec<f64>> {
    row.check("tracking variables", x.len())?;
    row.check("current estimates", u_curr.len())?;
    row.check("previous estimates", u_prev.len())?;
    let dim = common_dim("tracking vector length", &[x, u_curr, u_prev])?;
    Ok(row.mix(dim, |j, k| x[j][k] + u_curr[j][k] - u_prev[j][k]))
}

/// Scalar form of [`update_tracking`] for the dual tracker.
pub fn update_tracking_scalar(
    row: &MixingRow,
    y: &[f64],
    v_curr: &[f64],
    v_prev: &[f64],
) -> Result<f64> {
    row.check("tracking variables", y.len())?;
    row.check("current estimates", v_curr.len())?;
    row.check("previous estimates", v_prev.len())?;
    Ok(row.mix(1, |j, _| y[j] + v_curr[j] - v_prev[j])[0])
}

/// Step sizes and dual bound for [`update_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub primal: f64,
    pub dual: f64,
    pub lambda_max: f64,
}

/// Ascent on `θ`, projected descent on `λ`:
///
/// ```text
/// θ_i ← Σ_j W_ij (θ_j + η₁ x_j)
/// λ_i ← clamp(Σ_j W_ij (λ_j − η₂ y_j), 0, λ_max)
/// ```
pub fn update_params(
    steps: StepSizes,
    row: &MixingRow,
    theta: &[&[f64]],
    lambda: &[f64],
    x_next: &[&[f64]],
    y_next: &[f64],
) -> Result<(Vec<f64>, DualState)> {
    row.check("neighbor parameters", theta.len())?;
    row.check("neighbor duals", lambda.len())?;
    row.check("neighbor primal trackers", x_next.len())?;
    row.check("neighbor dual trackers", y_next.len())?;
    let dim = common_dim("parameter vector length", &[theta, x_next])?;
    let eta1 = steps.primal;
    let eta2 = steps.dual;
    let theta_next = row.mix(dim, |j, k| theta[j][k] + eta1 * x_next[j][k]);
    let half = row.mix(1, |j, _| lambda[j] - eta2 * y_next[j])[0];
    Ok((
        theta_next,
        DualState {
            lambda: project_dual(half, steps.lambda_max),
        },
    ))
}

/// Projection onto `[0, λ_max]`.
pub fn project_dual(lambda: f64, lambda_max: f64) -> f64 {
    lambda.clamp(0.0, lambda_max)
}

/// Network mean, computed relative to the first vector so identical inputs
/// yield that exact vector back.
fn mean_vector(all: &[&[f64]]) -> Vec<f64> {
    let first = all[0];
    let n = all.len() as f64;
    (0..first.len())
        .map(|k| first[k] + all.iter().map(|v| v[k] - first[k]).sum::<f64>() / n)
        .collect()
}

/// `max_i ‖θ_i − θ̄‖_∞`
pub fn consensus_gap(all: &[&[f64]]) -> f64 {
    if all.is_empty() {
        return 0.0;
    }
    let mean = mean_vector(all);
    all.iter()
        .flat_map(|v| v.iter().zip(&mean).map(|(a, m)| (a - m).abs()))
        .fold(0.0, f64::max)
}

/// `(Σ_i ‖θ_i − θ̄‖²)^½`, the quantity a symmetric mixing step contracts by
/// `|λ₂(W)|`.
pub fn consensus_gap_euclidean(all: &[&[f64]]) -> f64 {
    if all.is_empty() {
        return 0.0;
    }
    let mean = mean_vector(all);
    all.iter()
        .flat_map(|v| v.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_graph, metropolis_weights, TopologyKind};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn row_of(w: &crate::topology::WeightMatrix, i: usize) -> (MixingRow, Vec<usize>) {
        let nb = w.neighborhood(i);
        let pos = nb.iter().position(|&j| j == i).unwrap();
        (MixingRow::new(w.neighborhood_weights(i), pos).unwrap(), nb)
    }

    #[test]
    fn single_agent_initial_tracking_equals_first_estimate() {
        let u0 = [1.5, -2.0];
        let zeros = [0.0, 0.0];
        let x1 = update_tracking(&MixingRow::identity(), &[&zeros], &[&u0], &[&zeros]).unwrap();
        assert_eq!(x1, u0.to_vec());
    }

    #[test]
    fn steady_gradient_leaves_tracker_unchanged() {
        let x = [0.3, 0.7];
        let u = [2.0, -1.0];
        let next = update_tracking(&MixingRow::identity(), &[&x], &[&u], &[&u]).unwrap();
        for (a, b) in next.iter().zip(x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ring_three_averages() {
        let w = metropolis_weights(&build_graph(TopologyKind::Ring, 3).unwrap()).unwrap();
        let xs = [[0.0], [3.0], [6.0]];
        let zero = [0.0];
        for i in 0..3 {
            let (row, nb) = row_of(&w, i);
            let x: Vec<&[f64]> = nb.iter().map(|&j| &xs[j][..]).collect();
            let z: Vec<&[f64]> = nb.iter().map(|_| &zero[..]).collect();
            let next = update_tracking(&row, &x, &z, &z).unwrap();
            assert_abs_diff_eq!(next[0], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let row = MixingRow::new(vec![0.5, 0.5], 0).unwrap();
        let a = [1.0];
        assert!(update_tracking(&row, &[&a], &[&a, &a], &[&a, &a]).is_err());
        assert!(update_tracking_scalar(&row, &[1.0, 2.0], &[1.0], &[1.0, 1.0]).is_err());
        let b = [1.0, 2.0];
        assert!(update_tracking(&row, &[&a, &b], &[&a, &a], &[&a, &a]).is_err());
        assert!(MixingRow::new(vec![1.0], 1).is_err());
    }

    #[test]
    fn zero_steps_keep_identical_parameters() {
        let row = MixingRow::new(vec![0.25, 0.5, 0.25], 1).unwrap();
        let theta = [0.1, 0.2, 0.3];
        let x = [5.0, -5.0, 1.0];
        let steps = StepSizes {
            primal: 0.0,
            dual: 0.0,
            lambda_max: 50.0,
        };
        let t: &[f64] = &theta;
        let xs: &[f64] = &x;
        let (next, dual) =
            update_params(steps, &row, &[t; 3], &[0.4; 3], &[xs; 3], &[3.0; 3]).unwrap();
        assert_eq!(next, theta.to_vec());
        assert_eq!(dual.lambda, 0.4);
    }

    #[test]
    fn single_agent_primal_ascent() {
        let steps = StepSizes {
            primal: 0.5,
            dual: 0.01,
            lambda_max: 50.0,
        };
        let (next, _) = update_params(
            steps,
            &MixingRow::identity(),
            &[&[1.0]],
            &[0.0],
            &[&[2.0]],
            &[0.0],
        )
        .unwrap();
        assert_eq!(next, vec![2.0]);
    }

    #[test]
    fn dual_is_projected_at_zero_and_cap() {
        let steps = StepSizes {
            primal: 0.0,
            dual: 0.01,
            lambda_max: 50.0,
        };
        let (_, d) = update_params(
            steps,
            &MixingRow::identity(),
            &[&[0.0]],
            &[0.1],
            &[&[0.0]],
            &[100.0],
        )
        .unwrap();
        assert_eq!(d.lambda, 0.0);
        let (_, d) = update_params(
            steps,
            &MixingRow::identity(),
            &[&[0.0]],
            &[49.99],
            &[&[0.0]],
            &[-100.0],
        )
        .unwrap();
        assert_eq!(d.lambda, 50.0);
        // negative dual gradient raises λ
        let (_, d) = update_params(
            steps,
            &MixingRow::identity(),
            &[&[0.0]],
            &[1.0],
            &[&[0.0]],
            &[-10.0],
        )
        .unwrap();
        assert_abs_diff_eq!(d.lambda, 1.1, epsilon = 1e-15);
    }

    #[test]
    fn gap_examples() {
        let a = [0.1, 0.7, -3.3];
        assert_eq!(consensus_gap(&[&a, &a, &a]), 0.0);
        assert_eq!(consensus_gap(&[&[0.0], &[2.0]]), 1.0);
        assert_eq!(consensus_gap_euclidean(&[&a, &a]), 0.0);
        assert_abs_diff_eq!(
            consensus_gap_euclidean(&[&[0.0], &[2.0]]),
            2f64.sqrt(),
            epsilon = 1e-15
        );
    }

    proptest! {
        #[test]
        fn gap_is_translation_invariant(
            vals in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..5),
            shift in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let refs: Vec<&[f64]> = vals.iter().map(|v| &v[..]).collect();
            let shifted: Vec<Vec<f64>> = vals.iter().map(|v| v.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect();
            let srefs: Vec<&[f64]> = shifted.iter().map(|v| &v[..]).collect();
            prop_assert!((consensus_gap(&refs) - consensus_gap(&srefs)).abs() < 1e-9);
        }

        #[test]
        fn tracking_conserves_network_sum(
            kind_idx in 0usize..3,
            n in 2usize..7,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let kind = TopologyKind::ALL[kind_idx];
            let w = metropolis_weights(&build_graph(kind, n).unwrap()).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut vecs = |s: f64| -> Vec<Vec<f64>> { (0..n).map(|_| (0..4).map(|_| rng.random_range(-s..s)).collect()).collect() };
            let x = vecs(10.0);
            let u = vecs(5.0);
            let up = vecs(5.0);
            fn pick<'v>(v: &'v [Vec<f64>], nb: &[usize]) -> Vec<&'v [f64]> {
                nb.iter().map(|&j| &v[j][..]).collect()
            }
            let mut sum_next = [0.0; 4];
            for i in 0..n {
                let (row, nb) = row_of(&w, i);
                let (px, pu, pup) = (pick(&x, &nb), pick(&u, &nb), pick(&up, &nb));
                let next = update_tracking(&row, &px, &pu, &pup).unwrap();
                for k in 0..4 { sum_next[k] += next[k]; }
            }
            for k in 0..4 {
                let expected: f64 = (0..n).map(|i| x[i][k] + u[i][k] - up[i][k]).sum();
                prop_assert!((sum_next[k] - expected).abs() < 1e-9);
            }
        }
    }
}
