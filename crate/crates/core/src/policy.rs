//! Policy and critic networks with hand-written backpropagation.
//!
//! Both networks share the architecture `20 -> 128 -> 64 -> out` with tanh
//! hidden units. The policy ends in a softmax over the five actions, the
//! critic in a single linear unit. Parameters live in flat `f64` buffers so
//! that consensus mixing can treat them as plain vectors; the layout is
//! `[w1, b1, w2, b2, w3, b3]` with each weight matrix stored row-major as
//! `fan_in x fan_out`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use crate::envs::{Observation, N_ACTIONS, OBS_DIM};
use crate::error::{ensure_len, Error, Result};

pub const HIDDEN1: usize = 128;
pub const HIDDEN2: usize = 64;

/// Number of parameters of a network with `output` output units.
pub const fn param_count(output: usize) -> usize {
    OBS_DIM * HIDDEN1 + HIDDEN1 + HIDDEN1 * HIDDEN2 + HIDDEN2 + HIDDEN2 * output + output
}

pub const POLICY_PARAMS: usize = param_count(N_ACTIONS);
pub const CRITIC_PARAMS: usize = param_count(1);

#[derive(Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

const fn offsets(output: usize) -> Offsets {
    let w1 = 0;
    let b1 = w1 + OBS_DIM * HIDDEN1;
    let w2 = b1 + HIDDEN1;
    let b2 = w2 + HIDDEN1 * HIDDEN2;
    let w3 = b2 + HIDDEN2;
    let b3 = w3 + HIDDEN2 * output;
    Offsets {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        end: b3 + output,
    }
}

struct Layers<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
    w3: ArrayView2<'a, f64>,
    b3: ArrayView1<'a, f64>,
}

fn layers(p: &[f64], output: usize) -> Layers<'_> {
    let o = offsets(output);
    let mat = |start, rows, cols| {
        ArrayView2::from_shape((rows, cols), &p[start..start + rows * cols]).unwrap()
    };
    let vec = |start, len| ArrayView1::from(&p[start..start + len]);
    Layers {
        w1: mat(o.w1, OBS_DIM, HIDDEN1),
        b1: vec(o.b1, HIDDEN1),
        w2: mat(o.w2, HIDDEN1, HIDDEN2),
        b2: vec(o.b2, HIDDEN2),
        w3: mat(o.w3, HIDDEN2, output),
        b3: vec(o.b3, output),
    }
}

struct LayersMut<'a> {
    w1: ArrayViewMut2<'a, f64>,
    b1: ArrayViewMut1<'a, f64>,
    w2: ArrayViewMut2<'a, f64>,
    b2: ArrayViewMut1<'a, f64>,
    w3: ArrayViewMut2<'a, f64>,
    b3: ArrayViewMut1<'a, f64>,
}

fn layers_mut(p: &mut [f64], output: usize) -> LayersMut<'_> {
    let o = offsets(output);
    let (w1, rest) = p.split_at_mut(o.b1);
    let (b1, rest) = rest.split_at_mut(o.w2 - o.b1);
    let (w2, rest) = rest.split_at_mut(o.b2 - o.w2);
    let (b2, rest) = rest.split_at_mut(o.w3 - o.b2);
    let (w3, rest) = rest.split_at_mut(o.b3 - o.w3);
    let b3 = &mut rest[..o.end - o.b3];
    LayersMut {
        w1: ArrayViewMut2::from_shape((OBS_DIM, HIDDEN1), w1).unwrap(),
        b1: ArrayViewMut1::from(b1),
        w2: ArrayViewMut2::from_shape((HIDDEN1, HIDDEN2), w2).unwrap(),
        b2: ArrayViewMut1::from(b2),
        w3: ArrayViewMut2::from_shape((HIDDEN2, output), w3).unwrap(),
        b3: ArrayViewMut1::from(b3),
    }
}

/// `tanh` through a single `exp`, several times cheaper than the libm
/// routine. Absolute error stays within a few ulps of 1.
#[inline]
fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

/// Activations of a batched forward pass, kept for backpropagation.
struct Forward {
    h1: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

fn forward(p: &[f64], output: usize, x: ArrayView2<'_, f64>) -> Forward {
    let l = layers(p, output);
    let mut h1 = x.dot(&l.w1) + &l.b1;
    h1.mapv_inplace(tanh);
    let mut h2 = h1.dot(&l.w2) + &l.b2;
    h2.mapv_inplace(tanh);
    let out = h2.dot(&l.w3) + &l.b3;
    Forward { h1, h2, out }
}

/// Accumulates into `grad` the parameter gradient given `d_out`, the loss
/// gradient with respect to the network output.
fn backward(
    p: &[f64],
    output: usize,
    x: ArrayView2<'_, f64>,
    fwd: &Forward,
    d_out: &Array2<f64>,
    grad: &mut [f64],
) {
    let l = layers(p, output);
    let mut g = layers_mut(grad, output);

    ndarray::linalg::general_mat_mul(1.0, &fwd.h2.t(), d_out, 1.0, &mut g.w3);
    g.b3 += &d_out.sum_axis(Axis(0));

    let mut d_h2 = d_out.dot(&l.w3.t());
    ndarray::Zip::from(&mut d_h2)
        .and(&fwd.h2)
        .for_each(|d, &h| *d *= 1.0 - h * h);
    ndarray::linalg::general_mat_mul(1.0, &fwd.h1.t(), &d_h2, 1.0, &mut g.w2);
    g.b2 += &d_h2.sum_axis(Axis(0));

    let mut d_h1 = d_h2.dot(&l.w2.t());
    ndarray::Zip::from(&mut d_h1)
        .and(&fwd.h1)
        .for_each(|d, &h| *d *= 1.0 - h * h);
    ndarray::linalg::general_mat_mul(1.0, &x.t(), &d_h1, 1.0, &mut g.w1);
    g.b1 += &d_h1.sum_axis(Axis(0));
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

fn log_softmax_at(row: ArrayView1<'_, f64>, action: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    row[action] - lse
}

fn check_finite(x: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Stacks observations into an `m x 20` matrix.
pub fn obs_matrix<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Array2<f64> {
    let flat: Vec<f64> = obs.into_iter().flat_map(|o| o.iter().copied()).collect();
    let rows = flat.len() / OBS_DIM;
    Array2::from_shape_vec((rows, OBS_DIM), flat).unwrap()
}

fn single(obs: &Observation) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, OBS_DIM), &obs[..]).unwrap()
}

/// Owned parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    data: Vec<f64>,
    output: usize,
}

impl MlpParams {
    pub fn zeros(output: usize) -> Self {
        MlpParams {
            data: vec![0.0; param_count(output)],
            output,
        }
    }

    pub fn from_vec(data: Vec<f64>, output: usize) -> Result<Self> {
        ensure_len("network parameters", data.len(), param_count(output))?;
        Ok(MlpParams { data, output })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init_policy(rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(N_ACTIONS);
        p.fill_uniform(rng, true);
        p
    }

    /// Like [`Self::init_policy`] but the output layer starts at zero, so a
    /// fresh critic predicts 0 everywhere.
    pub fn init_critic(rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(1);
        p.fill_uniform(rng, false);
        p
    }

    fn fill_uniform(&mut self, rng: &mut impl Rng, output_layer: bool) {
        let o = offsets(self.output);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut self.data[range] {
                *w = rng.random_range(-bound..bound);
            }
        };
        fill(o.w1..o.b1, OBS_DIM);
        fill(o.w2..o.b2, HIDDEN1);
        if output_layer {
            fill(o.w3..o.b3, HIDDEN2);
        }
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

pub type ActionDistribution = [f64; N_ACTIONS];

pub fn policy_forward(p: &[f64], obs: &Observation) -> Result<ActionDistribution> {
    let probs = policy_probs_batch(p, single(obs))?;
    let mut dist = [0.0; N_ACTIONS];
    dist.copy_from_slice(probs.row(0).as_slice().unwrap());
    Ok(dist)
}

/// Row-wise action probabilities for a batch of observations.
pub fn policy_probs_batch(p: &[f64], obs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_finite(obs, "observation")?;
    let probs = softmax_rows(forward(p, N_ACTIONS, obs).out);
    check_finite(probs.view(), "policy output")?;
    Ok(probs)
}

/// `log π(actions[r] | obs[r])` for every row.
pub fn log_probs_batch(p: &[f64], obs: ArrayView2<'_, f64>, actions: &[usize]) -> Result<Vec<f64>> {
    ensure_len("actions vs observations", actions.len(), obs.nrows())?;
    check_finite(obs, "observation")?;
    let fwd = forward(p, N_ACTIONS, obs);
    let lp: Vec<f64> = fwd
        .out
        .rows()
        .into_iter()
        .zip(actions)
        .map(|(row, &a)| log_softmax_at(row, a))
        .collect();
    if lp.iter().all(|v| v.is_finite()) {
        Ok(lp)
    } else {
        Err(Error::NonFinite("log-probability"))
    }
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_action(dist: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Adds `Σ_r weights[r] · ∇ log π(actions[r] | obs[r])` to `grad`.
pub fn accumulate_score_batch(
    p: &[f64],
    obs: ArrayView2<'_, f64>,
    actions: &[usize],
    weights: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    ensure_len("actions vs observations", actions.len(), obs.nrows())?;
    ensure_len("weights vs observations", weights.len(), obs.nrows())?;
    ensure_len("policy gradient buffer", grad.len(), POLICY_PARAMS)?;
    check_finite(obs, "observation")?;
    let fwd = forward(p, N_ACTIONS, obs);
    let mut d_out = softmax_rows(fwd.out.clone());
    check_finite(d_out.view(), "policy output")?;
    // d log softmax_a / d z = onehot(a) - p
    for ((mut row, &a), &w) in d_out.rows_mut().into_iter().zip(actions).zip(weights) {
        if a >= N_ACTIONS {
            return Err(Error::ActionOutOfRange(a));
        }
        row.mapv_inplace(|q| -q);
        row[a] += 1.0;
        row *= w;
    }
    backward(p, N_ACTIONS, obs, &fwd, &d_out, grad);
    if grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("policy gradient"))
    }
}

/// Exact gradient of `log π(action | obs)` with respect to every parameter.
pub fn logprob_gradient(p: &[f64], obs: &Observation, action: usize) -> Result<Vec<f64>> {
    if action >= N_ACTIONS {
        return Err(Error::ActionOutOfRange(action));
    }
    let mut grad = vec![0.0; POLICY_PARAMS];
    accumulate_score_batch(p, single(obs), &[action], &[1.0], &mut grad)?;
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

pub fn critic_forward(p: &[f64], obs: &Observation) -> Result<f64> {
    Ok(critic_forward_batch(p, single(obs))?[0])
}

pub fn critic_forward_batch(p: &[f64], obs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    check_finite(obs, "observation")?;
    let out = forward(p, 1, obs).out;
    check_finite(out.view(), "critic output")?;
    Ok(out.into_raw_vec_and_offset().0)
}

/// Loss `½ · mean((V(obs) - target)²)` and its parameter gradient.
pub fn critic_loss_gradient(
    p: &[f64],
    obs: ArrayView2<'_, f64>,
    targets: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    ensure_len("targets vs observations", targets.len(), obs.nrows())?;
    check_finite(obs, "observation")?;
    let fwd = forward(p, 1, obs);
    let m = targets.len() as f64;
    let err = Array1::from_iter(fwd.out.column(0).iter().zip(targets).map(|(v, t)| v - t));
    let loss = 0.5 * err.iter().map(|e| e * e).sum::<f64>() / m;
    let d_out = (err / m).insert_axis(Axis(1));
    let mut grad = vec![0.0; CRITIC_PARAMS];
    backward(p, 1, obs, &fwd, &d_out, &mut grad);
    Ok((loss, grad))
}

/// One full-batch gradient step on the squared error to `targets`.
pub fn critic_update(
    p: &MlpParams,
    obs: ArrayView2<'_, f64>,
    targets: &[f64],
    lr: f64,
) -> Result<MlpParams> {
    let (_, grad) = critic_loss_gradient(p.as_slice(), obs, targets)?;
    let mut next = p.clone();
    for (w, g) in next.data.iter_mut().zip(&grad) {
        *w -= lr * g;
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// Joint parameters
// ---------------------------------------------------------------------------

/// One agent's local copy of every agent's policy parameters, concatenated
/// in agent order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    data: Vec<f64>,
    n_agents: usize,
}

impl JointParams {
    pub fn concat(parts: &[MlpParams]) -> Result<Self> {
        let mut data = Vec::with_capacity(parts.len() * POLICY_PARAMS);
        for p in parts {
            ensure_len("policy slice", p.len(), POLICY_PARAMS)?;
            data.extend_from_slice(p.as_slice());
        }
        Ok(JointParams {
            data,
            n_agents: parts.len(),
        })
    }

    pub fn from_vec(data: Vec<f64>, n_agents: usize) -> Result<Self> {
        ensure_len("joint parameters", data.len(), n_agents * POLICY_PARAMS)?;
        Ok(JointParams { data, n_agents })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn slice(&self, agent: usize) -> &[f64] {
        &self.data[agent * POLICY_PARAMS..(agent + 1) * POLICY_PARAMS]
    }

    pub fn slice_mut(&mut self, agent: usize) -> &mut [f64] {
        &mut self.data[agent * POLICY_PARAMS..(agent + 1) * POLICY_PARAMS]
    }

    pub fn split(&self) -> Vec<MlpParams> {
        (0..self.n_agents)
            .map(|i| MlpParams {
                data: self.slice(i).to_vec(),
                output: N_ACTIONS,
            })
            .collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Magic bytes opening a checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DPNT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A shaped array of `f64`.
///
/// On disk, all integers and floats little-endian:
///
/// ```text
/// magic    4 bytes  "DPNT"
/// version  u32      1
/// rank     u32
/// dims     rank x u64
/// data     prod(dims) x f64, row-major
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_agents(agents: &[JointParams]) -> Self {
        let cols = agents.first().map_or(0, JointParams::len);
        Checkpoint {
            shape: vec![agents.len(), cols],
            data: agents
                .iter()
                .flat_map(|a| a.as_slice().iter().copied())
                .collect(),
        }
    }

    pub fn into_agents(self, n_policy_slices: usize) -> Result<Vec<JointParams>> {
        if self.shape.len() != 2 {
            return Err(Error::Checkpoint(format!(
                "expected rank 2, found rank {}",
                self.shape.len()
            )));
        }
        let cols = self.shape[1];
        self.data
            .chunks(cols.max(1))
            .map(|row| JointParams::from_vec(row.to_vec(), n_policy_slices))
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        if word != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word).map_err(io)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut long = [0u8; 8];
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut long).map_err(io)?;
            shape.push(u64::from_le_bytes(long) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len.min(1 << 20));
        for _ in 0..len {
            r.read_exact(&mut long).map_err(io)?;
            data.push(f64::from_le_bytes(long));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { shape, data })
    }
}
