//! Twin Q networks with target copies, a state-value network, and the
//! advantage they induce.
//!
//! The TD target uses the TD3 backbone: target-policy smoothing plus the
//! minimum over the twin target critics. The value function regresses on the
//! pessimistic `min(Q1, Q2)` of the online critics, and the advantage is
//! `min(Q1, Q2)(s, a) - V(s)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::actor::Actor;
use crate::dataset::TransitionBatch;
use crate::error::{DivoError, Result};
use crate::nn::{self, MlpSpec, ParamVector};

/// Twin Q approximators over `(state, action)` with frozen target copies.
#[derive(Debug, Clone)]
pub struct CriticPair {
    pub spec: MlpSpec,
    pub q1: ParamVector,
    pub q2: ParamVector,
    pub q1_target: ParamVector,
    pub q2_target: ParamVector,
    pub gamma: f64,
}

impl CriticPair {
    /// Targets start as exact copies of the online parameters.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden_dim: usize,
        gamma: f64,
        rng_q1: &mut ChaCha12Rng,
        rng_q2: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(DivoError::config(format!("gamma must be in (0, 1], got {gamma}")));
        }
        let spec = MlpSpec::new(state_dim + action_dim, 1).with_hidden_dim(hidden_dim);
        let q1 = ParamVector::init(&spec, rng_q1)?;
        let q2 = ParamVector::init(&spec, rng_q2)?;
        let q1_target = q1.clone();
        let q2_target = q2.clone();
        Ok(CriticPair { spec, q1, q2, q1_target, q2_target, gamma })
    }

    pub fn state_dim(&self) -> usize {
        self.spec.input_dim
    }
}

/// State-value approximator with an expectile knob. The default `0.5`
/// reduces the loss to a plain mean squared error.
#[derive(Debug, Clone)]
pub struct ValueFn {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub expectile: f64,
}

impl ValueFn {
    pub fn new(state_dim: usize, hidden_dim: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        let spec = MlpSpec::new(state_dim, 1).with_hidden_dim(hidden_dim);
        let params = ParamVector::init(&spec, rng)?;
        Ok(ValueFn { spec, params, expectile: 0.5 })
    }
}

/// Concatenate `[states | actions]` into the critic input layout.
pub fn critic_input(states: &ArrayView2<f64>, actions: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if states.nrows() != actions.nrows() {
        return Err(DivoError::config("states and actions must have equal batch size"));
    }
    let b = states.nrows();
    let ds = states.ncols();
    let da = actions.ncols();
    let mut x = Array2::zeros((b, ds + da));
    for i in 0..b {
        let mut row = x.row_mut(i);
        for (j, v) in states.row(i).iter().enumerate() {
            row[j] = *v;
        }
        for (j, v) in actions.row(i).iter().enumerate() {
            row[ds + j] = *v;
        }
    }
    Ok(x)
}

fn q_forward(spec: &MlpSpec, params: &ParamVector, input: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let y = nn::forward(spec, params, input)?;
    Ok(y.index_axis(Axis(1), 0).to_owned())
}

/// Pessimistic `min(Q1, Q2)` of the online critics at `(s, a)`.
pub fn min_q_batch(
    critics: &CriticPair,
    states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let x = critic_input(states, actions)?;
    let q1 = q_forward(&critics.spec, &critics.q1, &x.view())?;
    let q2 = q_forward(&critics.spec, &critics.q2, &x.view())?;
    Ok(Array1::from_iter(q1.iter().zip(q2.iter()).map(|(a, b)| a.min(*b))))
}

/// Temporal-difference loss for both critics on one batch.
///
/// The target action is the smoothed target policy
/// `a' = clip(pi_target(s') + clip(xi, noise_clip), [-1, 1])` with
/// `xi ~ N(0, policy_noise^2)`, and the target value bootstraps through
/// `min` of the twin target critics, gated by the `done` flag. No gradient
/// flows through the target.
///
/// Returns `(loss, grad_q1, grad_q2)`.
pub fn td_loss(
    critics: &CriticPair,
    actor: &Actor,
    batch: &TransitionBatch,
    policy_noise: f64,
    noise_clip: (f64, f64),
    rng: &mut ChaCha12Rng,
) -> Result<(f64, ParamVector, ParamVector)> {
    let b = batch.len();
    if b == 0 {
        return Err(DivoError::usage("td loss needs a non-empty batch"));
    }
    if policy_noise < 0.0 {
        return Err(DivoError::config("policy_noise must be non-negative"));
    }

    // Smoothed target action.
    let mut next_actions = nn::forward(&actor.spec, &actor.theta_target, &batch.next_states.view())?;
    for v in next_actions.iter_mut() {
        let xi: f64 = rng.sample(StandardNormal);
        *v = (*v + (xi * policy_noise).clamp(noise_clip.0, noise_clip.1)).clamp(-1.0, 1.0);
    }

    // Frozen bootstrap target.
    let x_next = critic_input(&batch.next_states.view(), &next_actions.view())?;
    let tq1 = q_forward(&critics.spec, &critics.q1_target, &x_next.view())?;
    let tq2 = q_forward(&critics.spec, &critics.q2_target, &x_next.view())?;
    let mut targets = Array1::zeros(b);
    for i in 0..b {
        let y = batch.rewards[i]
            + critics.gamma * (1.0 - batch.dones[i]) * tq1[i].min(tq2[i]);
        if !y.is_finite() {
            return Err(DivoError::Numeric {
                context: "td target".into(),
                message: format!("non-finite target at batch index {i}"),
            });
        }
        targets[i] = y;
    }

    let x = critic_input(&batch.states.view(), &batch.actions.view())?;
    let (q1, trace1) = nn::forward_cached(&critics.spec, &critics.q1, &x.view())?;
    let (q2, trace2) = nn::forward_cached(&critics.spec, &critics.q2, &x.view())?;

    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut dq1 = Array2::zeros((b, 1));
    let mut dq2 = Array2::zeros((b, 1));
    for i in 0..b {
        let e1 = targets[i] - q1[[i, 0]];
        let e2 = targets[i] - q2[[i, 0]];
        loss += e1 * e1 + e2 * e2;
        dq1[[i, 0]] = -2.0 * e1 * inv_b;
        dq2[[i, 0]] = -2.0 * e2 * inv_b;
    }
    loss *= inv_b;

    let (grad1, _) = nn::backward_cached(&critics.spec, &critics.q1, &trace1, &dq1.view())?;
    let (grad2, _) = nn::backward_cached(&critics.spec, &critics.q2, &trace2, &dq2.view())?;
    Ok((loss, grad1, grad2))
}

/// Expectile regression of `V` on the frozen `min(Q1, Q2)(s, a)`.
///
/// The per-sample weight is `2 * |expectile - 1[u < 0]|` with
/// `u = target - v`, which is exactly the squared error at the default
/// expectile of `0.5`.
pub fn value_loss(
    value_fn: &ValueFn,
    critics: &CriticPair,
    states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
) -> Result<(f64, ParamVector)> {
    let b = states.nrows();
    if b == 0 {
        return Err(DivoError::usage("value loss needs a non-empty batch"));
    }
    let targets = min_q_batch(critics, states, actions)?;
    let (v, trace) = nn::forward_cached(&value_fn.spec, &value_fn.params, states)?;

    let tau = value_fn.expectile;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut dv = Array2::zeros((b, 1));
    for i in 0..b {
        let u = targets[i] - v[[i, 0]];
        let w = 2.0 * (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs();
        loss += w * u * u;
        dv[[i, 0]] = -2.0 * w * u * inv_b;
    }
    loss *= inv_b;

    let (grad, _) = nn::backward_cached(&value_fn.spec, &value_fn.params, &trace, &dv.view())?;
    Ok((loss, grad))
}

/// Advantage `min(Q1, Q2)(s, a) - V(s)` for a batch, from the online critics.
pub fn advantage_batch(
    critics: &CriticPair,
    value_fn: &ValueFn,
    states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let q = min_q_batch(critics, states, actions)?;
    let v = nn::forward(&value_fn.spec, &value_fn.params, states)?;
    Ok(Array1::from_iter(q.iter().zip(v.column(0).iter()).map(|(q, v)| q - v)))
}

/// Advantage for a single `(state, action)` pair.
pub fn advantage(critics: &CriticPair, value_fn: &ValueFn, state: &[f64], action: &[f64]) -> Result<f64> {
    let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| DivoError::config(e.to_string()))?;
    let a = ArrayView2::from_shape((1, action.len()), action).map_err(|e| DivoError::config(e.to_string()))?;
    Ok(advantage_batch(critics, value_fn, &s, &a)?[0])
}
