//! Deterministic one-step policy extracted from the diffusion behavior
//! model.
//!
//! Each policy update regularizes the actor toward a per-state target
//! action: the diffusion sample when its advantage is non-negative, the
//! actor's own (frozen) output otherwise. The Q-improvement term is scaled
//! by `lambda = alpha * B / sum |min-Q|` so its gradient is invariant to the
//! scale of the critics.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha12Rng;

use crate::critics::{advantage_batch, critic_input, CriticPair, ValueFn};
use crate::diffusion::{sample_actions_batch, DiffusionPolicy};
use crate::error::{DivoError, Result};
use crate::nn::{self, FinalActivation, MlpSpec, ParamVector};

/// Floor for the lambda denominator.
const LAMBDA_DENOM_FLOOR: f64 = 1e-8;

/// Deterministic policy `state -> action` with a tanh head and a target copy.
#[derive(Debug, Clone)]
pub struct Actor {
    pub spec: MlpSpec,
    pub theta: ParamVector,
    pub theta_target: ParamVector,
    /// Q-term weight before batch normalization.
    pub alpha: f64,
    /// Weight of the pull toward the target action.
    pub beta_reg: f64,
    /// Actor and target networks update once per this many critic steps.
    pub policy_update_freq: usize,
}

impl Actor {
    pub fn new(state_dim: usize, action_dim: usize, hidden_dim: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        let spec = MlpSpec::new(state_dim, action_dim)
            .with_hidden_dim(hidden_dim)
            .with_final_activation(FinalActivation::Tanh);
        let theta = ParamVector::init(&spec, rng)?;
        let theta_target = theta.clone();
        Ok(Actor { spec, theta, theta_target, alpha: 2.5, beta_reg: 0.4, policy_update_freq: 2 })
    }

    /// All-zero parameters; the policy outputs the center of the action box.
    pub fn zeroed(state_dim: usize, action_dim: usize, hidden_dim: usize) -> Self {
        let spec = MlpSpec::new(state_dim, action_dim)
            .with_hidden_dim(hidden_dim)
            .with_final_activation(FinalActivation::Tanh);
        let theta = ParamVector::zeros(&spec);
        let theta_target = theta.clone();
        Actor { spec, theta, theta_target, alpha: 2.5, beta_reg: 0.4, policy_update_freq: 2 }
    }

    /// Deterministic action for one state.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        nn::forward_one(&self.spec, &self.theta, state)
    }

    pub fn act_batch(&self, states: &ArrayView2<f64>) -> Result<Array2<f64>> {
        nn::forward(&self.spec, &self.theta, states)
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_dim
    }
}

/// Pick the regularization target for one state: the diffusion sample when
/// its advantage is non-negative, otherwise the actor's own frozen output.
pub fn select_target_action(
    diffusion: &DiffusionPolicy,
    critics: &CriticPair,
    value_fn: &ValueFn,
    actor: &Actor,
    state: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| DivoError::config(e.to_string()))?;
    let (targets, _) = select_target_actions(diffusion, critics, value_fn, actor, &s, rng)?;
    Ok(targets.row(0).to_vec())
}

/// Batched target-action selection. Returns the targets and the fraction of
/// rows that took the diffusion branch.
pub fn select_target_actions(
    diffusion: &DiffusionPolicy,
    critics: &CriticPair,
    value_fn: &ValueFn,
    actor: &Actor,
    states: &ArrayView2<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<(Array2<f64>, f64)> {
    let sampled = sample_actions_batch(diffusion, states, rng)?;
    let adv = advantage_batch(critics, value_fn, states, &sampled.view())?;
    let fallback = actor.act_batch(states)?;

    let b = states.nrows();
    let mut targets = sampled;
    let mut taken = 0usize;
    for i in 0..b {
        if adv[i] >= 0.0 {
            taken += 1;
        } else {
            for (t, f) in targets.row_mut(i).iter_mut().zip(fallback.row(i)) {
                *t = *f;
            }
        }
    }
    Ok((targets, taken as f64 / b.max(1) as f64))
}

fn lambda_from_q(alpha: f64, q1: &Array2<f64>, q2: &Array2<f64>) -> f64 {
    let b = q1.nrows();
    let mut denom = 0.0;
    for i in 0..b {
        denom += q1[[i, 0]].min(q2[[i, 0]]).abs();
    }
    alpha * b as f64 / denom.max(LAMBDA_DENOM_FLOOR)
}

/// `lambda = alpha * B / max(sum_i |min-Q(s_i, pi(s_i))|, 1e-8)`, with the
/// denominator treated as a constant.
pub fn lambda_coefficient(critics: &CriticPair, actor: &Actor, states: &ArrayView2<f64>) -> Result<f64> {
    let b = states.nrows();
    if b == 0 {
        return Err(DivoError::usage("lambda needs a non-empty batch"));
    }
    let actions = actor.act_batch(states)?;
    let x = critic_input(states, &actions.view())?;
    let q1 = nn::forward(&critics.spec, &critics.q1, &x.view())?;
    let q2 = nn::forward(&critics.spec, &critics.q2, &x.view())?;
    Ok(lambda_from_q(actor.alpha, &q1, &q2))
}

/// Policy loss `mean_i [ -lambda * Q1(s_i, pi(s_i)) + beta * ||pi(s_i) - target_i||^2 ]`.
///
/// Gradient flows through the actor into the critic's action input; critic
/// parameters, the targets, and lambda itself stay frozen. Returns
/// `(loss, grad_theta, lambda)`.
pub fn policy_loss(
    actor: &Actor,
    critics: &CriticPair,
    target_actions: &ArrayView2<f64>,
    states: &ArrayView2<f64>,
) -> Result<(f64, ParamVector, f64)> {
    let b = states.nrows();
    if b == 0 {
        return Err(DivoError::usage("policy loss needs a non-empty batch"));
    }
    if target_actions.nrows() != b || target_actions.ncols() != actor.action_dim() {
        return Err(DivoError::config("target_actions shape does not match batch"));
    }

    let (actions, actor_trace) = nn::forward_cached(&actor.spec, &actor.theta, states)?;
    let x = critic_input(states, &actions.view())?;
    let (q1, q1_trace) = nn::forward_cached(&critics.spec, &critics.q1, &x.view())?;
    let q2 = nn::forward(&critics.spec, &critics.q2, &x.view())?;
    let lambda = lambda_from_q(actor.alpha, &q1, &q2);

    let beta = actor.beta_reg;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for i in 0..b {
        loss -= lambda * q1[[i, 0]];
        for (a, t) in actions.row(i).iter().zip(target_actions.row(i)) {
            let d = a - t;
            loss += beta * d * d;
        }
    }
    loss *= inv_b;

    // Route -lambda/B through Q1 to its action input; critic params frozen.
    let mut dq = Array2::zeros((b, 1));
    dq.fill(-lambda * inv_b);
    let dx = nn::backward_input_only(&critics.spec, &critics.q1, &q1_trace, &dq.view())?;

    let ds = states.ncols();
    let da = actor.action_dim();
    let mut d_actions = Array2::zeros((b, da));
    for i in 0..b {
        for j in 0..da {
            d_actions[[i, j]] = dx[[i, ds + j]]
                + 2.0 * beta * (actions[[i, j]] - target_actions[[i, j]]) * inv_b;
        }
    }

    let (grad, _) = nn::backward_cached(&actor.spec, &actor.theta, &actor_trace, &d_actions.view())?;
    Ok((loss, grad, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critics::tests_support::zero_critics_and_value;
    use crate::diffusion::{sample_actions_batch, NoiseSchedule};
    use crate::nn::ParamVector;
    use crate::rng::{stream, StreamId};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn small_diffusion(state_dim: usize, action_dim: usize) -> DiffusionPolicy {
        let schedule = NoiseSchedule::variance_preserving(5).unwrap();
        let mut rng = stream(31, StreamId::InitDiffusion);
        DiffusionPolicy::new(state_dim, action_dim, 8, schedule, &mut rng).unwrap()
    }

    #[test]
    fn zero_advantage_always_takes_diffusion_branch() {
        let diffusion = small_diffusion(2, 1);
        let (critics, value) = zero_critics_and_value(2, 1);
        let mut rng = stream(32, StreamId::InitActor);
        let actor = Actor::new(2, 1, 4, &mut rng).unwrap();
        let states = array![[0.1, 0.2], [-0.3, 0.4], [0.0, 0.0]];

        let expected = sample_actions_batch(&diffusion, &states.view(), &mut stream(33, StreamId::ActorUpdate)).unwrap();
        let (targets, fraction) = select_target_actions(
            &diffusion, &critics, &value, &actor, &states.view(),
            &mut stream(33, StreamId::ActorUpdate),
        )
        .unwrap();
        assert_eq!(targets, expected);
        assert_eq!(fraction, 1.0);
    }

    #[test]
    fn huge_value_bias_always_falls_back_to_actor() {
        let diffusion = small_diffusion(2, 1);
        let (critics, mut value) = zero_critics_and_value(2, 1);
        let n = value.params.len();
        value.params.as_mut_slice()[n - 1] = 1e9;
        let mut rng = stream(34, StreamId::InitActor);
        let actor = Actor::new(2, 1, 4, &mut rng).unwrap();
        let states = array![[0.1, 0.2], [-0.3, 0.4]];

        let (targets, fraction) = select_target_actions(
            &diffusion, &critics, &value, &actor, &states.view(),
            &mut stream(35, StreamId::ActorUpdate),
        )
        .unwrap();
        let fallback = actor.act_batch(&states.view()).unwrap();
        assert_eq!(targets, fallback);
        assert_eq!(fraction, 0.0);
    }

    #[test]
    fn gate_decision_matches_scratch_advantage_evaluation() {
        let diffusion = small_diffusion(2, 1);
        let mut r1 = stream(36, StreamId::InitQ1);
        let mut r2 = stream(37, StreamId::InitQ2);
        let critics = CriticPair::new(2, 1, 4, 0.99, &mut r1, &mut r2).unwrap();
        let mut rv = stream(38, StreamId::InitValue);
        let value = ValueFn::new(2, 4, &mut rv).unwrap();
        let mut ra = stream(39, StreamId::InitActor);
        let actor = Actor::new(2, 1, 4, &mut ra).unwrap();
        let state = [0.25, -0.5];

        let sampled = crate::diffusion::sample_action(&diffusion, &state, &mut stream(40, StreamId::ActorUpdate)).unwrap();
        let x = [state[0], state[1], sampled[0]];
        let q1 = nn::forward_one(&critics.spec, &critics.q1, &x).unwrap()[0];
        let q2 = nn::forward_one(&critics.spec, &critics.q2, &x).unwrap()[0];
        let v = nn::forward_one(&value.spec, &value.params, &state).unwrap()[0];
        let expect_diffusion = q1.min(q2) - v >= 0.0;

        let target = select_target_action(
            &diffusion, &critics, &value, &actor, &state,
            &mut stream(40, StreamId::ActorUpdate),
        )
        .unwrap();
        if expect_diffusion {
            assert_eq!(target, sampled);
        } else {
            assert_eq!(target, actor.act(&state).unwrap());
        }
    }

    #[test]
    fn lambda_examples() {
        // All |Q| = 1 via an output bias: lambda = alpha.
        let (mut critics, _) = zero_critics_and_value(2, 1);
        let n = critics.q1.len();
        critics.q1.as_mut_slice()[n - 1] = 1.0;
        critics.q2.as_mut_slice()[n - 1] = 1.0;
        let actor = Actor::zeroed(2, 1, 4);
        let states = array![[0.1, 0.2], [0.3, -0.4], [0.0, 0.5], [0.9, 0.9]];
        let lambda = lambda_coefficient(&critics, &actor, &states.view()).unwrap();
        assert_relative_eq!(lambda, 2.5, max_relative = 1e-15);

        // Doubling the critic output scale exactly halves lambda.
        let mut scaled = critics.clone();
        scaled.q1.as_mut_slice()[n - 1] = 2.0;
        scaled.q2.as_mut_slice()[n - 1] = 2.0;
        let lambda2 = lambda_coefficient(&scaled, &actor, &states.view()).unwrap();
        assert_eq!(lambda2, lambda / 2.0);

        // Q values {2, -2, 4}: lambda = 2.5 * 3 / 8.
        let spec = MlpSpec::new(2, 1).with_num_layers(1);
        let mut q = ParamVector::zeros(&spec);
        q.as_mut_slice()[0] = 1.0; // output = s[0]
        let critics = CriticPair {
            q1: q.clone(),
            q2: q.clone(),
            q1_target: q.clone(),
            q2_target: q,
            spec,
            gamma: 0.99,
        };
        let actor = Actor::zeroed(1, 1, 4);
        let states = array![[2.0], [-2.0], [4.0]];
        let lambda = lambda_coefficient(&critics, &actor, &states.view()).unwrap();
        assert_relative_eq!(lambda, 0.9375, max_relative = 1e-15);
    }

    #[test]
    fn policy_loss_internal_lambda_matches_coefficient_op() {
        let mut r1 = stream(41, StreamId::InitQ1);
        let mut r2 = stream(42, StreamId::InitQ2);
        let critics = CriticPair::new(2, 1, 4, 0.99, &mut r1, &mut r2).unwrap();
        let mut ra = stream(43, StreamId::InitActor);
        let actor = Actor::new(2, 1, 4, &mut ra).unwrap();
        let states = array![[0.1, 0.2], [0.3, -0.4], [0.0, 0.5]];
        let targets = Array2::zeros((3, 1));
        let (_, _, lambda) = policy_loss(&actor, &critics, &targets.view(), &states.view()).unwrap();
        let expected = lambda_coefficient(&critics, &actor, &states.view()).unwrap();
        assert_eq!(lambda, expected);
    }

    #[test]
    fn policy_loss_examples() {
        // beta = 0 and zero critics: loss and gradient vanish.
        let (critics, _) = zero_critics_and_value(2, 1);
        let mut ra = stream(44, StreamId::InitActor);
        let mut actor = Actor::new(2, 1, 4, &mut ra).unwrap();
        actor.beta_reg = 0.0;
        let states = array![[0.1, 0.2], [0.3, -0.4]];
        let targets = Array2::zeros((2, 1));
        let (loss, grad, _) = policy_loss(&actor, &critics, &targets.view(), &states.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|g| *g == 0.0));

        // Perfect imitation with a dead Q term: loss 0.
        let (critics, _) = zero_critics_and_value(2, 1);
        let mut ra = stream(45, StreamId::InitActor);
        let actor = Actor::new(2, 1, 4, &mut ra).unwrap();
        let own = actor.act_batch(&states.view()).unwrap();
        let (loss, _, _) = policy_loss(&actor, &critics, &own.view(), &states.view()).unwrap();
        assert_eq!(loss, 0.0);

        // One state, pi(s) = 0.5, target 0, dead Q term, beta 0.4: loss 0.1.
        let spec = MlpSpec::new(1, 1)
            .with_num_layers(1)
            .with_final_activation(FinalActivation::Tanh);
        let mut theta = ParamVector::zeros(&spec);
        theta.as_mut_slice()[1] = 0.5f64.atanh(); // bias so tanh gives 0.5
        let actor = Actor {
            spec,
            theta: theta.clone(),
            theta_target: theta,
            alpha: 2.5,
            beta_reg: 0.4,
            policy_update_freq: 2,
        };
        let (critics, _) = zero_critics_and_value(1, 1);
        let states = array![[0.7]];
        let targets = array![[0.0]];
        let (loss, _, _) = policy_loss(&actor, &critics, &targets.view(), &states.view()).unwrap();
        assert_relative_eq!(loss, 0.1, max_relative = 1e-12);
    }
}
