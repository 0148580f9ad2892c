//! Conditional K-step denoising diffusion over the action box.
//!
//! The behavior policy is a DDPM conditioned on the state: a noise-prediction
//! network is trained on dataset actions perturbed by the forward process,
//! and actions are drawn by running the learned reverse chain from Gaussian
//! noise. Training weights each sample by a binary advantage gate, so only
//! actions at least as good as the state's value shape the model.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::critics::{advantage_batch, CriticPair, ValueFn};
use crate::error::{DivoError, Result};
use crate::nn::{self, FinalActivation, MlpSpec, ParamVector};

/// Width of the sinusoidal timestep embedding fed to the noise predictor.
pub const TIMESTEP_EMBED_DIM: usize = 16;

/// Default number of diffusion steps.
pub const DEFAULT_K: usize = 5;

const BETA_MIN: f64 = 0.1;
const BETA_MAX: f64 = 10.0;

/// Per-step variance constants of the forward process. Index 0 corresponds
/// to step `k = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Variance-preserving schedule tuned for small K:
    /// `beta_k = 1 - exp(-beta_min/K - (beta_max - beta_min) * (2k-1) / (2K^2))`.
    pub fn variance_preserving(k_steps: usize) -> Result<Self> {
        let k_f = k_steps as f64;
        let betas = (1..=k_steps)
            .map(|k| {
                let exponent = -BETA_MIN / k_f
                    - (BETA_MAX - BETA_MIN) * (2 * k - 1) as f64 / (2.0 * k_f * k_f);
                1.0 - exponent.exp()
            })
            .collect();
        NoiseSchedule::from_betas(betas)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(DivoError::config("noise schedule needs at least one step"));
        }
        if beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DivoError::config("every beta_k must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn k_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check_k(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.k_steps() {
            return Err(DivoError::usage(format!(
                "diffusion step k={k} out of range 1..={}",
                self.k_steps()
            )));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.beta[self.check_k(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        Ok(self.alpha[self.check_k(k)?])
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_k(k)?])
    }
}

/// Sinusoidal embedding of the (1-based) step index: eight sine and eight
/// cosine channels with geometrically spaced frequencies.
pub fn timestep_embedding(k: usize) -> [f64; TIMESTEP_EMBED_DIM] {
    let half = TIMESTEP_EMBED_DIM / 2;
    let mut emb = [0.0; TIMESTEP_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        emb[i] = (k as f64 * freq).sin();
        emb[half + i] = (k as f64 * freq).cos();
    }
    emb
}

/// The diffusion behavior policy: schedule plus conditional noise predictor.
///
/// The predictor input is the concatenation `[noisy_action, timestep
/// embedding, state]`, in that order.
#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    pub schedule: NoiseSchedule,
    pub eps_spec: MlpSpec,
    pub eps_params: ParamVector,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl DiffusionPolicy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden_dim: usize,
        schedule: NoiseSchedule,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let eps_spec = MlpSpec::new(action_dim + TIMESTEP_EMBED_DIM + state_dim, action_dim)
            .with_hidden_dim(hidden_dim)
            .with_final_activation(FinalActivation::None);
        let eps_params = ParamVector::init(&eps_spec, rng)?;
        Ok(DiffusionPolicy { schedule, eps_spec, eps_params, state_dim, action_dim })
    }

    /// Assemble the predictor input for a batch sharing one step index.
    fn eps_input(&self, noisy_actions: &ArrayView2<f64>, k: usize, states: &ArrayView2<f64>) -> Array2<f64> {
        let b = noisy_actions.nrows();
        let emb = timestep_embedding(k);
        let mut input = Array2::zeros((b, self.eps_spec.input_dim));
        for i in 0..b {
            let mut row = input.row_mut(i);
            for (j, v) in noisy_actions.row(i).iter().enumerate() {
                row[j] = *v;
            }
            for (j, v) in emb.iter().enumerate() {
                row[self.action_dim + j] = *v;
            }
            for (j, v) in states.row(i).iter().enumerate() {
                row[self.action_dim + TIMESTEP_EMBED_DIM + j] = *v;
            }
        }
        input
    }
}

/// Forward perturbation `m_k = sqrt(abar_k) * a0 + sqrt(1 - abar_k) * eps`.
pub fn forward_perturb(schedule: &NoiseSchedule, a0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if a0.len() != eps.len() {
        return Err(DivoError::config("a0 and eps must have the same length"));
    }
    let abar = schedule.alpha_bar(k)?;
    let signal = abar.sqrt();
    let noise = (1.0 - abar).sqrt();
    Ok(a0.iter().zip(eps).map(|(a, e)| signal * a + noise * e).collect())
}

/// One reverse step for a batch of actions at step `k`:
/// `a_{k-1} = (a_k - beta_k / sqrt(1 - abar_k) * eps_net) / sqrt(alpha_k) + sqrt(beta_k) * z`.
/// `z` must be `None` at `k = 1` (callers add no noise on the final step).
pub fn reverse_step_batch(
    policy: &DiffusionPolicy,
    a_k: &ArrayView2<f64>,
    k: usize,
    states: &ArrayView2<f64>,
    z: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    let beta = policy.schedule.beta(k)?;
    let alpha = policy.schedule.alpha(k)?;
    let abar = policy.schedule.alpha_bar(k)?;

    let input = policy.eps_input(a_k, k, states);
    let eps_hat = nn::forward(&policy.eps_spec, &policy.eps_params, &input.view())?;
    if eps_hat.iter().any(|v| !v.is_finite()) {
        return Err(DivoError::Numeric {
            context: format!("reverse step k={k}"),
            message: "noise prediction is non-finite".into(),
        });
    }

    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = beta / (1.0 - abar).sqrt();
    let sigma = beta.sqrt();
    let mut out = a_k.to_owned();
    out.zip_mut_with(&eps_hat, |a, e| *a = inv_sqrt_alpha * (*a - eps_coef * e));
    if let Some(z) = z {
        out.zip_mut_with(z, |a, zv| *a += sigma * zv);
    }
    Ok(out)
}

/// Single-sample reverse step; `z` may be all zeros (required at `k = 1`).
pub fn reverse_step(
    policy: &DiffusionPolicy,
    a_k: &[f64],
    k: usize,
    state: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    let a = ArrayView2::from_shape((1, a_k.len()), a_k).map_err(|e| DivoError::config(e.to_string()))?;
    let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| DivoError::config(e.to_string()))?;
    let z_arr = Array2::from_shape_vec((1, z.len()), z.to_vec()).map_err(|e| DivoError::config(e.to_string()))?;
    let out = reverse_step_batch(policy, &a, k, &s, Some(&z_arr))?;
    Ok(out.row(0).to_vec())
}

fn draw_normals(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Run the full reverse chain for a batch of states, without the final clip.
pub fn sample_actions_batch_unclipped(
    policy: &DiffusionPolicy,
    states: &ArrayView2<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    if states.ncols() != policy.state_dim {
        return Err(DivoError::config(format!(
            "state width {} does not match policy state_dim {}",
            states.ncols(),
            policy.state_dim
        )));
    }
    let b = states.nrows();
    let mut a = draw_normals(rng, b, policy.action_dim);
    for k in (1..=policy.schedule.k_steps()).rev() {
        let z = if k > 1 { Some(draw_normals(rng, b, policy.action_dim)) } else { None };
        a = reverse_step_batch(policy, &a.view(), k, states, z.as_ref())?;
    }
    Ok(a)
}

/// Draw actions from the diffusion policy, clipped to the action box.
pub fn sample_actions_batch(
    policy: &DiffusionPolicy,
    states: &ArrayView2<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    let mut a = sample_actions_batch_unclipped(policy, states, rng)?;
    a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(a)
}

/// Draw one action for one state.
pub fn sample_action(policy: &DiffusionPolicy, state: &[f64], rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
    let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| DivoError::config(e.to_string()))?;
    let a = sample_actions_batch(policy, &s, rng)?;
    Ok(a.row(0).to_vec())
}

/// Advantage-weighted denoising loss with externally supplied per-sample
/// weights. Draw order per sample, in row order: the step index
/// `k ~ U{1..K}`, then `action_dim` standard normals.
///
/// Returns the batch-mean loss (squared residual summed over action
/// coordinates) and its gradient with respect to the predictor parameters.
pub fn pad_loss_weighted(
    policy: &DiffusionPolicy,
    states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    weights: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<(f64, ParamVector)> {
    let b = states.nrows();
    if b == 0 {
        return Err(DivoError::usage("pad loss needs a non-empty batch"));
    }
    if actions.nrows() != b || weights.len() != b {
        return Err(DivoError::config("states, actions and weights must agree in length"));
    }
    let d = policy.action_dim;
    let k_steps = policy.schedule.k_steps();

    // Draw all randomness first so consumption does not depend on weights.
    let mut ks = Vec::with_capacity(b);
    let mut eps = Array2::zeros((b, d));
    for i in 0..b {
        ks.push(rng.random_range(1..=k_steps));
        for j in 0..d {
            eps[[i, j]] = rng.sample(StandardNormal);
        }
    }

    if weights.iter().all(|w| *w == 0.0) {
        return Ok((0.0, ParamVector::zeros(&policy.eps_spec)));
    }

    // Assemble predictor inputs: [m_k, emb(k), s] per row.
    let embeddings: Vec<[f64; TIMESTEP_EMBED_DIM]> =
        (1..=k_steps).map(timestep_embedding).collect();
    let mut input = Array2::zeros((b, policy.eps_spec.input_dim));
    for i in 0..b {
        let k = ks[i];
        let abar = policy.schedule.alpha_bar(k)?;
        let signal = abar.sqrt();
        let noise = (1.0 - abar).sqrt();
        let mut row = input.row_mut(i);
        for j in 0..d {
            row[j] = signal * actions[[i, j]] + noise * eps[[i, j]];
        }
        for (j, v) in embeddings[k - 1].iter().enumerate() {
            row[d + j] = *v;
        }
        for (j, v) in states.row(i).iter().enumerate() {
            row[d + TIMESTEP_EMBED_DIM + j] = *v;
        }
    }

    let (eps_hat, trace) = nn::forward_cached(&policy.eps_spec, &policy.eps_params, &input.view())?;

    let mut loss = 0.0;
    let mut dy = Array2::zeros((b, d));
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let w = weights[i];
        for j in 0..d {
            let r = eps[[i, j]] - eps_hat[[i, j]];
            loss += w * r * r;
            dy[[i, j]] = -2.0 * w * r * inv_b;
        }
    }
    loss *= inv_b;

    let (grad, _) = nn::backward_cached(&policy.eps_spec, &policy.eps_params, &trace, &dy.view())?;
    Ok((loss, grad))
}

/// Advantage-weighted denoising loss: each sample's weight is
/// `eta * 1[advantage(s, a) >= 0]`, with the advantage taken from the frozen
/// critics and value function (no gradient flows into them).
pub fn pad_loss(
    policy: &DiffusionPolicy,
    states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    critics: &CriticPair,
    value_fn: &ValueFn,
    eta: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, ParamVector)> {
    if !(eta > 0.0) {
        return Err(DivoError::config(format!("eta must be positive, got {eta}")));
    }
    let adv: Array1<f64> = advantage_batch(critics, value_fn, states, actions)?;
    let weights: Vec<f64> = adv.iter().map(|a| if *a >= 0.0 { eta } else { 0.0 }).collect();
    pad_loss_weighted(policy, states, actions, &weights, rng)
}

/// Fraction of batch samples whose advantage gate is open; used for logging.
pub fn pad_gate_fraction(
    critics: &CriticPair,
    value_fn: &ValueFn,
    states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
) -> Result<f64> {
    let adv = advantage_batch(critics, value_fn, states, actions)?;
    let open = adv.iter().filter(|a| **a >= 0.0).count();
    Ok(open as f64 / adv.len().max(1) as f64)
}
