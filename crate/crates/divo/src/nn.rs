//! Feed-forward function approximation with reverse-mode gradients.
//!
//! Everything trainable in this crate (noise predictor, twin critics, value
//! function, actor) is an [`MlpSpec`] plus a flat [`ParamVector`]. Gradients
//! are computed by explicit backpropagation over a cached forward trace, and
//! parameters are updated in place with Adam. All arithmetic is `f64` and
//! strictly sequential, so identical inputs produce bitwise-identical
//! outputs run after run.
//!
//! Parameter layout: for each affine layer `(fan_in, fan_out)` in order, the
//! weight matrix in row-major `fan_in x fan_out` order, then the bias of
//! length `fan_out`.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{DivoError, Result};

/// Hidden-layer activation. Applied after every non-final affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// Activation applied to the final affine layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalActivation {
    None,
    Tanh,
}

/// Outputs of a `Tanh` head are clamped to `[-1 + TANH_CLAMP, 1 - TANH_CLAMP]`
/// so downstream arithmetic never sees an exact box corner.
pub const TANH_CLAMP: f64 = 1e-7;

/// Architecture of a multi-layer perceptron. `num_layers` counts affine
/// layers, so `num_layers = 1` is a single affine map with no hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    /// Default shape used by every network in the trainer: three affine
    /// layers, 256 hidden units, ReLU.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dim: 256,
            num_layers: 3,
            output_dim,
            activation: Activation::Relu,
            final_activation: FinalActivation::None,
        }
    }

    pub fn with_hidden_dim(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn with_num_layers(mut self, num_layers: usize) -> Self {
        self.num_layers = num_layers;
        self
    }

    pub fn with_final_activation(mut self, f: FinalActivation) -> Self {
        self.final_activation = f;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == 0 {
            return Err(DivoError::config("all MLP dimensions must be >= 1"));
        }
        if self.num_layers == 0 {
            return Err(DivoError::config("num_layers must be >= 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer, in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.num_layers);
        for l in 0..self.num_layers {
            let fan_in = if l == 0 { self.input_dim } else { self.hidden_dim };
            let fan_out = if l + 1 == self.num_layers { self.output_dim } else { self.hidden_dim };
            shapes.push((fan_in, fan_out));
        }
        shapes
    }

    /// Closed-form total parameter count: sum over layers of
    /// `fan_in * fan_out + fan_out`.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Byte offsets of each layer's `(weights, bias)` slices in the flat
    /// parameter vector.
    fn layer_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut ranges = Vec::with_capacity(self.num_layers);
        let mut offset = 0;
        for (fan_in, fan_out) in self.layer_shapes() {
            let w = offset..offset + fan_in * fan_out;
            offset += fan_in * fan_out;
            let b = offset..offset + fan_out;
            offset += fan_out;
            ranges.push((w, b));
        }
        ranges
    }
}

/// Flat parameter storage with the deterministic layout described in the
/// module docs. Two vectors built from the same [`MlpSpec`] always have the
/// same length and slice map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        ParamVector { values: vec![0.0; spec.param_count()] }
    }

    /// Initialize weights and biases uniformly in `±1/sqrt(fan_in)`, drawing
    /// in layout order so the result is a pure function of the rng state.
    pub fn init(spec: &MlpSpec, rng: &mut ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        let mut values = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                values.push(rng.random_range(-bound..bound));
            }
        }
        Ok(ParamVector { values })
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn validate_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(DivoError::Numeric {
                context: "parameter vector".into(),
                message: format!("non-finite entry at index {index}"),
            }),
            None => Ok(()),
        }
    }

    fn check_len(&self, spec: &MlpSpec) -> Result<()> {
        if self.values.len() != spec.param_count() {
            return Err(DivoError::config(format!(
                "parameter vector length {} does not match spec ({} expected)",
                self.values.len(),
                spec.param_count()
            )));
        }
        Ok(())
    }
}

/// Activations cached by [`forward_cached`] for the backward pass:
/// the input of every affine layer plus the post-activation output.
pub struct ForwardTrace {
    layer_inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

fn weight_view<'a>(params: &'a ParamVector, range: &std::ops::Range<usize>, fan_in: usize, fan_out: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((fan_in, fan_out), &params.as_slice()[range.clone()])
        .expect("layer range consistent with spec")
}

/// Batched forward pass: rows of `input` are independent samples.
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(forward_cached(spec, params, input)?.0)
}

/// Forward pass that also returns the trace needed by [`backward_cached`].
pub fn forward_cached(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &ArrayView2<f64>,
) -> Result<(Array2<f64>, ForwardTrace)> {
    params.check_len(spec)?;
    if input.ncols() != spec.input_dim {
        return Err(DivoError::config(format!(
            "input width {} does not match spec input_dim {}",
            input.ncols(),
            spec.input_dim
        )));
    }

    let shapes = spec.layer_shapes();
    let ranges = spec.layer_ranges();
    let mut layer_inputs = Vec::with_capacity(spec.num_layers);
    let mut h = input.to_owned();

    for (l, ((fan_in, fan_out), (w_range, b_range))) in shapes.iter().zip(&ranges).enumerate() {
        let w = weight_view(params, w_range, *fan_in, *fan_out);
        let b = &params.as_slice()[b_range.clone()];
        let mut z = h.dot(&w);
        for mut row in z.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        layer_inputs.push(h);
        let last = l + 1 == spec.num_layers;
        if !last {
            match spec.activation {
                Activation::Relu => z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 }),
            }
        } else if spec.final_activation == FinalActivation::Tanh {
            z.mapv_inplace(|v| v.tanh().clamp(-1.0 + TANH_CLAMP, 1.0 - TANH_CLAMP));
        }
        h = z;
    }

    let trace = ForwardTrace { layer_inputs, output: h.clone() };
    Ok((h, trace))
}

/// Convenience forward for a single sample.
pub fn forward_one(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, input.len()), input)
        .map_err(|e| DivoError::config(e.to_string()))?;
    let y = forward(spec, params, &x)?;
    Ok(y.row(0).to_vec())
}

/// Reverse-mode pass over a cached trace. Returns the gradient of
/// `sum(output_grad * output)` with respect to the parameters and the input.
pub fn backward_cached(
    spec: &MlpSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    output_grad: &ArrayView2<f64>,
) -> Result<(ParamVector, Array2<f64>)> {
    backward_impl(spec, params, trace, output_grad, true)
        .map(|(g, dx)| (g.expect("param grads requested"), dx))
}

/// Like [`backward_cached`] but skips parameter gradients; used where a
/// network only routes gradient to its inputs (frozen critics).
pub fn backward_input_only(
    spec: &MlpSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    output_grad: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    backward_impl(spec, params, trace, output_grad, false).map(|(_, dx)| dx)
}

/// One-shot backward: recomputes the forward trace internally.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &ArrayView2<f64>,
    output_grad: &ArrayView2<f64>,
) -> Result<(ParamVector, Array2<f64>)> {
    let (_, trace) = forward_cached(spec, params, input)?;
    backward_cached(spec, params, &trace, output_grad)
}

fn backward_impl(
    spec: &MlpSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    output_grad: &ArrayView2<f64>,
    want_param_grads: bool,
) -> Result<(Option<ParamVector>, Array2<f64>)> {
    params.check_len(spec)?;
    if output_grad.dim() != trace.output.dim() {
        return Err(DivoError::config(format!(
            "output_grad shape {:?} does not match forward output {:?}",
            output_grad.dim(),
            trace.output.dim()
        )));
    }

    let shapes = spec.layer_shapes();
    let ranges = spec.layer_ranges();
    let mut grads = want_param_grads.then(|| ParamVector::zeros(spec));

    // Seed: d(loss)/d(pre-activation of the last layer).
    let mut dz = match spec.final_activation {
        FinalActivation::None => output_grad.to_owned(),
        FinalActivation::Tanh => {
            let mut dz = output_grad.to_owned();
            dz.zip_mut_with(&trace.output, |g, y| *g *= 1.0 - y * y);
            dz
        }
    };

    for l in (0..spec.num_layers).rev() {
        let (fan_in, fan_out) = shapes[l];
        let (w_range, b_range) = &ranges[l];
        let x = &trace.layer_inputs[l];

        if let Some(g) = grads.as_mut() {
            // dW = x^T dz, db = column sums of dz; written straight into the
            // flat gradient vector.
            let slice = g.as_mut_slice();
            let mut dw = ndarray::ArrayViewMut2::from_shape(
                (fan_in, fan_out),
                &mut slice[w_range.clone()],
            )
            .expect("gradient range consistent with spec");
            general_mat_mul(1.0, &x.t(), &dz, 0.0, &mut dw);
            let db = dz.sum_axis(Axis(0));
            slice[b_range.clone()].copy_from_slice(db.as_slice().expect("contiguous"));
        }

        let w = weight_view(params, w_range, fan_in, fan_out);
        let mut dx = dz.dot(&w.t());
        if l > 0 {
            // x is the post-ReLU activation of the previous layer, so its
            // positivity mask is the ReLU derivative.
            dx.zip_mut_with(x, |g, xv| {
                if *xv <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        dz = dx;
    }

    Ok((grads, dz))
}

/// Adam optimizer state for one [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_len: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(state: &mut AdamState, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
    if state.first_moment.len() != params.len() || grad.len() != params.len() {
        return Err(DivoError::config(format!(
            "adam length mismatch: state {}, params {}, grad {}",
            state.first_moment.len(),
            params.len(),
            grad.len()
        )));
    }
    if let Some(index) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(DivoError::Divergence { index });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    let p = params.as_mut_slice();
    for i in 0..p.len() {
        let g = grad.as_slice()[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        p[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Exponential target update: `target <- tau * online + (1 - tau) * target`.
pub fn polyak_update(target: &mut ParamVector, online: &ParamVector, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(DivoError::config(format!("tau must be in (0, 1], got {tau}")));
    }
    if target.len() != online.len() {
        return Err(DivoError::config(format!(
            "polyak length mismatch: target {}, online {}",
            target.len(),
            online.len()
        )));
    }
    for (t, o) in target.as_mut_slice().iter_mut().zip(online.as_slice()) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}
