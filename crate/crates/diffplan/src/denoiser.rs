//! The denoising network: a small fully connected net with tanh hidden
//! layers and a linear output, plus its hand-derived reverse-mode gradients
//! and an Adam optimizer.
//!
//! Parameters live in one flat `Vec<f64>`; [`Arch`] defines the layout
//! (per layer: row-major `out x in` weights, then `out` biases). Flat
//! storage keeps the optimizer, checkpointing, and finite-difference
//! testing trivial. Everything is f64 and deterministic.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation value `a = f(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Network shape: `layer_sizes[0]` inputs through `layer_sizes.last()` outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl Arch {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig("arch needs at least input and output layers".into()));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidConfig("arch layer sizes must all be positive".into()));
        }
        Ok(Arch { layer_sizes, activation: Activation::Tanh })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("arch has layers")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total number of parameters across all layers.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l], self.layer_sizes[l + 1])
    }
}

/// Flat parameter (or gradient) storage matching an [`Arch`] layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub flat: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(arch: &Arch) -> Self {
        DenoiserParams { flat: vec![0.0; arch.param_count()] }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    pub fn mean_abs(&self) -> f64 {
        if self.flat.is_empty() {
            return 0.0;
        }
        self.flat.iter().map(|v| v.abs()).sum::<f64>() / self.flat.len() as f64
    }

    /// FNV-1a hash over the exact parameter bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.flat {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn add_assign_scaled(&mut self, other: &DenoiserParams, scale: f64) {
        assert_eq!(self.flat.len(), other.flat.len(), "parameter length mismatch");
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.flat {
            *v *= factor;
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.flat.iter().all(|&v| v == 0.0)
    }
}

/// Gradients share the flat layout of the parameters they differentiate.
pub type DenoiserGrads = DenoiserParams;

/// Fan-in scaled uniform init: weights from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// biases zero. Deterministic in the rng state.
pub fn init_params(arch: &Arch, rng: &mut StreamRng) -> DenoiserParams {
    let mut flat = Vec::with_capacity(arch.param_count());
    for l in 0..arch.n_layers() {
        let (fan_in, fan_out) = arch.layer_dims(l);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            flat.push(rng.uniform_range(-bound, bound));
        }
        flat.extend(std::iter::repeat(0.0).take(fan_out));
    }
    DenoiserParams { flat }
}

/// Sinusoidal embedding of a diffusion step index.
///
/// `width` must be even; frequency `i` of `width/2` is
/// `10000^(-2i/width)`, emitted as an interleaved `[sin, cos]` pair.
pub fn step_embedding(k: usize, width: usize) -> Vec<f64> {
    assert!(width % 2 == 0, "step embedding width must be even");
    let half = width / 2;
    let mut emb = Vec::with_capacity(width);
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / width as f64);
        let angle = k as f64 * freq;
        emb.push(angle.sin());
        emb.push(angle.cos());
    }
    emb
}

/// [`step_embedding`] rows for every index in `0..=k_max`, computed once.
/// Sampling and gradient loops hit the same few indices millions of times;
/// the table trades a handful of sin/cos calls for slice lookups.
#[derive(Clone, Debug)]
pub struct StepEmbeddingTable {
    rows: Vec<Vec<f64>>,
}

impl StepEmbeddingTable {
    pub fn new(k_max: usize, width: usize) -> Self {
        StepEmbeddingTable { rows: (0..=k_max).map(|k| step_embedding(k, width)).collect() }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }
}

/// Concatenate the network input: noisy plan, step embedding, conditioning.
pub fn assemble_input(plan: &[f64], k: usize, emb_width: usize, context: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(plan.len() + emb_width + context.len());
    input.extend_from_slice(plan);
    if emb_width > 0 {
        input.extend(step_embedding(k, emb_width));
    }
    input.extend_from_slice(context);
    input
}

/// Intermediate activations kept for the backward pass.
/// `activations[0]` is the input; `activations[l+1]` is layer `l`'s output.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// An empty cache; [`forward_into`] shapes it on first use.
    pub fn empty() -> Self {
        ForwardCache { activations: Vec::new() }
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache has layers")
    }
}

/// Run the network. Hidden layers apply the activation; the last layer is linear.
pub fn forward(params: &DenoiserParams, arch: &Arch, input: &[f64]) -> (Vec<f64>, ForwardCache) {
    let mut cache = ForwardCache::empty();
    forward_into(params, arch, input, &mut cache);
    let output = cache.output().to_vec();
    (output, cache)
}

/// [`forward`] writing into a reused cache, so steady-state evaluation does
/// not allocate. Produces bit-identical activations.
pub fn forward_into(params: &DenoiserParams, arch: &Arch, input: &[f64], cache: &mut ForwardCache) {
    assert_eq!(input.len(), arch.input_dim(), "input width mismatch");
    assert_eq!(params.flat.len(), arch.param_count(), "parameter count mismatch");

    let n_layers = arch.n_layers();
    if cache.activations.len() != n_layers + 1 {
        cache.activations = arch.layer_sizes.iter().map(|&n| Vec::with_capacity(n)).collect();
    }
    let first = &mut cache.activations[0];
    first.clear();
    first.extend_from_slice(input);

    let mut offset = 0;
    for l in 0..n_layers {
        let (fan_in, fan_out) = arch.layer_dims(l);
        let weights = &params.flat[offset..offset + fan_in * fan_out];
        let biases = &params.flat[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        offset += (fan_in + 1) * fan_out;

        let (head, tail) = cache.activations.split_at_mut(l + 1);
        let prev = head[l].as_slice();
        let out = &mut tail[0];
        out.clear();
        for o in 0..fan_out {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            let mut z = biases[o];
            for (w, a) in row.iter().zip(prev) {
                z += w * a;
            }
            out.push(if l + 1 < n_layers { arch.activation.apply(z) } else { z });
        }
    }
}

/// Reverse-mode gradients of a scalar loss with respect to every parameter,
/// given `grad_output = dL/d(output)` and the forward cache.
pub fn backward(params: &DenoiserParams, arch: &Arch, cache: &ForwardCache, grad_output: &[f64]) -> DenoiserGrads {
    let mut acc = vec![0.0; arch.param_count()];
    let mut scratch = BackwardScratch::default();
    backward_into(params, arch, cache, grad_output, &mut acc, &mut scratch);
    DenoiserParams { flat: acc }
}

/// Reused delta buffers for [`backward_into`].
#[derive(Clone, Debug, Default)]
pub struct BackwardScratch {
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

/// [`backward`] accumulating directly into `acc` (`+=` per parameter), so
/// batch loops sum per-example gradients without intermediate buffers.
/// Contributions are bit-identical to adding the [`backward`] result.
pub fn backward_into(
    params: &DenoiserParams,
    arch: &Arch,
    cache: &ForwardCache,
    grad_output: &[f64],
    acc: &mut [f64],
    scratch: &mut BackwardScratch,
) {
    assert_eq!(grad_output.len(), arch.output_dim(), "grad_output width mismatch");
    assert_eq!(cache.activations.len(), arch.n_layers() + 1, "cache depth mismatch");
    assert_eq!(acc.len(), arch.param_count(), "gradient accumulator length mismatch");

    let n_layers = arch.n_layers();

    // Layer offsets, front to back.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut total = 0;
    for l in 0..n_layers {
        offsets.push(total);
        let (fan_in, fan_out) = arch.layer_dims(l);
        total += (fan_in + 1) * fan_out;
    }

    // The output layer is linear, so its delta is grad_output itself.
    scratch.delta.clear();
    scratch.delta.extend_from_slice(grad_output);
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = arch.layer_dims(l);
        let offset = offsets[l];
        let prev = &cache.activations[l];

        for o in 0..fan_out {
            let d = scratch.delta[o];
            let w_row = offset + o * fan_in;
            for i in 0..fan_in {
                acc[w_row + i] += d * prev[i];
            }
            acc[offset + fan_in * fan_out + o] += d;
        }

        if l > 0 {
            // Propagate through this layer's weights, then the previous
            // layer's activation derivative.
            let weights = &params.flat[offset..offset + fan_in * fan_out];
            scratch.next_delta.clear();
            scratch.next_delta.resize(fan_in, 0.0);
            for o in 0..fan_out {
                let d = scratch.delta[o];
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                for (nd, w) in scratch.next_delta.iter_mut().zip(row) {
                    *nd += d * w;
                }
            }
            for (nd, a) in scratch.next_delta.iter_mut().zip(prev) {
                *nd *= arch.activation.derivative_from_output(*a);
            }
            std::mem::swap(&mut scratch.delta, &mut scratch.next_delta);
        }
    }
}

/// Adam state. `step` counts completed updates; moments share the flat
/// parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        OptimizerState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// One bias-corrected Adam update. Returns fresh parameters and state;
/// inputs are untouched.
pub fn adam_step(params: &DenoiserParams, grads: &DenoiserGrads, state: &OptimizerState) -> (DenoiserParams, OptimizerState) {
    assert_eq!(params.flat.len(), grads.flat.len(), "grads length mismatch");
    assert_eq!(params.flat.len(), state.m.len(), "optimizer state length mismatch");

    let mut next = state.clone();
    next.step = state.step + 1;
    let bc1 = 1.0 - state.beta1.powi(next.step as i32);
    let bc2 = 1.0 - state.beta2.powi(next.step as i32);

    let mut flat = params.flat.clone();
    for i in 0..flat.len() {
        let g = grads.flat[i];
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        flat[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    (DenoiserParams { flat }, next)
}
