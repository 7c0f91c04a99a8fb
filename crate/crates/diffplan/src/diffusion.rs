//! The conditional diffusion planner.
//!
//! Plans are flat vectors `[x_1, y_1, ..., x_T, y_T]` of future ego
//! positions in the ego frame, standardized per coordinate. The forward
//! process noises a clean plan toward an isotropic Gaussian over K steps;
//! the reverse process denoises from pure noise, each step a Gaussian whose
//! mean comes from the denoising network's noise estimate. Sampling can
//! record every reverse transition (state, action, mean, variance, log
//! density), which is what the policy-gradient fine-tuning consumes.

use crate::denoiser::{
    assemble_input, backward_into, forward, forward_into, init_params, adam_step, Arch,
    BackwardScratch, DenoiserGrads, DenoiserParams, ForwardCache, OptimizerState,
    StepEmbeddingTable,
};
use crate::error::{Error, Result};
use crate::forecast::{forecast_constant_velocity, Forecast};
use crate::geom::Vec2;
use crate::rng::StreamRng;
use crate::scene::{normalize_frame, FrameTransform, Scene, Trajectory};
use serde::{Deserialize, Serialize};

/// Variance schedule for the forward noising process.
///
/// Arrays have length `k_steps + 1` and are indexed by the step number
/// directly; index 0 holds the no-noise sentinels (`beta = 0`, `alpha = 1`,
/// `alpha_bar = 1`). `beta_tilde[k]` is the reverse-transition variance:
/// the Gaussian posterior variance for `k >= 2`, and `beta[1]` at the final
/// step (the exact posterior variance there is zero, which would make log
/// densities infinite).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub beta_tildes: Vec<f64>,
}

impl NoiseSchedule {
    pub fn k_steps(&self) -> usize {
        self.betas.len() - 1
    }

    /// Residual signal fraction after all K noising steps.
    pub fn alpha_bar_final(&self) -> f64 {
        *self.alpha_bars.last().expect("schedule is non-empty")
    }
}

/// Parameters for [`build_schedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub k_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Chosen so that with K = 20 the terminal signal fraction
        // alpha_bar_K is about 0.014, i.e. y^K is essentially pure noise.
        ScheduleConfig { k_steps: 20, beta_start: 0.02, beta_end: 0.35 }
    }
}

/// Build a linear variance schedule: `beta_k` interpolates from `beta_start`
/// at k = 1 to `beta_end` at k = K.
pub fn build_schedule(config: &ScheduleConfig) -> Result<NoiseSchedule> {
    let k_steps = config.k_steps;
    let (bs, be) = (config.beta_start, config.beta_end);
    if k_steps < 1 {
        return Err(Error::InvalidConfig("schedule needs k_steps >= 1".into()));
    }
    if !(bs > 0.0 && bs <= be && be < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got [{bs}, {be}]"
        )));
    }

    let mut betas = vec![0.0];
    for k in 1..=k_steps {
        let frac = if k_steps == 1 { 0.0 } else { (k - 1) as f64 / (k_steps - 1) as f64 };
        betas.push(bs + (be - bs) * frac);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = vec![1.0];
    for k in 1..=k_steps {
        alpha_bars.push(alpha_bars[k - 1] * alphas[k]);
    }
    let mut beta_tildes = vec![0.0];
    for k in 1..=k_steps {
        if k == 1 {
            beta_tildes.push(betas[1]);
        } else {
            beta_tildes.push((1.0 - alpha_bars[k - 1]) / (1.0 - alpha_bars[k]) * betas[k]);
        }
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars, beta_tildes })
}

/// Noise a clean plan to step `k`:
/// `y^k = sqrt(alpha_bar_k) y^0 + sqrt(1 - alpha_bar_k) eps`.
/// `k = 0` returns the plan unchanged.
pub fn forward_noise(schedule: &NoiseSchedule, y0: &[f64], k: usize, eps: &[f64]) -> Vec<f64> {
    assert!(k <= schedule.k_steps(), "step {k} out of range");
    assert_eq!(y0.len(), eps.len(), "noise width mismatch");
    let ab = schedule.alpha_bars[k];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    y0.iter().zip(eps).map(|(y, e)| sa * y + sn * e).collect()
}

/// Mean of the forward-process posterior `q(y^{k-1} | y^k, y^0)`.
pub fn posterior_mean(schedule: &NoiseSchedule, y0: &[f64], yk: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1 && k <= schedule.k_steps(), "step {k} out of range");
    let ab_prev = schedule.alpha_bars[k - 1];
    let ab = schedule.alpha_bars[k];
    let beta = schedule.betas[k];
    let alpha = schedule.alphas[k];
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ck = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    y0.iter().zip(yk).map(|(y0j, ykj)| c0 * y0j + ck * ykj).collect()
}

/// Log density of `x` under an isotropic Gaussian `N(mean, var I)`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: f64) -> f64 {
    assert_eq!(x.len(), mean.len(), "logpdf width mismatch");
    assert!(var > 0.0, "variance must be positive");
    let norm = -0.5 * (std::f64::consts::TAU * var).ln();
    x.iter()
        .zip(mean)
        .map(|(xi, mi)| norm - (xi - mi) * (xi - mi) / (2.0 * var))
        .sum()
}

/// Coefficients of the noise-estimate mean parameterization:
/// `mu_theta = c1 y^k - c2 eps_hat` with `c1 = 1/sqrt(alpha_k)` and
/// `c2 = beta_k / (sqrt(alpha_k) sqrt(1 - alpha_bar_k))`.
pub fn mean_coefficients(schedule: &NoiseSchedule, k: usize) -> (f64, f64) {
    assert!(k >= 1 && k <= schedule.k_steps(), "step {k} out of range");
    let sqrt_alpha = schedule.alphas[k].sqrt();
    let c1 = 1.0 / sqrt_alpha;
    let c2 = schedule.betas[k] / (sqrt_alpha * (1.0 - schedule.alpha_bars[k]).sqrt());
    (c1, c2)
}

/// Shape of the planning model. The network input is the standardized plan,
/// a sinusoidal step embedding, and the conditioning vector (scaled ego
/// history, neighbor forecasts, goal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_obs: usize,
    pub t_fut: usize,
    pub n_neighbors: usize,
    pub emb_width: usize,
    pub hidden: Vec<usize>,
    /// Conditioning coordinates are divided by this before entering the net.
    pub arena_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_obs: 8,
            t_fut: 8,
            n_neighbors: 5,
            emb_width: 16,
            hidden: vec![128, 128],
            arena_radius: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 2 || self.t_fut < 1 {
            return Err(Error::InvalidConfig("model needs t_obs >= 2 and t_fut >= 1".into()));
        }
        if self.emb_width % 2 != 0 {
            return Err(Error::InvalidConfig("emb_width must be even".into()));
        }
        if !(self.arena_radius > 0.0) {
            return Err(Error::InvalidConfig("arena_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn plan_dim(&self) -> usize {
        2 * self.t_fut
    }

    pub fn context_dim(&self) -> usize {
        2 * self.t_obs + 2 * self.t_fut * self.n_neighbors + 2
    }

    pub fn input_dim(&self) -> usize {
        self.plan_dim() + self.emb_width + self.context_dim()
    }

    pub fn arch(&self) -> Arch {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.plan_dim());
        Arch::new(sizes).expect("validated model config yields a valid arch")
    }
}

/// Per-coordinate affine standardization of plan vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fit mean and (population) std per coordinate; stds are floored at
    /// 1e-6 so degenerate coordinates stay invertible.
    pub fn fit(plans: &[Vec<f64>]) -> Result<Self> {
        let first = plans
            .first()
            .ok_or_else(|| Error::InvalidConfig("normalizer needs at least one plan".into()))?;
        let dim = first.len();
        if plans.iter().any(|p| p.len() != dim) {
            return Err(Error::ShapeMismatch("normalizer plans have mixed widths".into()));
        }
        let n = plans.len() as f64;
        let mut mean = vec![0.0; dim];
        for p in plans {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; dim];
        for p in plans {
            for (s, (v, m)) in std.iter_mut().zip(p.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt().max(1e-6);
        }
        Ok(Normalizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "normalizer width mismatch");
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "normalizer width mismatch");
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

pub fn flatten_points(points: &[Vec2]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(points.len() * 2);
    for p in points {
        flat.push(p.x);
        flat.push(p.y);
    }
    flat
}

pub fn unflatten_points(flat: &[f64]) -> Vec<Vec2> {
    assert!(flat.len() % 2 == 0, "flat point list must have even length");
    flat.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect()
}

/// Everything the sampler needs about one scene: the ego-frame transform,
/// the assembled conditioning vector, and ego-frame copies of the forecast
/// and goal for reward computation.
#[derive(Clone, Debug)]
pub struct PlanningContext {
    pub scene_id: u64,
    pub transform: FrameTransform,
    /// Scaled conditioning: ego history, forecast futures, goal.
    pub context: Vec<f64>,
    /// Forecast neighbor futures in the ego frame, unscaled.
    pub forecast_frame: Vec<Trajectory>,
    /// Goal in the ego frame, unscaled.
    pub goal_frame: Vec2,
    pub dt: f64,
}

/// Assemble the conditioning for one scene from its neighbor forecast.
pub fn build_context(scene: &Scene, forecast: &Forecast, model: &ModelConfig) -> Result<PlanningContext> {
    if scene.t_obs() != model.t_obs {
        return Err(Error::ShapeMismatch(format!(
            "scene t_obs {} != model t_obs {}",
            scene.t_obs(),
            model.t_obs
        )));
    }
    if scene.n_neighbors() != model.n_neighbors {
        return Err(Error::ShapeMismatch(format!(
            "scene has {} neighbors, model expects {}",
            scene.n_neighbors(),
            model.n_neighbors
        )));
    }
    if forecast.n_neighbors() != model.n_neighbors
        || forecast.neighbor_futures.iter().any(|t| t.len() != model.t_fut)
    {
        return Err(Error::ShapeMismatch("forecast shape does not match the model".into()));
    }

    let (frame_scene, transform) = normalize_frame(scene)?;
    let scale = 1.0 / model.arena_radius;

    let forecast_frame: Vec<Trajectory> = forecast
        .neighbor_futures
        .iter()
        .map(|t| Trajectory {
            points: t.points.iter().map(|&p| transform.to_frame(p)).collect(),
            dt: t.dt,
        })
        .collect();

    let mut context = Vec::with_capacity(model.context_dim());
    for p in &frame_scene.ego_history.points {
        context.push(p.x * scale);
        context.push(p.y * scale);
    }
    for t in &forecast_frame {
        for p in &t.points {
            context.push(p.x * scale);
            context.push(p.y * scale);
        }
    }
    context.push(frame_scene.ego_goal.x * scale);
    context.push(frame_scene.ego_goal.y * scale);
    debug_assert_eq!(context.len(), model.context_dim());

    Ok(PlanningContext {
        scene_id: scene.scene_id,
        transform,
        context,
        forecast_frame,
        goal_frame: frame_scene.ego_goal,
        dt: scene.dt(),
    })
}

/// Evaluate the reverse-transition mean at `(y^k, k)`:
/// run the network for `eps_hat`, then `mu = c1 y^k - c2 eps_hat`.
/// Returns the mean, the raw noise estimate, and the forward cache.
pub fn transition_mean(
    params: &DenoiserParams,
    arch: &Arch,
    schedule: &NoiseSchedule,
    emb_width: usize,
    yk: &[f64],
    k: usize,
    context: &[f64],
) -> (Vec<f64>, Vec<f64>, ForwardCache) {
    let input = assemble_input(yk, k, emb_width, context);
    let (eps_hat, cache) = forward(params, arch, &input);
    let (c1, c2) = mean_coefficients(schedule, k);
    let mean = yk.iter().zip(&eps_hat).map(|(y, e)| c1 * y - c2 * e).collect();
    (mean, eps_hat, cache)
}

/// Reused buffers for repeated network evaluations: the step-embedding
/// table, the assembled input, the forward cache (which holds `eps_hat`
/// after a call), and backward-pass scratch. Sampling a plan touches the
/// network `K` times and fine-tuning replays every transition, so the
/// per-call allocations this removes dominate the runtime otherwise.
#[derive(Clone, Debug)]
pub struct EvalScratch {
    emb: StepEmbeddingTable,
    input: Vec<f64>,
    pub cache: ForwardCache,
    pub back: BackwardScratch,
}

impl EvalScratch {
    pub fn new(emb_width: usize, k_max: usize) -> Self {
        EvalScratch {
            emb: StepEmbeddingTable::new(k_max, emb_width),
            input: Vec::new(),
            cache: ForwardCache::empty(),
            back: BackwardScratch::default(),
        }
    }

    pub fn for_planner(planner: &Planner) -> Self {
        EvalScratch::new(planner.model.emb_width, planner.schedule.k_steps())
    }

    /// Mirror of [`assemble_input`] writing into the reused buffer.
    fn assemble(&mut self, plan: &[f64], k: usize, context: &[f64]) {
        self.input.clear();
        self.input.extend_from_slice(plan);
        self.input.extend_from_slice(self.emb.row(k));
        self.input.extend_from_slice(context);
    }
}

/// [`transition_mean`] through an [`EvalScratch`]; bit-identical results,
/// no steady-state allocation beyond the returned mean. `eps_hat` stays
/// readable as `scratch.cache.output()`.
pub fn transition_mean_scratch(
    params: &DenoiserParams,
    arch: &Arch,
    schedule: &NoiseSchedule,
    yk: &[f64],
    k: usize,
    context: &[f64],
    scratch: &mut EvalScratch,
) -> Vec<f64> {
    scratch.assemble(yk, k, context);
    forward_into(params, arch, &scratch.input, &mut scratch.cache);
    let (c1, c2) = mean_coefficients(schedule, k);
    yk.iter().zip(scratch.cache.output()).map(|(y, e)| c1 * y - c2 * e).collect()
}

/// One recorded reverse transition, in standardized plan space.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    /// The state `y^k` the transition started from.
    pub state: Vec<f64>,
    /// The sampled next state `y^{k-1}`.
    pub action: Vec<f64>,
    /// Transition mean `mu_theta(y^k, k)`.
    pub mean: Vec<f64>,
    /// Transition variance `beta_tilde_k` (isotropic).
    pub var: f64,
    /// `log N(action; mean, var I)`.
    pub logp: f64,
}

/// A sampled plan plus everything needed to reconstruct its probability.
#[derive(Clone, Debug)]
pub struct SampledPlan {
    /// Final plan in world coordinates.
    pub plan_world: Trajectory,
    /// Final plan in the ego frame.
    pub plan_frame: Vec<Vec2>,
    /// Final plan in standardized coordinates (the chain's `y^0`).
    pub plan_std: Vec<f64>,
    /// Reverse transitions from k = K down to 1; empty unless recording.
    pub records: Vec<StepRecord>,
    /// Sum of transition log densities along the chain.
    pub loglik_sum: f64,
}

/// The trained planner: network parameters plus everything needed to map
/// between standardized plan space and world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Planner {
    pub params: DenoiserParams,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    pub schedule: NoiseSchedule,
}

impl Planner {
    pub fn arch(&self) -> Arch {
        self.model.arch()
    }
}

/// Run the reverse chain from pure noise. Each transition draws
/// `y^{k-1} ~ N(mu_theta(y^k, k), beta_tilde_k I)`. With `record` set, every
/// transition is kept for later likelihood reconstruction; the rng sequence
/// is identical either way.
pub fn sample_plan(planner: &Planner, ctx: &PlanningContext, rng: &mut StreamRng, record: bool) -> SampledPlan {
    sample_plan_with(planner, ctx, rng, record, |_, _, _| {})
}

/// [`sample_plan`] with a hook that may adjust each transition mean before
/// the step is drawn; it receives `(k, state, mean)`. Records and log
/// densities describe the adjusted distribution actually sampled from. A
/// no-op hook reproduces [`sample_plan`] bit for bit.
pub fn sample_plan_with<F>(
    planner: &Planner,
    ctx: &PlanningContext,
    rng: &mut StreamRng,
    record: bool,
    mean_hook: F,
) -> SampledPlan
where
    F: FnMut(usize, &[f64], &mut Vec<f64>),
{
    let mut scratch = EvalScratch::for_planner(planner);
    sample_plan_with_scratch(planner, ctx, rng, record, &mut scratch, mean_hook)
}

/// [`sample_plan_with`] reusing caller-held buffers across calls; batch
/// loops (rollout collection, evaluation) should hold one [`EvalScratch`]
/// for the whole batch.
pub fn sample_plan_with_scratch<F>(
    planner: &Planner,
    ctx: &PlanningContext,
    rng: &mut StreamRng,
    record: bool,
    scratch: &mut EvalScratch,
    mut mean_hook: F,
) -> SampledPlan
where
    F: FnMut(usize, &[f64], &mut Vec<f64>),
{
    let arch = planner.arch();
    let schedule = &planner.schedule;
    let dim = planner.model.plan_dim();
    let k_steps = schedule.k_steps();

    let mut y: Vec<f64> = rng.normal_vec(dim);
    let mut records = Vec::with_capacity(if record { k_steps } else { 0 });
    let mut loglik_sum = 0.0;

    for k in (1..=k_steps).rev() {
        let mut mean =
            transition_mean_scratch(&planner.params, &arch, schedule, &y, k, &ctx.context, scratch);
        mean_hook(k, &y, &mut mean);
        let var = schedule.beta_tildes[k];
        let sd = var.sqrt();
        let next: Vec<f64> = mean.iter().map(|m| m + sd * rng.normal()).collect();
        let logp = gaussian_logpdf(&next, &mean, var);
        loglik_sum += logp;
        if record {
            records.push(StepRecord { k, state: y.clone(), action: next.clone(), mean, var, logp });
        }
        y = next;
    }

    let plan_frame = unflatten_points(&planner.normalizer.denormalize(&y));
    let plan_world = Trajectory {
        points: plan_frame.iter().map(|&p| ctx.transform.apply(p)).collect(),
        dt: ctx.dt,
    };
    SampledPlan { plan_world, plan_frame, plan_std: y, records, loglik_sum }
}

/// Which regression target the pretraining loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Squared error between the model mean and the forward-posterior mean.
    Mu,
    /// Squared error between the noise estimate and the injected noise.
    Eps,
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode::Mu
    }
}

/// One standardized training example: clean plan plus conditioning.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub plan_std: Vec<f64>,
    pub context: Vec<f64>,
}

/// A training example with its noising draw attached.
#[derive(Clone, Debug)]
pub struct NoisedExample {
    pub plan_std: Vec<f64>,
    pub context: Vec<f64>,
    pub k: usize,
    pub eps: Vec<f64>,
}

/// Build standardized training examples from scenes: ego-frame ground-truth
/// futures standardized by a normalizer fit on this same set, plus
/// conditioning from constant-velocity forecasts.
pub fn prepare_training_set(scenes: &[Scene], model: &ModelConfig) -> Result<(Vec<TrainExample>, Normalizer)> {
    model.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one scene".into()));
    }

    let mut contexts = Vec::with_capacity(scenes.len());
    let mut plans = Vec::with_capacity(scenes.len());
    for scene in scenes {
        if scene.t_fut() != model.t_fut {
            return Err(Error::ShapeMismatch(format!(
                "scene t_fut {} != model t_fut {}",
                scene.t_fut(),
                model.t_fut
            )));
        }
        let forecast = forecast_constant_velocity(scene, model.t_fut)?;
        let ctx = build_context(scene, &forecast, model)?;
        let frame_plan: Vec<Vec2> = scene
            .ego_future_gt
            .points
            .iter()
            .map(|&p| ctx.transform.to_frame(p))
            .collect();
        plans.push(flatten_points(&frame_plan));
        contexts.push(ctx.context);
    }

    let normalizer = Normalizer::fit(&plans)?;
    let examples = plans
        .into_iter()
        .zip(contexts)
        .map(|(plan, context)| TrainExample { plan_std: normalizer.normalize(&plan), context })
        .collect();
    Ok((examples, normalizer))
}

/// Draw a training batch: examples uniformly with replacement, a uniform
/// step `k in {1..K}` and fresh Gaussian noise per item.
pub fn draw_batch(
    examples: &[TrainExample],
    schedule: &NoiseSchedule,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Vec<NoisedExample> {
    let k_steps = schedule.k_steps();
    (0..batch_size)
        .map(|_| {
            let ex = &examples[rng.uniform_usize(examples.len())];
            let k = 1 + rng.uniform_usize(k_steps);
            let eps = rng.normal_vec(ex.plan_std.len());
            NoisedExample { plan_std: ex.plan_std.clone(), context: ex.context.clone(), k, eps }
        })
        .collect()
}

/// Batch denoising loss and its exact parameter gradient.
///
/// Per item the loss is the mean squared error over the plan's `D`
/// coordinates, against either the forward-posterior mean (`Mu`) or the
/// injected noise (`Eps`); the batch loss is the item mean. Deterministic
/// given the batch, so gradients are finite-difference checkable.
pub fn ddpm_loss_and_grads(
    params: &DenoiserParams,
    arch: &Arch,
    schedule: &NoiseSchedule,
    emb_width: usize,
    batch: &[NoisedExample],
    mode: LossMode,
) -> (f64, DenoiserGrads) {
    assert!(!batch.is_empty(), "loss needs a non-empty batch");
    let k_max = batch.iter().map(|item| item.k).max().expect("batch is non-empty");
    let mut scratch = EvalScratch::new(emb_width, k_max);
    let mut grads = DenoiserParams::zeros_like(params);
    let mut loss = 0.0;
    let batch_scale = 1.0 / batch.len() as f64;

    for item in batch {
        let dim = item.plan_std.len();
        let dim_scale = 1.0 / dim as f64;
        let yk = forward_noise(schedule, &item.plan_std, item.k, &item.eps);

        match mode {
            LossMode::Mu => {
                let mean =
                    transition_mean_scratch(params, arch, schedule, &yk, item.k, &item.context, &mut scratch);
                let target = posterior_mean(schedule, &item.plan_std, &yk, item.k);
                let (_, c2) = mean_coefficients(schedule, item.k);
                let mut grad_output = vec![0.0; dim];
                for j in 0..dim {
                    let diff = mean[j] - target[j];
                    loss += batch_scale * dim_scale * diff * diff;
                    // d(mean_j)/d(eps_hat_j) = -c2.
                    grad_output[j] = batch_scale * dim_scale * 2.0 * diff * (-c2);
                }
                backward_into(params, arch, &scratch.cache, &grad_output, &mut grads.flat, &mut scratch.back);
            }
            LossMode::Eps => {
                scratch.assemble(&yk, item.k, &item.context);
                forward_into(params, arch, &scratch.input, &mut scratch.cache);
                let mut grad_output = vec![0.0; dim];
                for j in 0..dim {
                    let diff = scratch.cache.output()[j] - item.eps[j];
                    loss += batch_scale * dim_scale * diff * diff;
                    grad_output[j] = batch_scale * dim_scale * 2.0 * diff;
                }
                backward_into(params, arch, &scratch.cache, &grad_output, &mut grads.flat, &mut scratch.back);
            }
        }
    }
    (loss, grads)
}

impl DenoiserParams {
    fn zeros_like(other: &DenoiserParams) -> DenoiserParams {
        DenoiserParams { flat: vec![0.0; other.flat.len()] }
    }
}

/// Pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, batch_size: 64, lr: 1e-3, loss_mode: LossMode::Mu, seed: 0 }
    }
}

/// Loss trace of a training run. The digest covers step numbers and exact
/// loss bit patterns but not wall time, so identical seeds can be checked
/// for bit-identical training behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
    pub wall_time_s: f64,
}

impl TrainingLog {
    pub fn content_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bits: u64| {
            for byte in bits.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (i, loss) in self.losses.iter().enumerate() {
            mix(i as u64);
            mix(loss.to_bits());
        }
        h
    }

    pub fn mean_loss_first(&self, n: usize) -> f64 {
        let take = n.min(self.losses.len()).max(1);
        self.losses[..take].iter().sum::<f64>() / take as f64
    }

    pub fn mean_loss_last(&self, n: usize) -> f64 {
        let take = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - take..].iter().sum::<f64>() / take as f64
    }
}

/// Train a planner from scratch on the given scenes. Deterministic in
/// `(scenes, model, schedule, config)`.
pub fn pretrain(
    scenes: &[Scene],
    model: &ModelConfig,
    schedule_config: &ScheduleConfig,
    config: &PretrainConfig,
) -> Result<(Planner, TrainingLog)> {
    if config.steps < 1 || config.batch_size < 1 {
        return Err(Error::InvalidConfig("pretraining needs steps >= 1 and batch_size >= 1".into()));
    }
    if !(config.lr > 0.0) {
        return Err(Error::InvalidConfig("learning rate must be positive".into()));
    }
    let schedule = build_schedule(schedule_config)?;
    let (examples, normalizer) = prepare_training_set(scenes, model)?;
    let arch = model.arch();

    let root = StreamRng::seed(config.seed);
    let mut params = init_params(&arch, &mut root.stream("init"));
    let mut opt = OptimizerState::new(arch.param_count(), config.lr);

    let start = std::time::Instant::now();
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let mut batch_rng = root.stream_indexed("batch", step);
        let batch = draw_batch(&examples, &schedule, config.batch_size, &mut batch_rng);
        let (loss, grads) =
            ddpm_loss_and_grads(&params, &arch, &schedule, model.emb_width, &batch, config.loss_mode);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {step}")));
        }
        let (next_params, next_opt) = adam_step(&params, &grads, &opt);
        params = next_params;
        opt = next_opt;
        losses.push(loss);
    }

    let planner = Planner { params, model: model.clone(), normalizer, schedule };
    let log = TrainingLog { losses, wall_time_s: start.elapsed().as_secs_f64() };
    Ok((planner, log))
}
