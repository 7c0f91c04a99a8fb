//! End-to-end stage runners shared by the command-line tool and the
//! integration tests. Each stage is a pure function of its inputs and seed,
//! so a full generate / pretrain / fine-tune / evaluate pass reproduces
//! bit-identically.

use crate::checkpoint::Checkpoint;
use crate::ddpo::{finetune, FinetuneConfig, FinetuneLog};
use crate::denoiser::OptimizerState;
use crate::diffusion::{
    build_context, pretrain, sample_plan, sample_plan_with_scratch, EvalScratch, ModelConfig,
    Planner, PlanningContext, PretrainConfig, SampledPlan, ScheduleConfig, TrainingLog,
};
use crate::error::{Error, Result};
use crate::forecast::forecast_constant_velocity;
use crate::guidance::{sample_plan_guided, GuidanceConfig};
use crate::metrics::{compute_metrics, EvalThresholds, MetricsReport};
use crate::rewards::max_jerk;
use crate::rng::StreamRng;
use crate::scene::{generate_scenes, validate_scene, Scene, SceneConfig, Trajectory};

/// Output of scene generation.
pub struct GenArtifacts {
    pub scenes: Vec<Scene>,
    /// 70th percentile of ground-truth peak jerk, a reasonable starting
    /// point for the discomfort threshold.
    pub jerk_suggestion: f64,
}

/// Generate and validate a scene set.
pub fn run_gen(count: usize, config: &SceneConfig, seed: u64) -> Result<GenArtifacts> {
    let scenes = generate_scenes(count, config, seed)?;
    for scene in &scenes {
        let verdict = validate_scene(scene, config);
        if !verdict.is_pass() {
            return Err(Error::InvalidScene(format!(
                "generated scene {} failed validation: {}",
                scene.scene_id,
                verdict.violations.join("; ")
            )));
        }
    }
    let mut peaks: Vec<f64> = scenes
        .iter()
        .map(|s| max_jerk(&s.ego_future_gt.points, s.ego_last_observed(), s.dt()))
        .collect();
    peaks.sort_by(|a, b| a.partial_cmp(b).expect("jerk values are finite"));
    let rank = ((0.7 * peaks.len() as f64).ceil() as usize).clamp(1, peaks.len());
    Ok(GenArtifacts { scenes, jerk_suggestion: peaks[rank - 1] })
}

/// Pretrain a planner and wrap it with its optimizer state.
pub fn run_pretrain(
    scenes: &[Scene],
    model: &ModelConfig,
    schedule: &ScheduleConfig,
    config: &PretrainConfig,
) -> Result<(Checkpoint, TrainingLog)> {
    let (planner, log) = pretrain(scenes, model, schedule, config)?;
    let optimizer = OptimizerState::new(planner.params.len(), config.lr);
    Ok((Checkpoint { planner, optimizer }, log))
}

/// Build planning contexts (forecast plus conditioning) for every scene.
pub fn build_contexts(scenes: &[Scene], model: &ModelConfig) -> Result<Vec<PlanningContext>> {
    scenes
        .iter()
        .map(|s| {
            let forecast = forecast_constant_velocity(s, model.t_fut)?;
            build_context(s, &forecast, model)
        })
        .collect()
}

/// Fine-tune a checkpointed planner against the configured rewards.
pub fn run_finetune(
    checkpoint: &Checkpoint,
    scenes: &[Scene],
    config: &FinetuneConfig,
) -> Result<(Checkpoint, FinetuneLog)> {
    let contexts = build_contexts(scenes, &checkpoint.planner.model)?;
    let (planner, log) = finetune(&checkpoint.planner, &contexts, config)?;
    let optimizer = OptimizerState::new(planner.params.len(), config.lr);
    Ok((Checkpoint { planner, optimizer }, log))
}

/// Sample one plan per scene (optionally guided) and score the plans
/// against ground truth. Seeded per scene index, so the report depends only
/// on `(planner, scenes, thresholds, guidance, seed)`.
pub fn run_eval(
    planner: &Planner,
    scenes: &[Scene],
    thresholds: &EvalThresholds,
    guidance: Option<&GuidanceConfig>,
    seed: u64,
) -> Result<MetricsReport> {
    let plans = eval_plans(planner, scenes, guidance, seed)?;
    compute_metrics(scenes, &plans, thresholds)
}

/// Draw several plans for one scene, optionally guided.
pub fn run_sample(
    planner: &Planner,
    scene: &Scene,
    n_samples: usize,
    guidance: Option<&GuidanceConfig>,
    seed: u64,
) -> Result<Vec<SampledPlan>> {
    if n_samples < 1 {
        return Err(Error::InvalidConfig("sampling needs n_samples >= 1".into()));
    }
    let forecast = forecast_constant_velocity(scene, planner.model.t_fut)?;
    let ctx = build_context(scene, &forecast, &planner.model)?;
    let root = StreamRng::seed(seed);
    (0..n_samples)
        .map(|i| {
            let mut rng = root.stream_indexed("sample", i as u64);
            match guidance {
                Some(g) => sample_plan_guided(planner, &ctx, g, &mut rng, false),
                None => Ok(sample_plan(planner, &ctx, &mut rng, false)),
            }
        })
        .collect()
}

/// Plans produced by [`run_eval`], exposed for plotting and debugging.
pub fn eval_plans(planner: &Planner, scenes: &[Scene], guidance: Option<&GuidanceConfig>, seed: u64) -> Result<Vec<Trajectory>> {
    let contexts = build_contexts(scenes, &planner.model)?;
    let root = StreamRng::seed(seed);
    let mut scratch = EvalScratch::for_planner(planner);
    contexts
        .iter()
        .enumerate()
        .map(|(i, ctx)| {
            let mut rng = root.stream_indexed("eval", i as u64);
            let sampled = match guidance {
                Some(g) => sample_plan_guided(planner, ctx, g, &mut rng, false)?,
                None => sample_plan_with_scratch(planner, ctx, &mut rng, false, &mut scratch, |_, _, _| {}),
            };
            Ok(sampled.plan_world)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_pretrain(scenes: &[Scene]) -> Checkpoint {
        let model = ModelConfig { hidden: vec![16], emb_width: 8, ..Default::default() };
        let cfg = PretrainConfig { steps: 30, batch_size: 8, ..Default::default() };
        run_pretrain(scenes, &model, &ScheduleConfig::default(), &cfg).unwrap().0
    }

    #[test]
    fn gen_validates_and_suggests_jerk() {
        let art = run_gen(40, &SceneConfig::default(), 5).unwrap();
        assert_eq!(art.scenes.len(), 40);
        assert!(art.jerk_suggestion.is_finite() && art.jerk_suggestion >= 0.0);
        // The suggestion sits at the 70th percentile: at least 30% of
        // scenes peak at or above it and at least 70% at or below it.
        let peaks: Vec<f64> = art
            .scenes
            .iter()
            .map(|s| max_jerk(&s.ego_future_gt.points, s.ego_last_observed(), s.dt()))
            .collect();
        let at_or_below = peaks.iter().filter(|&&p| p <= art.jerk_suggestion).count();
        assert!(at_or_below as f64 / peaks.len() as f64 >= 0.7);
    }

    #[test]
    fn eval_report_is_reproducible() {
        let art = run_gen(12, &SceneConfig::default(), 6).unwrap();
        let ckpt = quick_pretrain(&art.scenes);
        let th = EvalThresholds::crowdnav();
        let a = run_eval(&ckpt.planner, &art.scenes, &th, None, 3).unwrap();
        let b = run_eval(&ckpt.planner, &art.scenes, &th, None, 3).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.detail_csv(), b.detail_csv());
        // A different sampling seed changes the sampled plans.
        let c = run_eval(&ckpt.planner, &art.scenes, &th, None, 4).unwrap();
        assert_ne!(a.detail_csv(), c.detail_csv());
    }

    #[test]
    fn eval_plans_match_eval_report_geometry() {
        let art = run_gen(6, &SceneConfig::default(), 8).unwrap();
        let ckpt = quick_pretrain(&art.scenes);
        let th = EvalThresholds::crowdnav();
        let report = run_eval(&ckpt.planner, &art.scenes, &th, None, 9).unwrap();
        let plans = eval_plans(&ckpt.planner, &art.scenes, None, 9).unwrap();
        let recomputed = compute_metrics(&art.scenes, &plans, &th).unwrap();
        assert_eq!(report.to_csv(), recomputed.to_csv());
    }

    #[test]
    fn finetune_stage_runs() {
        let art = run_gen(10, &SceneConfig::default(), 7).unwrap();
        let ckpt = quick_pretrain(&art.scenes);
        let cfg = FinetuneConfig { iterations: 2, batch_size: 8, ..Default::default() };
        let (tuned, log) = run_finetune(&ckpt, &art.scenes, &cfg).unwrap();
        assert_eq!(log.iterations.len(), 2);
        assert_ne!(tuned.planner.params.fingerprint(), ckpt.planner.params.fingerprint());
    }

    #[test]
    fn sample_stage_guided_and_unguided() {
        let art = run_gen(5, &SceneConfig::default(), 9).unwrap();
        let ckpt = quick_pretrain(&art.scenes);
        let plans = run_sample(&ckpt.planner, &art.scenes[0], 4, None, 1).unwrap();
        assert_eq!(plans.len(), 4);
        // Distinct sample indices produce distinct plans.
        assert_ne!(plans[0].plan_std, plans[1].plan_std);
        let g = GuidanceConfig { scale: 1.0, activation_distance: 0.6 };
        let guided = run_sample(&ckpt.planner, &art.scenes[0], 2, Some(&g), 1).unwrap();
        assert_eq!(guided.len(), 2);
        assert!(run_sample(&ckpt.planner, &art.scenes[0], 0, None, 1).is_err());
    }
}
