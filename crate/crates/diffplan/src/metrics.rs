//! Plan evaluation against ground truth.
//!
//! Scoring here is deliberately separate from the training rewards: a
//! collision at evaluation time is measured against the *ground-truth*
//! neighbor futures, while the training reward can only see forecasts. The
//! two must never share inputs, or evaluation would inherit the
//! forecaster's blind spots.

use crate::error::{Error, Result};
use crate::rewards::{max_jerk, min_neighbor_distance};
use crate::scene::{Scene, Trajectory};
use serde::{Deserialize, Serialize};

/// Distance thresholds used when scoring plans.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    /// A scene counts as a collision if the ego comes within this distance
    /// of any ground-truth neighbor position, meters.
    pub collision_distance: f64,
    /// A scene counts as a success if the plan's final point lies within
    /// this distance of the goal, meters.
    pub success_distance: f64,
    /// A scene counts as uncomfortable if the plan's peak jerk exceeds
    /// this, m/s^3.
    pub jerk_limit: f64,
}

impl EvalThresholds {
    /// Thresholds for the dense simulated-crowd setting.
    pub fn crowdnav() -> Self {
        EvalThresholds { collision_distance: 0.6, success_distance: 0.2, jerk_limit: 10.0 }
    }

    /// Thresholds in the style of sparse real-pedestrian recordings.
    pub fn ethucy() -> Self {
        EvalThresholds { collision_distance: 0.2, success_distance: 0.5, jerk_limit: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.collision_distance > 0.0 && self.success_distance > 0.0 && self.jerk_limit > 0.0) {
            return Err(Error::InvalidConfig("evaluation thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Scores for a single plan in a single scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: u64,
    pub collided: bool,
    pub succeeded: bool,
    /// Mean pointwise distance to the ground-truth ego future, meters.
    pub ade: f64,
    /// Distance between final points, meters.
    pub fde: f64,
    /// Peak jerk with the last observed position prepended, m/s^3.
    pub max_jerk: f64,
}

/// Aggregated scores over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub collision_rate: f64,
    pub success_rate: f64,
    pub discomfort_rate: f64,
    pub ade: f64,
    pub fde: f64,
    pub mean_max_jerk: f64,
    pub n_scenes: usize,
    pub thresholds: EvalThresholds,
    pub per_scene: Vec<SceneMetrics>,
}

/// Score one plan against one scene's ground truth.
pub fn evaluate_plan(scene: &Scene, plan: &Trajectory, thresholds: &EvalThresholds) -> Result<SceneMetrics> {
    thresholds.validate()?;
    if plan.len() != scene.t_fut() {
        return Err(Error::ShapeMismatch(format!(
            "plan has {} points, scene future has {}",
            plan.len(),
            scene.t_fut()
        )));
    }

    let min_dist = min_neighbor_distance(&plan.points, &scene.neighbor_futures_gt);
    let collided = min_dist <= thresholds.collision_distance;
    let succeeded = plan.last().distance(scene.ego_goal) <= thresholds.success_distance;

    let gt = &scene.ego_future_gt.points;
    let ade = plan
        .points
        .iter()
        .zip(gt)
        .map(|(p, q)| p.distance(*q))
        .sum::<f64>()
        / plan.len() as f64;
    let fde = plan.last().distance(scene.ego_future_gt.last());
    let peak = max_jerk(&plan.points, scene.ego_last_observed(), plan.dt);

    Ok(SceneMetrics {
        scene_id: scene.scene_id,
        collided,
        succeeded,
        ade,
        fde,
        max_jerk: peak,
    })
}

/// Score a matched list of plans against their scenes and aggregate.
pub fn compute_metrics(scenes: &[Scene], plans: &[Trajectory], thresholds: &EvalThresholds) -> Result<MetricsReport> {
    if scenes.len() != plans.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scenes but {} plans",
            scenes.len(),
            plans.len()
        )));
    }
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one scene".into()));
    }

    let per_scene: Vec<SceneMetrics> = scenes
        .iter()
        .zip(plans)
        .map(|(s, p)| evaluate_plan(s, p, thresholds))
        .collect::<Result<_>>()?;

    let n = per_scene.len() as f64;
    let rate = |pred: fn(&SceneMetrics) -> bool| per_scene.iter().filter(|m| pred(m)).count() as f64 / n;
    Ok(MetricsReport {
        collision_rate: rate(|m| m.collided),
        success_rate: rate(|m| m.succeeded),
        discomfort_rate: per_scene.iter().filter(|m| m.max_jerk > thresholds.jerk_limit).count() as f64 / n,
        ade: per_scene.iter().map(|m| m.ade).sum::<f64>() / n,
        fde: per_scene.iter().map(|m| m.fde).sum::<f64>() / n,
        mean_max_jerk: per_scene.iter().map(|m| m.max_jerk).sum::<f64>() / n,
        n_scenes: per_scene.len(),
        thresholds: *thresholds,
        per_scene,
    })
}

impl MetricsReport {
    /// Aggregate rows as `metric,value,threshold,n_scenes`. Fixed six-digit
    /// formatting keeps identical runs byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,threshold,n_scenes\n");
        let mut row = |name: &str, value: f64, threshold: Option<f64>| {
            let t = threshold.map(|t| format!("{t:.6}")).unwrap_or_default();
            out.push_str(&format!("{name},{value:.6},{t},{}\n", self.n_scenes));
        };
        row("collision_rate", self.collision_rate, Some(self.thresholds.collision_distance));
        row("success_rate", self.success_rate, Some(self.thresholds.success_distance));
        row("discomfort_rate", self.discomfort_rate, Some(self.thresholds.jerk_limit));
        row("ade", self.ade, None);
        row("fde", self.fde, None);
        row("mean_max_jerk", self.mean_max_jerk, None);
        out
    }

    /// Per-scene rows for debugging and plotting.
    pub fn detail_csv(&self) -> String {
        let mut out = String::from("scene_id,collided,succeeded,ade,fde,max_jerk\n");
        for m in &self.per_scene {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                m.scene_id, m.collided as u8, m.succeeded as u8, m.ade, m.fde, m.max_jerk
            ));
        }
        out
    }
}

/// Relative change of one aggregate metric between two reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricDelta {
    pub metric: String,
    pub before: f64,
    pub after: f64,
    /// `(after - before) / before`; `None` when `before` is zero.
    pub relative: Option<f64>,
}

/// Compare aggregate metrics of two reports, `before` vs `after`.
pub fn compare_reports(before: &MetricsReport, after: &MetricsReport) -> Vec<MetricDelta> {
    let pairs = [
        ("collision_rate", before.collision_rate, after.collision_rate),
        ("success_rate", before.success_rate, after.success_rate),
        ("discomfort_rate", before.discomfort_rate, after.discomfort_rate),
        ("ade", before.ade, after.ade),
        ("fde", before.fde, after.fde),
        ("mean_max_jerk", before.mean_max_jerk, after.mean_max_jerk),
    ];
    pairs
        .into_iter()
        .map(|(name, b, a)| MetricDelta {
            metric: name.to_string(),
            before: b,
            after: a,
            relative: if b != 0.0 { Some((a - b) / b) } else { None },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use crate::scene::Trajectory;

    fn traj(points: Vec<Vec2>, dt: f64) -> Trajectory {
        Trajectory { points, dt }
    }

    /// A hand-built scene: ego walks +x, one neighbor's history walks away
    /// (+y) but its ground-truth future cuts back across the ego's path.
    /// A constant-velocity forecast from the history would never predict
    /// the crossing, so any collision flagged here proves the evaluator
    /// looks at ground truth.
    fn crossing_scene() -> Scene {
        let dt = 0.4;
        let ego_hist: Vec<Vec2> = (0..4).map(|i| Vec2::new(i as f64 * 0.4 - 1.2, 0.0)).collect();
        let ego_fut: Vec<Vec2> = (1..=4).map(|i| Vec2::new(i as f64 * 0.4, 0.0)).collect();
        let n_hist: Vec<Vec2> = (0..4).map(|i| Vec2::new(1.0, i as f64 * 0.5)).collect();
        // Future dives back down through (1.0, 0.05) at step 2.
        let n_fut = vec![
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 0.5),
            Vec2::new(1.0, 0.05),
            Vec2::new(1.0, -0.5),
        ];
        Scene {
            scene_id: 77,
            ego_history: traj(ego_hist, dt),
            neighbor_histories: vec![traj(n_hist, dt)],
            ego_goal: Vec2::new(2.0, 0.0),
            ego_future_gt: traj(ego_fut, dt),
            neighbor_futures_gt: vec![traj(n_fut, dt)],
        }
    }

    #[test]
    fn profile_thresholds() {
        let c = EvalThresholds::crowdnav();
        assert_eq!((c.collision_distance, c.success_distance), (0.6, 0.2));
        let e = EvalThresholds::ethucy();
        assert_eq!((e.collision_distance, e.success_distance), (0.2, 0.5));
    }

    #[test]
    fn perfect_plan_scores_zero_error() {
        let scene = crossing_scene();
        let plan = scene.ego_future_gt.clone();
        let m = evaluate_plan(&scene, &plan, &EvalThresholds::crowdnav()).unwrap();
        assert_eq!(m.ade, 0.0);
        assert_eq!(m.fde, 0.0);
        assert_eq!(m.scene_id, 77);
        // Goal at (2.0, 0), final point (1.6, 0): 0.4 away, outside the
        // 0.2 success disk.
        assert!(!m.succeeded);
        assert!(m.succeeded == false && (plan.last().distance(scene.ego_goal) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn collision_judged_against_ground_truth_not_forecast() {
        let scene = crossing_scene();
        let plan = scene.ego_future_gt.clone();
        // At step 2 the ego is at (1.2, 0) and the neighbor's ground-truth
        // future is at (1.0, 0.05): distance ~0.206, inside 0.6.
        let m = evaluate_plan(&scene, &plan, &EvalThresholds::crowdnav()).unwrap();
        assert!(m.collided);
        // A forecast extrapolated from the receding history would put the
        // neighbor far up the +y axis instead.
        let forecast = crate::forecast::forecast_constant_velocity(&scene, 4).unwrap();
        let min_forecast = min_neighbor_distance(&plan.points, &forecast.neighbor_futures);
        assert!(min_forecast > 0.6, "forecast distance {min_forecast}");
    }

    #[test]
    fn ade_fde_of_offset_plan() {
        let scene = crossing_scene();
        let offset = Vec2::new(0.0, 0.3);
        let plan = traj(scene.ego_future_gt.points.iter().map(|&p| p + offset).collect(), 0.4);
        let m = evaluate_plan(&scene, &plan, &EvalThresholds::crowdnav()).unwrap();
        assert!((m.ade - 0.3).abs() < 1e-12);
        assert!((m.fde - 0.3).abs() < 1e-12);
    }

    #[test]
    fn success_threshold_profile_dependent() {
        let scene = crossing_scene();
        // End exactly 0.25 from the goal.
        let mut pts = scene.ego_future_gt.points.clone();
        *pts.last_mut().unwrap() = Vec2::new(1.75, 0.0);
        let plan = traj(pts, 0.4);
        let crowd = evaluate_plan(&scene, &plan, &EvalThresholds::crowdnav()).unwrap();
        assert!(!crowd.succeeded); // 0.25 > 0.2
        let eth = evaluate_plan(&scene, &plan, &EvalThresholds::ethucy()).unwrap();
        assert!(eth.succeeded); // 0.25 <= 0.5
    }

    #[test]
    fn aggregate_rates() {
        let scene = crossing_scene();
        let colliding = scene.ego_future_gt.clone();
        let safe = traj(
            scene.ego_future_gt.points.iter().map(|&p| p + Vec2::new(0.0, -2.0)).collect(),
            0.4,
        );
        let scenes = vec![scene.clone(), scene.clone()];
        let report = compute_metrics(&scenes, &[colliding, safe], &EvalThresholds::crowdnav()).unwrap();
        assert_eq!(report.n_scenes, 2);
        assert_eq!(report.collision_rate, 0.5);
        assert_eq!(report.success_rate, 0.0);
        assert_eq!(report.per_scene.len(), 2);
        assert!((report.ade - (0.0 + 2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatches_rejected() {
        let scene = crossing_scene();
        let short = traj(vec![Vec2::ZERO; 3], 0.4);
        assert!(evaluate_plan(&scene, &short, &EvalThresholds::crowdnav()).is_err());
        assert!(compute_metrics(&[scene], &[], &EvalThresholds::crowdnav()).is_err());
        assert!(compute_metrics(&[], &[], &EvalThresholds::crowdnav()).is_err());
    }

    #[test]
    fn csv_is_deterministic_and_complete() {
        let scene = crossing_scene();
        let plan = scene.ego_future_gt.clone();
        let report = compute_metrics(&[scene], &[plan], &EvalThresholds::crowdnav()).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value,threshold,n_scenes\n"));
        assert!(csv.contains("collision_rate,1.000000,0.600000,1\n"));
        assert!(csv.contains("success_rate,0.000000,0.200000,1\n"));
        assert!(csv.contains("ade,0.000000,,1\n"));
        assert_eq!(csv, report.to_csv());
        let detail = report.detail_csv();
        assert!(detail.starts_with("scene_id,collided,succeeded,ade,fde,max_jerk\n"));
        assert!(detail.contains("77,1,0,0.000000,0.000000,"));
    }

    #[test]
    fn report_comparison_relative_changes() {
        let scene = crossing_scene();
        let plan = scene.ego_future_gt.clone();
        let mut before = compute_metrics(&[scene], &[plan], &EvalThresholds::crowdnav()).unwrap();
        let mut after = before.clone();
        // Published-style headline numbers: collision 0.0628 -> 0.0150,
        // success 0.3540 -> 0.4931.
        before.collision_rate = 0.0628;
        after.collision_rate = 0.0150;
        before.success_rate = 0.3540;
        after.success_rate = 0.4931;
        let deltas = compare_reports(&before, &after);
        let col = deltas.iter().find(|d| d.metric == "collision_rate").unwrap();
        assert!((col.relative.unwrap() - (0.0150 - 0.0628) / 0.0628).abs() < 1e-12);
        assert!(col.relative.unwrap() < -0.70, "collision should drop by more than 70%");
        let suc = deltas.iter().find(|d| d.metric == "success_rate").unwrap();
        assert!((suc.relative.unwrap() - (0.4931 - 0.3540) / 0.3540).abs() < 1e-12);
        assert!(suc.relative.unwrap() > 0.39);
        // Zero baseline yields no relative figure.
        before.success_rate = 0.0;
        let deltas = compare_reports(&before, &after);
        assert!(deltas.iter().find(|d| d.metric == "success_rate").unwrap().relative.is_none());
    }
}
