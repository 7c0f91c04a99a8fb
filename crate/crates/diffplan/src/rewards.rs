//! Binary navigation rewards and dynamic threshold adaptation.
//!
//! Each reward compares a plan statistic against a threshold epsilon and
//! yields 0 or 1: collision (closest neighbor approach stays beyond
//! epsilon), success (final point reaches the goal disk), discomfort (peak
//! jerk stays below epsilon). Binary rewards go flat when a threshold is
//! badly placed for the current policy: the whole batch scores 0 (or 1) and
//! the policy gradient carries no signal. The adapter re-tunes epsilon on
//! every batch so that roughly half the rollouts score 1, keeping the
//! reward informative throughout fine-tuning.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::scene::Trajectory;
use serde::{Deserialize, Serialize};

/// The reward families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardKind {
    Collision,
    Success,
    Discomfort,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Collision => "collision",
            RewardKind::Success => "success",
            RewardKind::Discomfort => "discomfort",
        }
    }
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collision" => Ok(RewardKind::Collision),
            "success" => Ok(RewardKind::Success),
            "discomfort" => Ok(RewardKind::Discomfort),
            other => Err(Error::InvalidConfig(format!(
                "unknown reward kind {other:?}, expected collision, success, or discomfort"
            ))),
        }
    }
}

/// One weighted reward term with its initial threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub weight: f64,
    pub epsilon_init: f64,
}

impl RewardSpec {
    /// Parse `kind:weight:epsilon`, e.g. `collision:4:0.6`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "reward spec {s:?} must have the form kind:weight:epsilon"
            )));
        }
        let kind: RewardKind = parts[0].parse()?;
        let weight: f64 = parts[1]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad reward weight in {s:?}")))?;
        let epsilon_init: f64 = parts[2]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad reward epsilon in {s:?}")))?;
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidConfig(format!("reward weight must be >= 0 in {s:?}")));
        }
        if !(epsilon_init.is_finite() && epsilon_init > 0.0) {
            return Err(Error::InvalidConfig(format!("reward epsilon must be > 0 in {s:?}")));
        }
        Ok(RewardSpec { kind, weight, epsilon_init })
    }
}

/// Smallest distance between the plan and any neighbor at matching steps.
pub fn min_neighbor_distance(plan: &[Vec2], neighbors: &[Trajectory]) -> f64 {
    let mut min = f64::INFINITY;
    for traj in neighbors {
        for (p, q) in plan.iter().zip(&traj.points) {
            min = min.min(p.distance(*q));
        }
    }
    min
}

/// 1 if every matching-step ego-neighbor distance strictly exceeds
/// `epsilon`, else 0. With no neighbors the plan trivially scores 1.
pub fn reward_collision(plan: &[Vec2], neighbors: &[Trajectory], epsilon: f64) -> f64 {
    if min_neighbor_distance(plan, neighbors) > epsilon {
        1.0
    } else {
        0.0
    }
}

/// 1 if the plan's final point lies within `epsilon` of the goal, else 0.
pub fn reward_success(plan: &[Vec2], goal: Vec2, epsilon: f64) -> f64 {
    match plan.last() {
        Some(last) if last.distance(goal) <= epsilon => 1.0,
        _ => 0.0,
    }
}

/// Jerk magnitudes from third forward differences over
/// `[prepend, plan...]`: `|p_{i+3} - 3 p_{i+2} + 3 p_{i+1} - p_i| / dt^3`.
/// Prepending the last observed position makes the initial acceleration
/// change visible. Fewer than four points yield an empty profile.
pub fn jerk_profile(plan: &[Vec2], prepend: Vec2, dt: f64) -> Vec<f64> {
    assert!(dt > 0.0, "dt must be positive");
    let mut pts = Vec::with_capacity(plan.len() + 1);
    pts.push(prepend);
    pts.extend_from_slice(plan);
    if pts.len() < 4 {
        return Vec::new();
    }
    let inv = 1.0 / (dt * dt * dt);
    pts.windows(4)
        .map(|w| ((w[3] - w[2] * 3.0 + w[1] * 3.0 - w[0]) * inv).norm())
        .collect()
}

/// Largest jerk magnitude along the plan; 0 for profiles too short to measure.
pub fn max_jerk(plan: &[Vec2], prepend: Vec2, dt: f64) -> f64 {
    jerk_profile(plan, prepend, dt).into_iter().fold(0.0, f64::max)
}

/// 1 if the peak jerk stays at or below `epsilon`, else 0.
pub fn reward_discomfort(plan: &[Vec2], prepend: Vec2, dt: f64, epsilon: f64) -> f64 {
    if max_jerk(plan, prepend, dt) <= epsilon {
        1.0
    } else {
        0.0
    }
}

/// Weighted sum of per-kind rewards: `R = sum_m weight_m r_m`.
pub fn combine_rewards(specs: &[RewardSpec], raw: &[f64]) -> f64 {
    assert_eq!(specs.len(), raw.len(), "reward count mismatch");
    specs.iter().zip(raw).map(|(s, r)| s.weight * r).sum()
}

/// Settings for the threshold adapter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Base adjustment rate; iteration j uses `alpha0 / j`.
    pub alpha0: f64,
    /// Adjustment budget J.
    pub max_iters: usize,
    /// Convergence tolerance as a fraction of the batch size.
    pub delta_frac: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { alpha0: 0.5, max_iters: 20, delta_frac: 0.1 }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 < 1.0) {
            return Err(Error::InvalidConfig("threshold alpha0 must be in (0, 1)".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("threshold max_iters must be >= 1".into()));
        }
        if self.delta_frac < 0.0 {
            return Err(Error::InvalidConfig("threshold delta_frac must be >= 0".into()));
        }
        Ok(())
    }
}

/// One adapter iteration as observed at its top: the threshold in force and
/// the batch reward sum it produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTraceStep {
    pub j: usize,
    pub epsilon: f64,
    pub sum_rewards: f64,
}

/// Result of adapting one reward's threshold on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdOutcome {
    /// The adapted threshold.
    pub epsilon: f64,
    /// Rewards of the batch under the adapted threshold.
    pub rewards: Vec<f64>,
    /// Loop-top observations, one per executed iteration.
    pub trace: Vec<ThresholdTraceStep>,
    /// Number of adjustments actually applied.
    pub adjustments: usize,
    /// Whether the loop exited through the tolerance check.
    pub converged: bool,
}

/// Adapt a reward threshold so the batch reward sum approaches half the
/// batch size.
///
/// Starting from `epsilon_init`, each iteration j first scores the batch at
/// the current epsilon and stops if the sum is within delta of B/2. It then
/// proposes growing epsilon by the factor `1 + alpha0/j`; if that proposal
/// scores strictly farther from B/2 than the current epsilon, the direction
/// is flipped to shrinking (`1 - alpha0/j`) without re-checking. Ties keep
/// the grown proposal. The scoring function must return one 0/1 value per
/// batch element and be deterministic in epsilon.
pub fn dynamic_threshold<F>(
    rewards_at: F,
    epsilon_init: f64,
    config: &ThresholdConfig,
) -> Result<ThresholdOutcome>
where
    F: Fn(f64) -> Vec<f64>,
{
    config.validate()?;
    if !(epsilon_init > 0.0 && epsilon_init.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "threshold adaptation needs epsilon_init > 0, got {epsilon_init}"
        )));
    }

    let check = |r: &[f64]| -> Result<f64> {
        if r.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidConfig("threshold adaptation requires binary rewards".into()));
        }
        Ok(r.iter().sum())
    };

    let mut epsilon = epsilon_init;
    let first = rewards_at(epsilon);
    let batch_size = first.len();
    if batch_size == 0 {
        return Err(Error::InvalidConfig("threshold adaptation needs a non-empty batch".into()));
    }
    let target = batch_size as f64 / 2.0;
    let delta = batch_size as f64 * config.delta_frac;

    let mut rewards = first;
    let mut trace = Vec::new();
    let mut adjustments = 0;
    let mut converged = false;

    for j in 1..=config.max_iters {
        let sum = check(&rewards)?;
        trace.push(ThresholdTraceStep { j, epsilon, sum_rewards: sum });
        let distance = (sum - target).abs();
        if distance <= delta {
            converged = true;
            break;
        }
        let alpha = config.alpha0 / j as f64;
        let grown = epsilon + alpha * epsilon;
        let grown_rewards = rewards_at(grown);
        if grown_rewards.len() != batch_size {
            return Err(Error::ShapeMismatch("reward batch size changed during adaptation".into()));
        }
        let grown_distance = (check(&grown_rewards)? - target).abs();
        if grown_distance > distance {
            epsilon -= alpha * epsilon;
            rewards = rewards_at(epsilon);
            if rewards.len() != batch_size {
                return Err(Error::ShapeMismatch("reward batch size changed during adaptation".into()));
            }
            check(&rewards)?;
        } else {
            epsilon = grown;
            rewards = grown_rewards;
        }
        adjustments += 1;
    }

    Ok(ThresholdOutcome { epsilon, rewards, trace, adjustments, converged })
}
