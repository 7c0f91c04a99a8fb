//! Synthetic 2D crowd-navigation scenes.
//!
//! A scene holds observed histories for one ego agent and its neighbors,
//! the ego goal, and ground-truth futures for everyone. Scenes come from a
//! circle-crossing generator: each agent starts on the arena circle, walks
//! at constant speed toward the diametrically opposite point under small
//! Gaussian heading noise, and stops on arrival. The observation window is
//! cut at a random phase of the ego's crossing so goals are sometimes near
//! (reachable within the future horizon) and sometimes far.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Schema tag carried by the scenario file header.
pub const SCENES_SCHEMA: &str = "scenes-v1";

/// An ordered sequence of 2D positions sampled every `dt` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Vec2>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(points: Vec<Vec2>, dt: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidScene("trajectory must have length >= 1".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidScene(format!("trajectory dt must be positive, got {dt}")));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidScene("trajectory contains non-finite coordinates".into()));
        }
        Ok(Trajectory { points, dt })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("trajectory is non-empty")
    }

    pub fn first(&self) -> Vec2 {
        self.points[0]
    }
}

/// One planning instance: ego + neighbor histories, ego goal, ground-truth futures.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub ego_history: Trajectory,
    pub neighbor_histories: Vec<Trajectory>,
    pub ego_goal: Vec2,
    pub ego_future_gt: Trajectory,
    pub neighbor_futures_gt: Vec<Trajectory>,
}

impl Scene {
    pub fn dt(&self) -> f64 {
        self.ego_history.dt
    }

    pub fn t_obs(&self) -> usize {
        self.ego_history.len()
    }

    pub fn t_fut(&self) -> usize {
        self.ego_future_gt.len()
    }

    pub fn n_neighbors(&self) -> usize {
        self.neighbor_histories.len()
    }

    /// Last observed ego position (the planning origin).
    pub fn ego_last_observed(&self) -> Vec2 {
        self.ego_history.last()
    }
}

/// Settings for the circle-crossing generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Total number of agents N (one ego plus N-1 neighbors).
    pub n_agents: usize,
    /// Observed history length, in steps.
    pub t_obs: usize,
    /// Future horizon length, in steps.
    pub t_fut: usize,
    /// Timestep duration in seconds.
    pub dt: f64,
    /// Radius of the spawn circle in meters.
    pub arena_radius: f64,
    /// Per-agent speed drawn uniformly from this range, m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Std of the per-step Gaussian heading noise, radians.
    pub heading_noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_agents: 6,
            t_obs: 8,
            t_fut: 8,
            dt: 0.4,
            arena_radius: 4.0,
            speed_min: 0.5,
            speed_max: 1.5,
            heading_noise_std: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 agents (one ego, one neighbor), got {}",
                self.n_agents
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if self.t_obs < 2 {
            return Err(Error::InvalidConfig("t_obs must be >= 2".into()));
        }
        if self.t_fut < 1 {
            return Err(Error::InvalidConfig("t_fut must be >= 1".into()));
        }
        if !(self.arena_radius > 0.0) {
            return Err(Error::InvalidConfig("arena_radius must be positive".into()));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::InvalidConfig(format!(
                "speed range [{}, {}] must satisfy 0 < min <= max",
                self.speed_min, self.speed_max
            )));
        }
        if self.heading_noise_std < 0.0 {
            return Err(Error::InvalidConfig("heading_noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Minimum spawn separation between agents, meters. Kept above the
/// personal-space radius so nobody starts already shoved sideways.
const SPAWN_SEPARATION: f64 = 1.5;
/// Half-width of the uniform angle perturbation applied to the antipodal
/// goal, radians.
const GOAL_SPREAD: f64 = 0.7;
/// Hard cap on episode simulation length, steps.
const MAX_EPISODE_STEPS: usize = 400;
/// Social-force repulsion, in units of the unit goal-pull vector.
const REPULSION_STRENGTH: f64 = 4.0;
/// Exponential decay length of the repulsion beyond personal space, meters.
const REPULSION_RANGE: f64 = 0.7;
/// Distance at which repulsion reaches full strength, meters.
const PERSONAL_SPACE: f64 = 1.0;
/// Ceiling on the summed repulsion, kept below the unit goal pull so a
/// squeeze deflects the walker instead of ejecting it from the arena.
const REPULSION_CAP: f64 = 0.85;

struct AgentPlan {
    start: Vec2,
    goal: Vec2,
    speed: f64,
}

/// Simulate every agent jointly; returns `n_steps + 1` positions per agent.
///
/// Each step an agent heads toward its goal, deflected by exponential
/// repulsion from every other agent's current position (the social-force
/// convention: crossing pedestrians yield around each other instead of
/// walking through). Heading noise is Gaussian; speed stays constant. When
/// the goal is within one step it is snapped to exactly and held afterwards,
/// drawing no further noise. All moves within a step are decided from the
/// previous step's positions, so agent order does not matter.
fn simulate_crowd(
    plans: &[AgentPlan],
    n_steps: usize,
    dt: f64,
    noise_std: f64,
    rngs: &mut [StreamRng],
) -> Vec<Vec<Vec2>> {
    let n = plans.len();
    let mut paths: Vec<Vec<Vec2>> = plans
        .iter()
        .map(|p| {
            let mut path = Vec::with_capacity(n_steps + 1);
            path.push(p.start);
            path
        })
        .collect();

    let mut current = vec![Vec2::ZERO; n];
    for t in 0..n_steps {
        for (cur, path) in current.iter_mut().zip(&paths) {
            *cur = path[t];
        }
        for a in 0..n {
            let plan = &plans[a];
            let cur = current[a];
            let step_len = plan.speed * dt;
            let to_goal = plan.goal - cur;
            let dist = to_goal.norm();
            let next = if dist <= step_len {
                plan.goal
            } else {
                let mut repulsion = Vec2::ZERO;
                for (b, other) in current.iter().enumerate() {
                    if b == a {
                        continue;
                    }
                    let away = cur - *other;
                    let d = away.norm();
                    if d > 1e-9 {
                        let push =
                            REPULSION_STRENGTH * (-(d - PERSONAL_SPACE) / REPULSION_RANGE).exp();
                        repulsion = repulsion + away * (push / d);
                    }
                }
                let mag = repulsion.norm();
                if mag > REPULSION_CAP {
                    repulsion = repulsion * (REPULSION_CAP / mag);
                }
                let desired = to_goal * (1.0 / dist) + repulsion;
                let heading = desired.heading() + noise_std * rngs[a].normal();
                let (s, c) = heading.sin_cos();
                cur + Vec2::new(c, s) * step_len
            };
            paths[a].push(next);
        }
    }
    paths
}

/// First step index at which the agent sits exactly on its goal, or `None`.
fn arrival_step(positions: &[Vec2], goal: Vec2) -> Option<usize> {
    positions.iter().position(|&p| p == goal)
}

/// Generate `count` circle-crossing scenes. Identical `(count, config, seed)`
/// triples produce bit-identical scene lists.
pub fn generate_scenes(count: usize, config: &SceneConfig, seed: u64) -> Result<Vec<Scene>> {
    if count < 1 {
        return Err(Error::InvalidConfig("scene count must be >= 1".into()));
    }
    config.validate()?;

    let root = StreamRng::seed(seed);
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        scenes.push(generate_one(i as u64, config, &root.stream_indexed("scene", i as u64)));
    }
    Ok(scenes)
}

fn generate_one(scene_id: u64, config: &SceneConfig, scene_rng: &StreamRng) -> Scene {
    let n = config.n_agents;
    let window = config.t_obs + config.t_fut;

    // Spawn positions on the circle, resampled until separated. Goals sit
    // near the antipode with a perturbed angle, kept clear of every other
    // spawn and goal: exact antipodes would funnel all crossings through
    // the arena center, and a goal on top of another landmark parks an
    // arrived walker in someone else's lane.
    let mut spawn_rng = scene_rng.stream("spawn");
    let mut plans: Vec<AgentPlan> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut angle = 0.0;
        let mut start = Vec2::ZERO;
        for attempt in 0..100 {
            angle = spawn_rng.uniform_range(0.0, std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            start = Vec2::new(c, s) * config.arena_radius;
            let separated = plans.iter().all(|p| p.start.distance(start) >= SPAWN_SEPARATION);
            if separated || attempt == 99 {
                break;
            }
        }
        let mut goal = -start;
        for attempt in 0..100 {
            let goal_angle =
                angle + std::f64::consts::PI + spawn_rng.uniform_range(-GOAL_SPREAD, GOAL_SPREAD);
            let (s, c) = goal_angle.sin_cos();
            goal = Vec2::new(c, s) * config.arena_radius;
            let clear = plans
                .iter()
                .flat_map(|p| [p.start, p.goal])
                .chain([start])
                .all(|q| q.distance(goal) >= SPAWN_SEPARATION);
            if clear || attempt == 99 {
                break;
            }
        }
        let speed = spawn_rng.uniform_range(config.speed_min, config.speed_max);
        plans.push(AgentPlan { start, goal, speed });
    }

    // One joint episode long enough for any window phase over the ego's crossing.
    let mut walk_rngs: Vec<StreamRng> =
        (0..n).map(|a| scene_rng.stream_indexed("walk", a as u64)).collect();
    let paths = simulate_crowd(
        &plans,
        MAX_EPISODE_STEPS + window,
        config.dt,
        config.heading_noise_std,
        &mut walk_rngs,
    );
    let arrival = arrival_step(&paths[0], plans[0].goal).unwrap_or(MAX_EPISODE_STEPS);

    // Window offset uniform over the ego's crossing; the window itself always fits.
    let offset = scene_rng.stream("window").uniform_usize(arrival.max(1));

    let trajectories: Vec<Vec<Vec2>> =
        paths.iter().map(|p| p[offset..offset + window].to_vec()).collect();

    let slice_traj = |agent: usize, range: std::ops::Range<usize>| -> Trajectory {
        Trajectory {
            points: trajectories[agent][range].to_vec(),
            dt: config.dt,
        }
    };

    Scene {
        scene_id,
        ego_history: slice_traj(0, 0..config.t_obs),
        neighbor_histories: (1..n).map(|a| slice_traj(a, 0..config.t_obs)).collect(),
        ego_goal: plans[0].goal,
        ego_future_gt: slice_traj(0, config.t_obs..window),
        neighbor_futures_gt: (1..n).map(|a| slice_traj(a, config.t_obs..window)).collect(),
    }
}

/// Outcome of checking a scene against its structural invariants.
#[derive(Clone, Debug, Default)]
pub struct ValidationVerdict {
    pub violations: Vec<String>,
}

impl ValidationVerdict {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a scene's invariants; the verdict lists every violated one.
pub fn validate_scene(scene: &Scene, config: &SceneConfig) -> ValidationVerdict {
    let mut v = ValidationVerdict::default();
    let t_obs = scene.ego_history.len();
    let t_fut = scene.ego_future_gt.len();
    let dt = scene.ego_history.dt;

    let mut all_finite = scene.ego_history.points.iter().all(|p| p.is_finite())
        && scene.ego_future_gt.points.iter().all(|p| p.is_finite())
        && scene.ego_goal.is_finite();
    for t in scene.neighbor_histories.iter().chain(&scene.neighbor_futures_gt) {
        all_finite &= t.points.iter().all(|p| p.is_finite());
    }
    if !all_finite {
        v.violations.push("all coordinates finite".into());
    }

    let histories_ok = scene
        .neighbor_histories
        .iter()
        .all(|t| t.len() == t_obs && t.dt == dt);
    if !histories_ok {
        v.violations.push("all histories share dt and length T_obs".into());
    }

    let futures_ok = scene.ego_future_gt.dt == dt
        && scene
            .neighbor_futures_gt
            .iter()
            .all(|t| t.len() == t_fut && t.dt == dt);
    if !futures_ok {
        v.violations.push("all futures share dt and length T_fut".into());
    }

    if scene.neighbor_histories.len() != scene.neighbor_futures_gt.len() {
        v.violations.push("every neighbor has both a history and a future".into());
    }

    // Yielding around others can bow a path well past the rim; capping the
    // repulsion below the goal pull bounds the excursion, so anything past
    // this margin is a runaway coordinate, not an evasion.
    let last = scene.ego_future_gt.last();
    if !(last.norm() <= config.arena_radius + 1.5) {
        v.violations.push("last point of ego_future_gt lies within the arena bounds".into());
    }

    v
}

/// Rigid transform mapping ego-frame coordinates back to world coordinates.
///
/// `apply` rotates by `rotation` then translates; `to_frame` is the exact
/// inverse. Round trips reproduce inputs to well under 1e-9 m.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub translation: Vec2,
    pub rotation: f64,
}

impl FrameTransform {
    /// Ego frame -> world.
    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotate(self.rotation) + self.translation
    }

    /// World -> ego frame.
    pub fn to_frame(&self, p: Vec2) -> Vec2 {
        (p - self.translation).rotate(-self.rotation)
    }
}

/// Re-express a scene in the ego-centered frame: the ego's last observed
/// position maps to the origin and its last observed velocity direction to
/// the +x axis. Returns the transform that maps ego-frame points back to
/// world coordinates. A zero last-step velocity falls back to the identity
/// rotation.
pub fn normalize_frame(scene: &Scene) -> Result<(Scene, FrameTransform)> {
    if scene.ego_history.len() < 2 {
        return Err(Error::InvalidScene("normalize_frame needs an ego history with >= 2 points".into()));
    }
    let pts = &scene.ego_history.points;
    let origin = pts[pts.len() - 1];
    let velocity = pts[pts.len() - 1] - pts[pts.len() - 2];
    let rotation = if velocity.norm() < 1e-12 { 0.0 } else { velocity.heading() };
    let transform = FrameTransform { translation: origin, rotation };

    let map_traj = |t: &Trajectory| Trajectory {
        points: t.points.iter().map(|&p| transform.to_frame(p)).collect(),
        dt: t.dt,
    };

    let normalized = Scene {
        scene_id: scene.scene_id,
        ego_history: map_traj(&scene.ego_history),
        neighbor_histories: scene.neighbor_histories.iter().map(&map_traj).collect(),
        ego_goal: transform.to_frame(scene.ego_goal),
        ego_future_gt: map_traj(&scene.ego_future_gt),
        neighbor_futures_gt: scene.neighbor_futures_gt.iter().map(&map_traj).collect(),
    };
    Ok((normalized, transform))
}

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    schema: String,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    dt: f64,
    ego_history: Vec<Vec2>,
    neighbor_histories: Vec<Vec<Vec2>>,
    ego_goal: Vec2,
    ego_future_gt: Vec<Vec2>,
    neighbor_futures_gt: Vec<Vec<Vec2>>,
}

impl SceneRecord {
    fn from_scene(s: &Scene) -> Self {
        SceneRecord {
            scene_id: s.scene_id,
            dt: s.dt(),
            ego_history: s.ego_history.points.clone(),
            neighbor_histories: s.neighbor_histories.iter().map(|t| t.points.clone()).collect(),
            ego_goal: s.ego_goal,
            ego_future_gt: s.ego_future_gt.points.clone(),
            neighbor_futures_gt: s.neighbor_futures_gt.iter().map(|t| t.points.clone()).collect(),
        }
    }

    fn into_scene(self) -> Result<Scene> {
        let dt = self.dt;
        Ok(Scene {
            scene_id: self.scene_id,
            ego_history: Trajectory::new(self.ego_history, dt)?,
            neighbor_histories: self
                .neighbor_histories
                .into_iter()
                .map(|p| Trajectory::new(p, dt))
                .collect::<Result<_>>()?,
            ego_goal: self.ego_goal,
            ego_future_gt: Trajectory::new(self.ego_future_gt, dt)?,
            neighbor_futures_gt: self
                .neighbor_futures_gt
                .into_iter()
                .map(|p| Trajectory::new(p, dt))
                .collect::<Result<_>>()?,
        })
    }
}

/// Write scenes in the line-delimited `scenes-v1` format.
pub fn write_scenes<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    let header = SceneHeader { schema: SCENES_SCHEMA.to_string() };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for scene in scenes {
        serde_json::to_writer(&mut out, &SceneRecord::from_scene(scene))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_scenes_file<P: AsRef<Path>>(path: P, scenes: &[Scene]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_scenes(std::io::BufWriter::new(file), scenes)
}

/// Read scenes from the line-delimited `scenes-v1` format.
pub fn read_scenes<R: std::io::Read>(input: R) -> Result<Vec<Scene>> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("scenario file is empty".into()))??;
    let header: SceneHeader = serde_json::from_str(&header_line)?;
    if header.schema != SCENES_SCHEMA {
        return Err(Error::Format(format!(
            "unsupported scenario schema {:?}, expected {SCENES_SCHEMA:?}",
            header.schema
        )));
    }
    let mut scenes = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line)?;
        scenes.push(record.into_scene()?);
    }
    Ok(scenes)
}

pub fn read_scenes_file<P: AsRef<Path>>(path: P) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path)?;
    read_scenes(file)
}
