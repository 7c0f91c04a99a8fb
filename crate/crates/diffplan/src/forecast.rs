//! Neighbor motion forecasts.
//!
//! The planner conditions on *predicted* neighbor futures, not ground truth.
//! The constant-velocity forecaster extrapolates each neighbor from its mean
//! observed velocity. Evaluation against ground-truth futures lives in the
//! metrics module; keeping the two inputs separate is what makes the
//! training rewards honest about what the planner could actually know.

use crate::error::{Error, Result};
use crate::scene::{Scene, Trajectory};

/// Which predictor produced a forecast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForecastSource {
    ConstantVelocity,
}

/// Predicted neighbor futures for one scene, horizon `t_fut`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub neighbor_futures: Vec<Trajectory>,
    pub source: ForecastSource,
}

impl Forecast {
    pub fn n_neighbors(&self) -> usize {
        self.neighbor_futures.len()
    }
}

/// Extrapolate every neighbor at its mean observed velocity,
/// `(last - first) / (len - 1)` per step, for `t_fut` steps past the last
/// observation.
pub fn forecast_constant_velocity(scene: &Scene, t_fut: usize) -> Result<Forecast> {
    if t_fut < 1 {
        return Err(Error::InvalidConfig("forecast horizon must be >= 1".into()));
    }
    let mut neighbor_futures = Vec::with_capacity(scene.n_neighbors());
    for history in &scene.neighbor_histories {
        if history.len() < 2 {
            return Err(Error::InvalidScene(
                "constant-velocity forecast needs histories with >= 2 points".into(),
            ));
        }
        let step = (history.last() - history.first()) * (1.0 / (history.len() - 1) as f64);
        let mut points = Vec::with_capacity(t_fut);
        let mut cur = history.last();
        for _ in 0..t_fut {
            cur = cur + step;
            points.push(cur);
        }
        neighbor_futures.push(Trajectory::new(points, history.dt)?);
    }
    Ok(Forecast {
        neighbor_futures,
        source: ForecastSource::ConstantVelocity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use crate::scene::{generate_scenes, SceneConfig};
    use proptest::prelude::*;

    fn shift_scene(scene: &Scene, offset: Vec2) -> Scene {
        let shift = |t: &Trajectory| Trajectory {
            points: t.points.iter().map(|&p| p + offset).collect(),
            dt: t.dt,
        };
        Scene {
            scene_id: scene.scene_id,
            ego_history: shift(&scene.ego_history),
            neighbor_histories: scene.neighbor_histories.iter().map(&shift).collect(),
            ego_goal: scene.ego_goal + offset,
            ego_future_gt: shift(&scene.ego_future_gt),
            neighbor_futures_gt: scene.neighbor_futures_gt.iter().map(&shift).collect(),
        }
    }

    #[test]
    fn straight_line_history_extrapolates_exactly() {
        let cfg = SceneConfig::default();
        let mut scene = generate_scenes(1, &cfg, 2).unwrap().pop().unwrap();
        let v = Vec2::new(0.3, -0.1);
        scene.neighbor_histories[0] = Trajectory::new(
            (0..cfg.t_obs).map(|i| Vec2::new(1.0, 1.0) + v * i as f64).collect(),
            cfg.dt,
        )
        .unwrap();
        let f = forecast_constant_velocity(&scene, 4).unwrap();
        let last = scene.neighbor_histories[0].last();
        for (i, p) in f.neighbor_futures[0].points.iter().enumerate() {
            let expect = last + v * (i + 1) as f64;
            assert!(p.distance(expect) < 1e-12);
        }
    }

    #[test]
    fn horizon_and_count_match_request() {
        let scene = generate_scenes(1, &SceneConfig::default(), 4).unwrap().pop().unwrap();
        let f = forecast_constant_velocity(&scene, 8).unwrap();
        assert_eq!(f.n_neighbors(), scene.n_neighbors());
        assert!(f.neighbor_futures.iter().all(|t| t.len() == 8));
        assert_eq!(f.source, ForecastSource::ConstantVelocity);
    }

    #[test]
    fn zero_horizon_rejected() {
        let scene = generate_scenes(1, &SceneConfig::default(), 4).unwrap().pop().unwrap();
        assert!(forecast_constant_velocity(&scene, 0).is_err());
    }

    proptest! {
        // Translating the whole scene translates the forecast by the same offset.
        #[test]
        fn translation_equivariance(seed in 0u64..500, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let scene = generate_scenes(1, &SceneConfig::default(), seed).unwrap().pop().unwrap();
            let offset = Vec2::new(dx, dy);
            let base = forecast_constant_velocity(&scene, 8).unwrap();
            let moved = forecast_constant_velocity(&shift_scene(&scene, offset), 8).unwrap();
            for (a, b) in base.neighbor_futures.iter().zip(&moved.neighbor_futures) {
                for (pa, pb) in a.points.iter().zip(&b.points) {
                    prop_assert!((pa.clone() + offset).distance(*pb) < 1e-9);
                }
            }
        }
    }
}
