//! Deterministic SVG rendering of a scene and sampled plans.
//!
//! The output is plain text with all coordinates formatted to a fixed
//! precision, so rendering the same scene twice produces byte-identical
//! files. That makes plots diffable artifacts rather than throwaway
//! debugging aids.

use std::fmt::Write;

use diffplan::forecast::Forecast;
use diffplan::metrics::EvalThresholds;
use diffplan::scene::{Scene, Trajectory};
use diffplan::Vec2;

const CANVAS: f64 = 640.0;
/// Fraction of the canvas left as margin around the arena.
const MARGIN: f64 = 0.08;

struct Camera {
    scale: f64,
    half: f64,
}

impl Camera {
    fn new(arena_radius: f64) -> Self {
        let half = CANVAS / 2.0;
        let scale = half * (1.0 - MARGIN) / arena_radius;
        Camera { scale, half }
    }

    /// World coordinates are y-up; SVG is y-down, so the y axis flips.
    fn project(&self, p: Vec2) -> (f64, f64) {
        (self.half + p.x * self.scale, self.half - p.y * self.scale)
    }

    fn length(&self, world: f64) -> f64 {
        world * self.scale
    }
}

fn polyline(out: &mut String, cam: &Camera, points: &[Vec2], style: &str) {
    if points.len() < 2 {
        return;
    }
    let coords: Vec<String> = points
        .iter()
        .map(|&p| {
            let (x, y) = cam.project(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    writeln!(
        out,
        "  <polyline points=\"{}\" fill=\"none\" {style}/>",
        coords.join(" ")
    )
    .unwrap();
}

fn circle(out: &mut String, cam: &Camera, center: Vec2, radius_world: f64, style: &str) {
    let (x, y) = cam.project(center);
    let r = cam.length(radius_world);
    writeln!(out, "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" {style}/>").unwrap();
}

fn dot(out: &mut String, cam: &Camera, center: Vec2, radius_px: f64, style: &str) {
    let (x, y) = cam.project(center);
    writeln!(
        out,
        "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{radius_px:.2}\" {style}/>"
    )
    .unwrap();
}

/// Renders one scene: neighbor histories and ground-truth futures, the
/// constant-velocity forecasts the planner conditioned on, the goal disk at
/// the success radius, collision disks at the evaluation radius around each
/// neighbor's final ground-truth position, and every sampled plan.
pub fn render_scene_svg(
    scene: &Scene,
    forecast: &Forecast,
    plans: &[Trajectory],
    thresholds: &EvalThresholds,
    arena_radius: f64,
) -> String {
    let cam = Camera::new(arena_radius);
    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CANVAS} {CANVAS}\" \
         width=\"{CANVAS}\" height=\"{CANVAS}\">"
    )
    .unwrap();
    writeln!(
        out,
        "  <rect width=\"{CANVAS}\" height=\"{CANVAS}\" fill=\"#ffffff\"/>"
    )
    .unwrap();
    circle(
        &mut out,
        &cam,
        Vec2::ZERO,
        arena_radius,
        "fill=\"none\" stroke=\"#d0d0d0\" stroke-width=\"1\"",
    );

    // Goal disk at the success radius.
    circle(
        &mut out,
        &cam,
        scene.ego_goal,
        thresholds.success_distance,
        "fill=\"#2e8b5733\" stroke=\"#2e8b57\" stroke-width=\"1\"",
    );

    for (i, hist) in scene.neighbor_histories.iter().enumerate() {
        polyline(
            &mut out,
            &cam,
            &hist.points,
            "stroke=\"#9e9e9e\" stroke-width=\"1.5\"",
        );
        if let Some(gt) = scene.neighbor_futures_gt.get(i) {
            polyline(
                &mut out,
                &cam,
                &gt.points,
                "stroke=\"#e07b39\" stroke-width=\"1.5\"",
            );
            if let Some(&last) = gt.points.last() {
                // Collision disk at the evaluation radius.
                circle(
                    &mut out,
                    &cam,
                    last,
                    thresholds.collision_distance,
                    "fill=\"#e07b3922\" stroke=\"#e07b39\" stroke-width=\"0.5\"",
                );
            }
        }
        if let Some(fc) = forecast.neighbor_futures.get(i) {
            polyline(
                &mut out,
                &cam,
                &fc.points,
                "stroke=\"#4169e1\" stroke-width=\"1\" stroke-dasharray=\"4 3\"",
            );
        }
        if let Some(&last) = hist.points.last() {
            dot(&mut out, &cam, last, 3.0, "fill=\"#9e9e9e\"");
        }
    }

    polyline(
        &mut out,
        &cam,
        &scene.ego_history.points,
        "stroke=\"#000000\" stroke-width=\"2\"",
    );
    polyline(
        &mut out,
        &cam,
        &scene.ego_future_gt.points,
        "stroke=\"#2e8b57\" stroke-width=\"1.5\" stroke-dasharray=\"5 3\"",
    );
    for plan in plans {
        polyline(
            &mut out,
            &cam,
            &plan.points,
            "stroke=\"#c62828\" stroke-width=\"1.5\" opacity=\"0.75\"",
        );
    }
    if let Some(&start) = scene.ego_history.points.last() {
        dot(&mut out, &cam, start, 4.0, "fill=\"#000000\"");
    }
    dot(&mut out, &cam, scene.ego_goal, 3.0, "fill=\"#2e8b57\"");

    writeln!(out, "</svg>").unwrap();
    out
}
