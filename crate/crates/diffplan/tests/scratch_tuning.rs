//! Temporary knob experiments. Not part of the suite; run with --ignored.

use diffplan::ddpo::FinetuneConfig;
use diffplan::diffusion::{ModelConfig, Planner, PretrainConfig, ScheduleConfig};
use diffplan::metrics::{evaluate_plan, EvalThresholds};
use diffplan::pipeline;
use diffplan::scene::{Scene, SceneConfig};

fn eval_k(planner: &Planner, scenes: &[Scene], thresholds: &EvalThresholds, k: u64) -> (f64, f64, f64, f64) {
    let mut col = 0.0;
    let mut succ = 0.0;
    let mut disc = 0.0;
    let mut ade = 0.0;
    let n = (scenes.len() as f64) * (k as f64);
    for pass in 0..k {
        let plans = pipeline::eval_plans(planner, scenes, None, 99 + pass).unwrap();
        for (scene, plan) in scenes.iter().zip(&plans) {
            let m = evaluate_plan(scene, plan, thresholds).unwrap();
            col += m.collided as u8 as f64;
            succ += m.succeeded as u8 as f64;
            disc += (m.max_jerk > thresholds.jerk_limit) as u8 as f64;
            ade += m.ade;
        }
    }
    (col / n, succ / n, disc / n, ade / n)
}

#[test]
#[ignore]
fn gt_doomed_fraction() {
    use diffplan::rewards::min_neighbor_distance;
    let eval_scenes = pipeline::run_gen(200, &SceneConfig::default(), 1213).unwrap().scenes;
    let doomed = eval_scenes
        .iter()
        .filter(|s| min_neighbor_distance(&s.ego_future_gt.points, &s.neighbor_futures_gt) <= 0.6)
        .count();
    let hist: Vec<f64> = eval_scenes
        .iter()
        .map(|s| min_neighbor_distance(&s.ego_future_gt.points, &s.neighbor_futures_gt))
        .collect();
    let mut sorted = hist.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "GT ego collides (<=0.6m) in {doomed}/200 scenes; min-dist quantiles p10 {:.2} p25 {:.2} p50 {:.2}",
        sorted[20], sorted[50], sorted[100]
    );
}

#[test]
#[ignore]
fn collision_signal_decomposition() {
    use diffplan::diffusion::{sample_plan, EvalScratch};
    use diffplan::rewards::min_neighbor_distance;
    use diffplan::StreamRng;

    let scene_cfg = SceneConfig::default();
    let train = pipeline::run_gen(500, &scene_cfg, 11).unwrap().scenes;
    let eval_scenes = pipeline::run_gen(200, &scene_cfg, 1213).unwrap().scenes;
    let model = ModelConfig::default();
    let (pre, _) = pipeline::run_pretrain(
        &train,
        &model,
        &ScheduleConfig::default(),
        &PretrainConfig::default(),
    )
    .unwrap();
    let contexts = pipeline::build_contexts(&eval_scenes, &model).unwrap();

    let samples = 16usize;
    let mut scratch = EvalScratch::for_planner(&pre.planner);
    let _ = &mut scratch;
    let root = StreamRng::seed(4242);
    let mut fc_dists = Vec::new();
    let mut gt_dists = Vec::new();
    let mut per_scene_gt_col = Vec::new();
    let t0 = std::time::Instant::now();
    for (i, (scene, ctx)) in eval_scenes.iter().zip(&contexts).enumerate() {
        let mut cols = Vec::with_capacity(samples);
        for s in 0..samples {
            let mut rng = root.stream_indexed("probe", (i * samples + s) as u64);
            let plan = sample_plan(&pre.planner, ctx, &mut rng, false);
            let fc = min_neighbor_distance(&plan.plan_frame, &ctx.forecast_frame);
            let gt = min_neighbor_distance(&plan.plan_world.points, &scene.neighbor_futures_gt);
            fc_dists.push(fc);
            gt_dists.push(gt);
            cols.push((gt <= 0.6) as u8 as f64);
        }
        per_scene_gt_col.push(cols.iter().sum::<f64>() / samples as f64);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let n = fc_dists.len() as f64;
    println!("{} rollouts in {elapsed:.1}s ({:.0}/s)", fc_dists.len(), n / elapsed);

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mf = mean(&fc_dists);
    let mg = mean(&gt_dists);
    let cov = fc_dists.iter().zip(&gt_dists).map(|(a, b)| (a - mf) * (b - mg)).sum::<f64>() / n;
    let vf = fc_dists.iter().map(|a| (a - mf) * (a - mf)).sum::<f64>() / n;
    let vg = gt_dists.iter().map(|b| (b - mg) * (b - mg)).sum::<f64>() / n;
    println!("min-dist: forecast mean {mf:.3} gt mean {mg:.3} corr {:.3}", cov / (vf * vg).sqrt());
    let mad = fc_dists.iter().zip(&gt_dists).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    println!("mean |forecast - gt| min-dist gap: {mad:.3} m");

    // Would the forecast-based bit at the adapted threshold (1.13) agree
    // with the gt-based bit at the eval threshold (0.6)?
    let mut both = 0;
    let mut fc_safe_gt_col = 0;
    let mut fc_col_gt_safe = 0;
    for (f, g) in fc_dists.iter().zip(&gt_dists) {
        let f_safe = *f > 1.13;
        let g_safe = *g > 0.6;
        if f_safe && !g_safe {
            fc_safe_gt_col += 1;
        }
        if !f_safe && g_safe {
            fc_col_gt_safe += 1;
        }
        if f_safe == g_safe {
            both += 1;
        }
    }
    println!(
        "bit agreement {:.3}; reward-safe-but-gt-collides {:.3}; reward-col-but-gt-safe {:.3}",
        both as f64 / n,
        fc_safe_gt_col as f64 / n,
        fc_col_gt_safe as f64 / n
    );

    // Collision-bit controllability: how much of the gt-collision variance
    // is within-scene (action noise) vs between-scene (geometry)?
    let p_bar = mean(&per_scene_gt_col);
    let between = per_scene_gt_col.iter().map(|p| (p - p_bar) * (p - p_bar)).sum::<f64>()
        / per_scene_gt_col.len() as f64;
    let within = mean(&per_scene_gt_col.iter().map(|p| p * (1.0 - p)).collect::<Vec<_>>());
    println!(
        "gt collision p_bar {p_bar:.3}; between-scene var {between:.4}; within-scene var {within:.4}"
    );
    let all_or_nothing = per_scene_gt_col
        .iter()
        .filter(|&&p| p == 0.0 || p == 1.0)
        .count();
    println!(
        "scenes with all-same collision outcome across {samples} samples: {all_or_nothing}/{}",
        per_scene_gt_col.len()
    );

    // Do the training bits conflict? Collision-safe at the adapted 1.13 m
    // versus success at the adapted 0.3 m, per rollout.
    let root2 = StreamRng::seed(4242);
    let mut safe_bits = Vec::new();
    let mut succ_bits = Vec::new();
    let mut per_scene_both = Vec::new();
    for (i, ctx) in contexts.iter().enumerate() {
        let mut any_both = false;
        for s in 0..samples {
            let mut rng = root2.stream_indexed("probe", (i * samples + s) as u64);
            let plan = sample_plan(&pre.planner, ctx, &mut rng, false);
            let safe = min_neighbor_distance(&plan.plan_frame, &ctx.forecast_frame) > 1.13;
            let succ = plan.plan_frame.last().map(|p| p.distance(ctx.goal_frame)).unwrap() <= 0.3;
            safe_bits.push(safe as u8 as f64);
            succ_bits.push(succ as u8 as f64);
            any_both |= safe && succ;
        }
        per_scene_both.push(any_both);
    }
    let ms = mean(&safe_bits);
    let mu = mean(&succ_bits);
    let cov_b = safe_bits.iter().zip(&succ_bits).map(|(a, b)| (a - ms) * (b - mu)).sum::<f64>() / n;
    let vs = ms * (1.0 - ms);
    let vu = mu * (1.0 - mu);
    println!(
        "train bits: P(safe@1.13) {ms:.3} P(succ@0.3) {mu:.3} corr {:.3}",
        cov_b / (vs * vu).sqrt()
    );
    println!(
        "scenes with at least one rollout satisfying both: {}/{}",
        per_scene_both.iter().filter(|&&b| b).count(),
        per_scene_both.len()
    );
}

#[test]
#[ignore]
fn candidates() {
    let scene_cfg = SceneConfig::default();
    let train = pipeline::run_gen(500, &scene_cfg, 11).unwrap().scenes;
    let eval_scenes = pipeline::run_gen(200, &scene_cfg, 1213).unwrap().scenes;
    let model = ModelConfig::default();
    let schedule = ScheduleConfig::default();
    let (pre, _) =
        pipeline::run_pretrain(&train, &model, &schedule, &PretrainConfig::default()).unwrap();
    let thresholds = EvalThresholds::crowdnav();
    let (c0, s0, d0, a0) = eval_k(&pre.planner, &eval_scenes, &thresholds, 5);
    println!("PRE(k=5): col {c0:.4} succ {s0:.4} disc {d0:.4} ade {a0:.3}");

    let cands = [
        ("b1024_lr3e-4_x1", 1024usize, 3e-4, 1usize),
        ("b2048_lr3e-4_x1", 2048, 3e-4, 1),
        ("b1024_lr3e-4_x2", 1024, 3e-4, 2),
        ("b1024_lr1e-3_x1", 1024, 1e-3, 1),
    ];
    for (label, batch, lr, inner) in cands {
        let cfg = FinetuneConfig {
            batch_size: batch,
            lr,
            inner_epochs: inner,
            ..FinetuneConfig::default()
        };
        let t0 = std::time::Instant::now();
        let (tuned, log) = pipeline::run_finetune(&pre, &train, &cfg).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let (c1, s1, d1, a1) = eval_k(&tuned.planner, &eval_scenes, &thresholds, 5);
        let first = &log.iterations[0];
        let last = log.iterations.last().unwrap();
        println!(
            "{label}: col {c1:.4} succ {s1:.4} disc {d1:.4} ade {a1:.3} | {secs:.0}s | \
             eps {:?} -> {:?} | rel col {:+.1}% succ {:+.1}%",
            first.thresholds.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            last.thresholds.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            (c1 - c0) / c0 * 100.0,
            (s1 - s0) / s0 * 100.0,
        );
    }
}

#[test]
#[ignore]
fn goal_structure() {
    use diffplan::rewards::min_neighbor_distance;
    let n = 1000;
    let eval_scenes = pipeline::run_gen(n, &SceneConfig::default(), 1213).unwrap().scenes;
    let mut gt_succ = 0;
    let mut gt_col = 0;
    let mut goal_d: Vec<f64> = Vec::new();
    let mut goal_from_obs: Vec<f64> = Vec::new();
    for s in &eval_scenes {
        let end = s.ego_future_gt.last();
        let d = end.distance(s.ego_goal);
        goal_d.push(d);
        goal_from_obs.push(s.ego_last_observed().distance(s.ego_goal));
        if d <= 0.2 {
            gt_succ += 1;
        }
        if min_neighbor_distance(&s.ego_future_gt.points, &s.neighbor_futures_gt) <= 0.6 {
            gt_col += 1;
        }
    }
    goal_d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    goal_from_obs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "GT succ {gt_succ}/{n}, GT col {gt_col}/{n}; |GTend-goal| p10 {:.2} p50 {:.2} p90 {:.2}; |obs-goal| p10 {:.2} p50 {:.2} p90 {:.2}",
        goal_d[n / 10], goal_d[n / 2], goal_d[9 * n / 10],
        goal_from_obs[n / 10], goal_from_obs[n / 2], goal_from_obs[9 * n / 10]
    );
}

#[test]
#[ignore]
fn collision_anatomy() {
    let n = 1000;
    let scenes = pipeline::run_gen(n, &SceneConfig::default(), 1213).unwrap().scenes;
    let mut n_col = 0;
    let mut ego_still = 0;
    let mut nb_still = 0;
    let mut rim = 0;
    let mut steps: Vec<usize> = Vec::new();
    for s in &scenes {
        let ego = &s.ego_future_gt.points;
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for (j, nb) in s.neighbor_futures_gt.iter().enumerate() {
            for (t, (p, q)) in ego.iter().zip(&nb.points).enumerate() {
                let d = p.distance(*q);
                if d < best.0 {
                    best = (d, t, j);
                }
            }
        }
        let (d, t, j) = best;
        if d > 0.6 {
            continue;
        }
        n_col += 1;
        steps.push(t);
        let nb = &s.neighbor_futures_gt[j].points;
        let ego_v = if t > 0 { ego[t].distance(ego[t - 1]) } else { 1.0 };
        let nb_v = if t > 0 { nb[t].distance(nb[t - 1]) } else { 1.0 };
        if ego_v < 1e-9 {
            ego_still += 1;
        }
        if nb_v < 1e-9 {
            nb_still += 1;
        }
        if ego[t].norm() > 3.0 || nb[t].norm() > 3.0 {
            rim += 1;
        }
    }
    steps.sort_unstable();
    println!(
        "collisions {n_col}/{n}: ego stationary {ego_still}, neighbor stationary {nb_still}, near rim (r>3) {rim}, min-step median {}",
        steps[n_col / 2]
    );
}
