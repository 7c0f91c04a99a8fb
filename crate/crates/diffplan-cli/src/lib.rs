//! Command-line driver for the diffplan pipeline.
//!
//! Exposes six subcommands covering the full workflow: `gen` synthesizes
//! scene sets, `pretrain` fits the diffusion planner by imitation,
//! `finetune` runs reward fine-tuning, `eval` scores a checkpoint, `sample`
//! dumps raw plans for one scene, and `plot` renders a scene as SVG. Every
//! command resolves its configuration through the profile / file / flag
//! layering in [`config`] and writes a `*.resolved.toml` copy next to its
//! output, so runs are reproducible from artifacts alone.

pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diffplan::checkpoint::{load_checkpoint_file, save_checkpoint_file};
use diffplan::ddpo::FinetuneLog;
use diffplan::diffusion::TrainingLog;
use diffplan::forecast::forecast_constant_velocity;
use diffplan::pipeline;
use diffplan::rewards::RewardSpec;
use diffplan::scene::{read_scenes_file, write_scenes_file, Scene};
use diffplan::{Error, Result};
use serde::Serialize;

use config::{load_config, AppConfig};

#[derive(Parser)]
#[command(
    name = "diffplan",
    version,
    about = "Train, fine-tune, and evaluate a diffusion motion planner for 2D crowds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base profile supplying every default (crowdnav or ethucy).
    #[arg(long, default_value = "crowdnav")]
    profile: String,
    /// TOML file overriding any subset of the profile's fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<AppConfig> {
        load_config(&self.profile, self.config.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene set and suggest a discomfort threshold.
    Gen(GenCmd),
    /// Pretrain the diffusion planner on a scene set.
    Pretrain(PretrainCmd),
    /// Fine-tune a pretrained checkpoint against planning rewards.
    Finetune(FinetuneCmd),
    /// Evaluate a checkpoint on a scene set and write a metrics report.
    Eval(EvalCmd),
    /// Sample plans for a single scene and dump them as JSON.
    Sample(SampleCmd),
    /// Render a scene, its forecasts, and sampled plans as SVG.
    Plot(PlotCmd),
}

#[derive(Args)]
struct GenCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output scene file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes to generate.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Scene file produced by `gen`.
    #[arg(long)]
    scenes: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Regression target: "mu" (posterior mean) or "eps" (injected noise).
    #[arg(long)]
    loss_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FinetuneCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Scene file to roll out against.
    #[arg(long)]
    scenes: PathBuf,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_radius: Option<f64>,
    #[arg(long)]
    inner_epochs: Option<usize>,
    /// Comma-separated reward terms, e.g. "collision:4:0.6,success:5:0.2".
    #[arg(long)]
    rewards: Option<String>,
    /// Enable or disable reward threshold adaptation.
    #[arg(long)]
    dynamic_thresholding: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Scene file to evaluate on.
    #[arg(long)]
    scenes: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output path for the aggregate metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional output path for the per-scene CSV.
    #[arg(long)]
    detail: Option<PathBuf>,
    /// Collision-avoidance guidance strength (0 disables guidance).
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output path for the plans JSON.
    #[arg(long)]
    out: PathBuf,
    /// Scene to sample plans for.
    #[arg(long, default_value_t = 0)]
    scene_id: u64,
    /// Number of plans to draw.
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlotCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// Scene to render.
    #[arg(long, default_value_t = 0)]
    scene_id: u64,
    /// Number of plans to overlay.
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `argv` and runs the selected command, returning a process exit
/// code. Runtime failures print a single `error: ...` line to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; clap distinguishes
            // them from usage errors via the exit code.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(cmd) => run_gen(cmd),
        Command::Pretrain(cmd) => run_pretrain(cmd),
        Command::Finetune(cmd) => run_finetune(cmd),
        Command::Eval(cmd) => run_eval(cmd),
        Command::Sample(cmd) => run_sample(cmd),
        Command::Plot(cmd) => run_plot(cmd),
    }
}

/// Joins relative output paths under `root` when set; absolute paths and
/// input paths are never rewritten.
pub fn resolve_out(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

fn out_root() -> Option<PathBuf> {
    std::env::var_os("DIFFPLAN_OUT_ROOT").map(PathBuf::from)
}

/// Applies the output-root override and creates parent directories.
fn prepare_out(path: &Path) -> Result<PathBuf> {
    let resolved = resolve_out(path, out_root().as_deref());
    if let Some(parent) = resolved.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(resolved)
}

/// Writes the fully resolved configuration next to an output artifact.
fn write_resolved_config(out: &Path, cfg: &AppConfig) -> Result<PathBuf> {
    let path = out.with_extension("resolved.toml");
    fs::write(&path, cfg.to_toml()?)?;
    Ok(path)
}

fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes = read_scenes_file(path)?;
    if scenes.is_empty() {
        return Err(Error::InvalidScene(format!(
            "{} contains no scenes",
            path.display()
        )));
    }
    Ok(scenes)
}

fn find_scene(scenes: &[Scene], scene_id: u64) -> Result<&Scene> {
    scenes.iter().find(|s| s.scene_id == scene_id).ok_or_else(|| {
        Error::InvalidScene(format!(
            "scene_id {scene_id} not found (file holds ids {}..={})",
            scenes.first().map(|s| s.scene_id).unwrap_or(0),
            scenes.last().map(|s| s.scene_id).unwrap_or(0)
        ))
    })
}

fn run_gen(cmd: GenCmd) -> Result<()> {
    let mut cfg = cmd.cfg.load()?;
    if let Some(count) = cmd.count {
        cfg.scene.count = count;
    }
    if let Some(seed) = cmd.seed {
        cfg.scene.seed = seed;
    }
    let scene_cfg = cfg.scene_config();
    let artifacts = pipeline::run_gen(cfg.scene.count, &scene_cfg, cfg.scene.seed)?;
    let out = prepare_out(&cmd.out)?;
    write_scenes_file(&out, &artifacts.scenes)?;
    let resolved = write_resolved_config(&out, &cfg)?;
    println!("wrote {} scenes to {}", artifacts.scenes.len(), out.display());
    println!("suggested jerk threshold: {:.4}", artifacts.jerk_suggestion);
    println!("resolved config: {}", resolved.display());
    Ok(())
}

fn training_csv(log: &TrainingLog) -> String {
    let mut out = String::from("step,loss\n");
    for (i, loss) in log.losses.iter().enumerate() {
        writeln!(out, "{i},{loss:.6}").unwrap();
    }
    out
}

fn run_pretrain(cmd: PretrainCmd) -> Result<()> {
    let mut cfg = cmd.cfg.load()?;
    if let Some(steps) = cmd.steps {
        cfg.pretrain.steps = steps;
    }
    if let Some(batch) = cmd.batch_size {
        cfg.pretrain.batch_size = batch;
    }
    if let Some(lr) = cmd.lr {
        cfg.pretrain.lr = lr;
    }
    if let Some(mode) = cmd.loss_mode {
        cfg.pretrain.loss_mode = mode;
    }
    if let Some(seed) = cmd.seed {
        cfg.pretrain.seed = seed;
    }
    let scenes = load_scenes(&cmd.scenes)?;
    let model = cfg.model_config()?;
    let schedule = cfg.schedule_config();
    let pre_cfg = cfg.pretrain_config()?;
    let (ckpt, log) = pipeline::run_pretrain(&scenes, &model, &schedule, &pre_cfg)?;
    let out = prepare_out(&cmd.out)?;
    save_checkpoint_file(&out, &ckpt)?;
    let log_path = out.with_extension("train.csv");
    fs::write(&log_path, training_csv(&log))?;
    let resolved = write_resolved_config(&out, &cfg)?;
    let window = 50.min(log.losses.len());
    println!(
        "pretrained {} steps in {:.1}s: loss {:.4} -> {:.4}",
        log.losses.len(),
        log.wall_time_s,
        log.mean_loss_first(window),
        log.mean_loss_last(window)
    );
    println!("checkpoint: {}", out.display());
    println!("training log: {}", log_path.display());
    println!("resolved config: {}", resolved.display());
    Ok(())
}

fn finetune_csv(log: &FinetuneLog, specs: &[RewardSpec]) -> String {
    let mut header = String::from("iteration,mean_reward,loss,mean_ratio,clip_fraction");
    for spec in specs {
        write!(header, ",raw_{0},threshold_{0}", spec.kind.name()).unwrap();
    }
    header.push('\n');
    let mut out = header;
    for rec in &log.iterations {
        write!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            rec.iteration, rec.mean_reward, rec.loss, rec.mean_ratio, rec.clip_fraction
        )
        .unwrap();
        for (raw, thr) in rec.mean_raw_rewards.iter().zip(&rec.thresholds) {
            write!(out, ",{raw:.6},{thr:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn run_finetune(cmd: FinetuneCmd) -> Result<()> {
    let mut cfg = cmd.cfg.load()?;
    if let Some(iters) = cmd.iterations {
        cfg.finetune.iterations = iters;
    }
    if let Some(batch) = cmd.batch_size {
        cfg.finetune.batch_size = batch;
    }
    if let Some(lr) = cmd.lr {
        cfg.finetune.lr = lr;
    }
    if let Some(clip) = cmd.clip_radius {
        cfg.finetune.clip_radius = clip;
    }
    if let Some(epochs) = cmd.inner_epochs {
        cfg.finetune.inner_epochs = epochs;
    }
    if let Some(rewards) = &cmd.rewards {
        cfg.finetune.rewards = rewards.split(',').map(str::to_string).collect();
    }
    if let Some(dynamic) = cmd.dynamic_thresholding {
        cfg.finetune.dynamic_thresholding = dynamic;
    }
    if let Some(seed) = cmd.seed {
        cfg.finetune.seed = seed;
    }
    let scenes = load_scenes(&cmd.scenes)?;
    let ckpt = load_checkpoint_file(&cmd.ckpt)?;
    let ft_cfg = cfg.finetune_config()?;
    let (tuned, log) = pipeline::run_finetune(&ckpt, &scenes, &ft_cfg)?;
    let out = prepare_out(&cmd.out)?;
    save_checkpoint_file(&out, &tuned)?;
    let log_path = out.with_extension("finetune.csv");
    fs::write(&log_path, finetune_csv(&log, &ft_cfg.reward_specs))?;
    let resolved = write_resolved_config(&out, &cfg)?;
    let window = 10.min(log.iterations.len());
    println!(
        "fine-tuned {} iterations in {:.1}s: mean reward {:.4} -> {:.4}",
        log.iterations.len(),
        log.wall_time_s,
        log.mean_reward_first(window),
        log.mean_reward_last(window)
    );
    println!("checkpoint: {}", out.display());
    println!("fine-tune log: {}", log_path.display());
    println!("resolved config: {}", resolved.display());
    Ok(())
}

fn run_eval(cmd: EvalCmd) -> Result<()> {
    let mut cfg = cmd.cfg.load()?;
    if let Some(scale) = cmd.guidance_scale {
        cfg.guidance.scale = scale;
    }
    if let Some(seed) = cmd.seed {
        cfg.eval.seed = seed;
    }
    let scenes = load_scenes(&cmd.scenes)?;
    let ckpt = load_checkpoint_file(&cmd.ckpt)?;
    let thresholds = cfg.eval_thresholds();
    thresholds.validate()?;
    let guidance = cfg.guidance_config(cfg.guidance.scale);
    let report = pipeline::run_eval(
        &ckpt.planner,
        &scenes,
        &thresholds,
        guidance.as_ref(),
        cfg.eval.seed,
    )?;
    let out = prepare_out(&cmd.out)?;
    let csv = report.to_csv();
    fs::write(&out, &csv)?;
    if let Some(detail) = &cmd.detail {
        let detail_out = prepare_out(detail)?;
        fs::write(&detail_out, report.detail_csv())?;
        println!("detail report: {}", detail_out.display());
    }
    let resolved = write_resolved_config(&out, &cfg)?;
    print!("{csv}");
    println!("report: {}", out.display());
    println!("resolved config: {}", resolved.display());
    Ok(())
}

#[derive(Serialize)]
struct PlanEntry {
    points: Vec<diffplan::Vec2>,
    loglik: f64,
}

#[derive(Serialize)]
struct PlanDump {
    schema: &'static str,
    scene_id: u64,
    seed: u64,
    guidance_scale: f64,
    dt: f64,
    plans: Vec<PlanEntry>,
}

fn run_sample(cmd: SampleCmd) -> Result<()> {
    let mut cfg = cmd.cfg.load()?;
    if let Some(scale) = cmd.guidance_scale {
        cfg.guidance.scale = scale;
    }
    if let Some(seed) = cmd.seed {
        cfg.eval.seed = seed;
    }
    let scenes = load_scenes(&cmd.scenes)?;
    let scene = find_scene(&scenes, cmd.scene_id)?;
    let ckpt = load_checkpoint_file(&cmd.ckpt)?;
    let guidance = cfg.guidance_config(cfg.guidance.scale);
    let plans =
        pipeline::run_sample(&ckpt.planner, scene, cmd.n, guidance.as_ref(), cfg.eval.seed)?;
    let dump = PlanDump {
        schema: "plans-v1",
        scene_id: scene.scene_id,
        seed: cfg.eval.seed,
        guidance_scale: cfg.guidance.scale,
        dt: scene.dt(),
        plans: plans
            .iter()
            .map(|p| PlanEntry {
                points: p.plan_world.points.clone(),
                loglik: p.loglik_sum,
            })
            .collect(),
    };
    let out = prepare_out(&cmd.out)?;
    let mut text = serde_json::to_string_pretty(&dump)?;
    text.push('\n');
    fs::write(&out, text)?;
    println!(
        "wrote {} plans for scene {} to {}",
        dump.plans.len(),
        scene.scene_id,
        out.display()
    );
    Ok(())
}

fn run_plot(cmd: PlotCmd) -> Result<()> {
    let mut cfg = cmd.cfg.load()?;
    if let Some(scale) = cmd.guidance_scale {
        cfg.guidance.scale = scale;
    }
    if let Some(seed) = cmd.seed {
        cfg.eval.seed = seed;
    }
    let scenes = load_scenes(&cmd.scenes)?;
    let scene = find_scene(&scenes, cmd.scene_id)?;
    let ckpt = load_checkpoint_file(&cmd.ckpt)?;
    let guidance = cfg.guidance_config(cfg.guidance.scale);
    let plans =
        pipeline::run_sample(&ckpt.planner, scene, cmd.n, guidance.as_ref(), cfg.eval.seed)?;
    let trajectories: Vec<_> = plans.iter().map(|p| p.plan_world.clone()).collect();
    let forecast = forecast_constant_velocity(scene, ckpt.planner.model.t_fut)?;
    let svg = plot::render_scene_svg(
        scene,
        &forecast,
        &trajectories,
        &cfg.eval_thresholds(),
        ckpt.planner.model.arena_radius,
    );
    let out = prepare_out(&cmd.out)?;
    fs::write(&out, svg)?;
    println!("wrote plot for scene {} to {}", scene.scene_id, out.display());
    Ok(())
}
