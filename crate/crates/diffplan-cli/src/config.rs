//! Layered run configuration.
//!
//! A run is configured in three layers, each overriding the previous one:
//! a named profile supplies every default, an optional TOML file overrides
//! any subset of fields, and command-line flags override individual values
//! on top of that. The fully resolved configuration is written next to each
//! output artifact so a run can be reproduced from its files alone.

use std::path::Path;

use diffplan::ddpo::FinetuneConfig;
use diffplan::diffusion::{LossMode, ModelConfig, PretrainConfig, ScheduleConfig};
use diffplan::guidance::GuidanceConfig;
use diffplan::metrics::EvalThresholds;
use diffplan::rewards::{RewardSpec, ThresholdConfig};
use diffplan::scene::SceneConfig;
use diffplan::{Error, Result};
use serde::{Deserialize, Serialize};

/// Scene generation knobs. Trajectory shape fields (`t_obs`, `t_fut`,
/// `n_agents`) live here and feed the model configuration, so the planner
/// input layout always matches the data it is trained on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    /// How many scenes `gen` produces.
    pub count: usize,
    pub seed: u64,
    pub n_agents: usize,
    pub t_obs: usize,
    pub t_fut: usize,
    pub dt: f64,
    pub arena_radius: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub heading_noise_std: f64,
}

/// Denoiser shape. Input and output dimensions are derived from the scene
/// section, so only the purely architectural knobs appear here.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub emb_width: usize,
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub k_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// `"mu"` regresses the posterior mean, `"eps"` the injected noise.
    pub loss_mode: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_radius: f64,
    pub inner_epochs: usize,
    /// Reward terms as `kind:weight:epsilon` strings, e.g. `"collision:4:0.6"`.
    pub rewards: Vec<String>,
    pub dynamic_thresholding: bool,
    pub threshold_alpha0: f64,
    pub threshold_max_iters: usize,
    pub threshold_delta_frac: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub collision_distance: f64,
    pub success_distance: f64,
    pub jerk_limit: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub scale: f64,
    pub activation_distance: f64,
}

/// Every knob a run can touch, grouped by pipeline stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub scene: SceneSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub guidance: GuidanceSection,
}

/// Names accepted by `--profile`.
pub const PROFILE_NAMES: [&str; 2] = ["crowdnav", "ethucy"];

/// Returns the complete default configuration for a named profile.
///
/// `crowdnav` models a dense simulated crowd: generous collision radius,
/// tight goal radius, three reward terms. `ethucy` mirrors sparser
/// pedestrian-recording conditions: longer planning horizon, tighter
/// collision radius, looser goal radius, and two reward terms.
pub fn profile(name: &str) -> Result<AppConfig> {
    let scene = SceneConfig::default();
    let model = ModelConfig::default();
    let schedule = ScheduleConfig::default();
    let pretrain = PretrainConfig::default();
    let finetune = FinetuneConfig::default();
    let base = AppConfig {
        scene: SceneSection {
            count: 500,
            seed: 0,
            n_agents: scene.n_agents,
            t_obs: scene.t_obs,
            t_fut: scene.t_fut,
            dt: scene.dt,
            arena_radius: scene.arena_radius,
            speed_min: scene.speed_min,
            speed_max: scene.speed_max,
            heading_noise_std: scene.heading_noise_std,
        },
        model: ModelSection {
            emb_width: model.emb_width,
            hidden: model.hidden.clone(),
        },
        schedule: ScheduleSection {
            k_steps: schedule.k_steps,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
        },
        pretrain: PretrainSection {
            steps: pretrain.steps,
            batch_size: pretrain.batch_size,
            lr: pretrain.lr,
            loss_mode: "mu".to_string(),
            seed: pretrain.seed,
        },
        finetune: FinetuneSection {
            iterations: finetune.iterations,
            batch_size: finetune.batch_size,
            lr: finetune.lr,
            clip_radius: finetune.clip_radius,
            inner_epochs: finetune.inner_epochs,
            rewards: vec![
                "collision:4:0.6".to_string(),
                "success:5:0.2".to_string(),
                "discomfort:1:10".to_string(),
            ],
            dynamic_thresholding: finetune.dynamic_thresholding,
            threshold_alpha0: finetune.threshold.alpha0,
            threshold_max_iters: finetune.threshold.max_iters,
            threshold_delta_frac: finetune.threshold.delta_frac,
            seed: finetune.seed,
        },
        eval: EvalSection {
            collision_distance: 0.6,
            success_distance: 0.2,
            jerk_limit: 10.0,
            seed: 0,
        },
        guidance: GuidanceSection {
            scale: 0.0,
            activation_distance: 0.6,
        },
    };
    match name {
        "crowdnav" => Ok(base),
        "ethucy" => {
            let mut cfg = base;
            cfg.scene.t_fut = 12;
            cfg.finetune.batch_size = 8;
            cfg.finetune.rewards =
                vec!["collision:3:0.2".to_string(), "success:7:0.5".to_string()];
            cfg.eval.collision_distance = 0.2;
            cfg.eval.success_distance = 0.5;
            cfg.guidance.activation_distance = 0.2;
            Ok(cfg)
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown profile {other:?}; expected one of {PROFILE_NAMES:?}"
        ))),
    }
}

/// Recursively merges `overlay` into `base`: tables merge key by key,
/// everything else (scalars, arrays) replaces the base value outright.
fn merge_value(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(base_tbl), toml::Value::Table(overlay_tbl)) => {
            for (key, val) in overlay_tbl {
                match base_tbl.get_mut(&key) {
                    Some(slot) => merge_value(slot, val),
                    None => {
                        base_tbl.insert(key, val);
                    }
                }
            }
        }
        (slot, val) => *slot = val,
    }
}

/// Loads a profile and overlays an optional TOML file on top of it.
///
/// The file may specify any subset of fields; unknown keys are rejected so
/// typos fail loudly instead of silently keeping the default.
pub fn load_config(profile_name: &str, file: Option<&Path>) -> Result<AppConfig> {
    let base = profile(profile_name)?;
    let Some(path) = file else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path)?;
    let overlay: toml::Table = text
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let mut merged = toml::Value::try_from(&base)
        .map_err(|e| Error::InvalidConfig(format!("profile serialization: {e}")))?;
    merge_value(&mut merged, toml::Value::Table(overlay));
    merged
        .try_into()
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

impl AppConfig {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            n_agents: self.scene.n_agents,
            t_obs: self.scene.t_obs,
            t_fut: self.scene.t_fut,
            dt: self.scene.dt,
            arena_radius: self.scene.arena_radius,
            speed_min: self.scene.speed_min,
            speed_max: self.scene.speed_max,
            heading_noise_std: self.scene.heading_noise_std,
        }
    }

    /// Model shape follows the scene section, so a profile that lengthens
    /// the planning horizon automatically widens the network output.
    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.scene.n_agents == 0 {
            return Err(Error::InvalidConfig("n_agents must be positive".into()));
        }
        Ok(ModelConfig {
            t_obs: self.scene.t_obs,
            t_fut: self.scene.t_fut,
            n_neighbors: self.scene.n_agents - 1,
            emb_width: self.model.emb_width,
            hidden: self.model.hidden.clone(),
            arena_radius: self.scene.arena_radius,
        })
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            k_steps: self.schedule.k_steps,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
        }
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let loss_mode = match self.pretrain.loss_mode.as_str() {
            "mu" => LossMode::Mu,
            "eps" => LossMode::Eps,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "loss_mode must be \"mu\" or \"eps\", got {other:?}"
                )))
            }
        };
        Ok(PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            loss_mode,
            seed: self.pretrain.seed,
        })
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let reward_specs = self
            .finetune
            .rewards
            .iter()
            .map(|s| RewardSpec::parse(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(FinetuneConfig {
            iterations: self.finetune.iterations,
            batch_size: self.finetune.batch_size,
            lr: self.finetune.lr,
            clip_radius: self.finetune.clip_radius,
            inner_epochs: self.finetune.inner_epochs,
            reward_specs,
            dynamic_thresholding: self.finetune.dynamic_thresholding,
            threshold: ThresholdConfig {
                alpha0: self.finetune.threshold_alpha0,
                max_iters: self.finetune.threshold_max_iters,
                delta_frac: self.finetune.threshold_delta_frac,
            },
            seed: self.finetune.seed,
        })
    }

    pub fn eval_thresholds(&self) -> EvalThresholds {
        EvalThresholds {
            collision_distance: self.eval.collision_distance,
            success_distance: self.eval.success_distance,
            jerk_limit: self.eval.jerk_limit,
        }
    }

    /// Guidance config for a given scale; the activation distance comes
    /// from the config, the scale usually from a flag.
    pub fn guidance_config(&self, scale: f64) -> Option<GuidanceConfig> {
        if scale == 0.0 {
            None
        } else {
            Some(GuidanceConfig {
                scale,
                activation_distance: self.guidance.activation_distance,
            })
        }
    }

    /// Serializes the fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))
    }
}
