//! Run configuration: a TOML file with one section per stage, overridable
//! with `section.key=value` assignments. The resolved configuration is
//! archived in every output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srstereo_core::backbone::{BackboneConfig, UpsampleMode};
use srstereo_core::edge::EdgeConfig;
use srstereo_core::gradcheck::CheckOptions;
use srstereo_core::model::ModelConfig;
use srstereo_core::optim::OptimConfig;
use srstereo_core::params::Init;
use srstereo_core::regression::LossConfig;
use srstereo_core::scene::{SceneSpec, TextureProfile};
use srstereo_core::train::TrainConfig;

use crate::error::{AppError, AppResult};

/// Environment variable that roots relative output and input paths.
pub const OUTPUT_ROOT_ENV: &str = "SRSTEREO_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory of the command.
    pub output: String,
    pub scenes: ScenesSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub dape: DapeSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: "out".into(),
            scenes: ScenesSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            optim: OptimSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            dape: DapeSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesSection {
    pub height: usize,
    pub width: usize,
    pub num_layers: usize,
    /// Samples per domain.
    pub count: usize,
    /// One `[d_min, d_max]` per domain.
    pub domains: Vec<[f64; 2]>,
    pub noise_amplitude: f64,
    pub sine_frequency: f64,
    pub pixel_noise: f64,
    pub integer_disparity: bool,
    /// Also write sparsified ground truth.
    pub sparsify: bool,
    pub drop_prob: f64,
}

impl Default for ScenesSection {
    fn default() -> Self {
        let spec = SceneSpec::default();
        Self {
            height: spec.height,
            width: spec.width,
            num_layers: spec.num_layers,
            count: 200,
            domains: vec![spec.disparity_range],
            noise_amplitude: spec.texture.noise_amplitude,
            sine_frequency: spec.texture.sine_frequency,
            pixel_noise: spec.pixel_noise,
            integer_disparity: spec.integer_disparity,
            sparsify: false,
            drop_prob: 0.5,
        }
    }
}

impl ScenesSection {
    /// Base spec; the disparity range is that of the first domain.
    pub fn base_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            height: self.height,
            width: self.width,
            num_layers: self.num_layers,
            disparity_range: self.domains.first().copied().unwrap_or([0.0, 24.0]),
            texture: TextureProfile { noise_amplitude: self.noise_amplitude, sine_frequency: self.sine_frequency },
            integer_disparity: self.integer_disparity,
            pixel_noise: self.pixel_noise,
            ..SceneSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_gru: usize,
    pub num_sru: usize,
    pub m: f64,
    pub feature_channels: usize,
    pub context_channels: usize,
    pub hidden_channels: usize,
    pub temperature: f64,
    /// `bilinear` or `convex`.
    pub upsample: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            num_gru: m.num_gru,
            num_sru: m.num_sru,
            m: m.m,
            feature_channels: m.backbone.feature_channels,
            context_channels: m.backbone.context_channels,
            hidden_channels: m.backbone.hidden_channels,
            temperature: m.backbone.temperature,
            upsample: "bilinear".into(),
        }
    }
}

impl ModelSection {
    pub fn to_core(&self, seed: u64) -> AppResult<ModelConfig> {
        let upsample = match self.upsample.as_str() {
            "bilinear" => UpsampleMode::Bilinear,
            "convex" => UpsampleMode::Convex,
            other => return Err(AppError::Usage(format!("model.upsample must be bilinear or convex, got {other:?}"))),
        };
        Ok(ModelConfig {
            backbone: BackboneConfig {
                feature_channels: self.feature_channels,
                context_channels: self.context_channels,
                hidden_channels: self.hidden_channels,
                temperature: self.temperature,
                upsample,
            },
            num_gru: self.num_gru,
            num_sru: self.num_sru,
            m: self.m,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub gamma: f64,
    pub h: f64,
    pub supervise_clips: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self { gamma: l.gamma, h: l.h, supervise_clips: l.supervise_clips }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_fraction: f64,
    pub final_div: f64,
    pub grad_clip: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            warmup_fraction: o.warmup_fraction,
            final_div: o.final_div,
            grad_clip: o.grad_clip,
        }
    }
}

impl OptimSection {
    pub fn to_core(&self, learning_rate: f64) -> OptimConfig {
        OptimConfig {
            learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            warmup_fraction: self.warmup_fraction,
            final_div: self.final_div,
            grad_clip: self.grad_clip,
            ..OptimConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Dataset directory written by `gen-scenes`.
    pub dataset: String,
    pub steps: usize,
    pub max_disparity: f64,
    /// Edge-estimator steps after stereo training; 0 skips it.
    pub edge_steps: usize,
    pub edge_learning_rate: f64,
    /// Feed zeros instead of the disparity to the edge estimator.
    pub edge_zero_disparity: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            steps: 2000,
            max_disparity: 24.0,
            edge_steps: 2000,
            edge_learning_rate: 1e-3,
            edge_zero_disparity: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub dataset: String,
    pub checkpoint: String,
    pub max_disparity: f64,
    /// Write colour-ramp disparity and error images.
    pub dump_images: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { dataset: "data".into(), checkpoint: "model.ckpt".into(), max_disparity: 24.0, dump_images: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DapeSection {
    /// Target-domain dataset with sparsified ground truth.
    pub dataset: String,
    /// Held-out target-domain dataset with dense ground truth.
    pub eval_dataset: String,
    pub checkpoint: String,
    pub edge_checkpoint: String,
    pub thresholds: Vec<f64>,
    pub edge_weight: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub max_disparity: f64,
}

impl Default for DapeSection {
    fn default() -> Self {
        Self {
            dataset: "target".into(),
            eval_dataset: "target_eval".into(),
            checkpoint: "model.ckpt".into(),
            edge_checkpoint: "edge.ckpt".into(),
            thresholds: vec![0.25],
            edge_weight: 1.0,
            steps: 300,
            learning_rate: 5e-4,
            max_disparity: 24.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let o = CheckOptions::default();
        Self { instances: 20, step: o.step, tolerance: o.tolerance }
    }
}

impl GradcheckSection {
    pub fn to_core(&self) -> CheckOptions {
        CheckOptions { step: self.step, tolerance: self.tolerance, ..CheckOptions::default() }
    }
}

impl RunConfig {
    /// Parses a TOML document and applies `key=value` overrides, where the
    /// key is a dotted path and the value a TOML literal (bare words are
    /// taken as strings).
    pub fn resolve(text: &str, overrides: &[String]) -> AppResult<Self> {
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| AppError::Usage(format!("config: {e}")))?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| AppError::Usage(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut table, key.trim(), value)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| AppError::Usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> AppResult<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| AppError::Usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> AppResult<ModelConfig> {
        self.model.to_core(self.seed)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma: self.loss.gamma,
            h: self.loss.h,
            supervise_clips: self.loss.supervise_clips,
            updates: self.model.num_gru + self.model.num_sru,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            optim: self.optim.to_core(self.optim.learning_rate),
            loss: self.loss_config(),
            max_disparity: self.train.max_disparity,
            seed: self.seed,
        }
    }

    pub fn edge_config(&self) -> EdgeConfig {
        EdgeConfig {
            zero_disparity_input: self.train.edge_zero_disparity,
            head_init: Init::FanInUniform,
            seed: self.seed.wrapping_add(1),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> AppResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| AppError::Usage(format!("empty key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| AppError::Usage(format!("{p} in {key:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Resolves a configured path: absolute paths are kept, relative ones are
/// placed under the output-root environment variable when it is set.
pub fn resolve_path(p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path,
    }
}
