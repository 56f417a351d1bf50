//! Flat `key = value` run configuration.
//!
//! Every key has a default. Values given in a file are applied first, then
//! `--key value` flags from the command line. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use classwise_adapt::augment::{AugmentPolicy, NoisePolicy};
use classwise_adapt::datamodel::{DatasetSpec, DomainShift, Modality, ToySceneConfig};
use classwise_adapt::discbank::DiscConfig;
use classwise_adapt::fusion::FusionParams;
use classwise_adapt::metrics::MeanMode;
use classwise_adapt::segnet::{Profile, SegNetConfig};
use classwise_adapt::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Environment variable naming the dataset cache root.
pub const CACHE_ENV: &str = "CLASSWISE_ADAPT_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: String,
    pub seed: u64,

    // dataset
    pub data_root: String,
    pub eval_root: String,
    pub modality: Modality,
    pub class_count: usize,
    pub ignore_index: Option<usize>,

    // toy scenes
    pub toy_height: usize,
    pub toy_width: usize,
    pub toy_samples: usize,
    pub toy_eval_samples: usize,
    pub toy_objects_min: usize,
    pub toy_objects_max: usize,
    pub toy_clutter_probability: f32,
    pub toy_material_jitter: f32,
    pub toy_min_class_diversity: usize,
    pub toy_dominance_cap: f32,
    pub shift_hue_rotation_deg: f32,
    pub shift_brightness_scale: f32,
    pub shift_noise_sigma: f32,
    pub shift_texture_amplitude: f32,
    pub shift_depth_noise: f32,
    pub shift_depth_hole_rate: f32,

    // network
    pub profile: Profile,

    // noise
    pub noise_p_gaussian: f64,
    pub noise_p_salt_pepper: f64,
    pub noise_p_blur: f64,
    pub noise_p_bilateral: f64,
    pub noise_gaussian_sigma: f32,
    pub noise_salt_pepper_rate: f32,
    pub noise_blur_kernel: usize,
    pub noise_bilateral_sigma_spatial: f32,
    pub noise_bilateral_sigma_range: f32,
    pub noise_apply_to_depth: bool,

    // augmentation
    pub crop_height: usize,
    pub crop_width: usize,
    pub gamma_min: f32,
    pub gamma_max: f32,
    pub gamma_probability: f64,
    pub flip_probability: f64,

    // training
    pub pretrain_iterations: usize,
    pub batch_size: usize,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adapt_iterations: usize,
    pub adapt_batch_size: usize,
    pub sgd_lr: f64,
    pub disc_lr: f64,
    pub adversarial_weight: f64,
    pub class_weights: Vec<f64>,
    pub checkpoint_every: usize,
    pub resume: bool,
    pub max_depth: f32,

    // adaptation and evaluation
    pub mode: AdaptMode,
    pub init: String,
    pub checkpoint: String,
    pub mean_mode: MeanMode,

    // fusion
    pub frames: String,
    pub predictions: String,
    pub trajectory: String,
    pub intrinsics: String,
    pub fusion_window: usize,
    pub voxel_size: f64,
    pub fusion_max_range: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// One discriminator per class.
    Classwise,
    /// One discriminator over the whole score map.
    Single,
    /// Copy CNN_C unchanged.
    None,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToySceneConfig::default();
        let noise = NoisePolicy::default();
        let train = TrainConfig::default();
        let fusion = FusionParams::default();
        Self {
            out: "run".into(),
            seed: 0,
            data_root: String::new(),
            eval_root: String::new(),
            modality: Modality::Rgbd,
            class_count: toy.class_count,
            ignore_index: Some(0),
            toy_height: toy.height,
            toy_width: toy.width,
            toy_samples: 256,
            toy_eval_samples: 128,
            toy_objects_min: toy.objects_per_scene.0,
            toy_objects_max: toy.objects_per_scene.1,
            toy_clutter_probability: toy.clutter_probability,
            toy_material_jitter: toy.material_jitter,
            toy_min_class_diversity: toy.min_class_diversity,
            toy_dominance_cap: toy.dominance_cap,
            shift_hue_rotation_deg: toy.shift.hue_rotation_deg,
            shift_brightness_scale: toy.shift.brightness_scale,
            shift_noise_sigma: toy.shift.noise_sigma,
            shift_texture_amplitude: toy.shift.texture_amplitude,
            shift_depth_noise: toy.shift.depth_noise,
            shift_depth_hole_rate: toy.shift.depth_hole_rate,
            profile: Profile::Desk,
            noise_p_gaussian: noise.p_gaussian,
            noise_p_salt_pepper: noise.p_salt_pepper,
            noise_p_blur: noise.p_blur,
            noise_p_bilateral: noise.p_bilateral,
            noise_gaussian_sigma: noise.gaussian_sigma,
            noise_salt_pepper_rate: noise.salt_pepper_rate,
            noise_blur_kernel: noise.blur_kernel.0,
            noise_bilateral_sigma_spatial: noise.bilateral_sigma_spatial,
            noise_bilateral_sigma_range: noise.bilateral_sigma_range,
            noise_apply_to_depth: noise.apply_to_depth,
            crop_height: toy.height,
            crop_width: toy.width,
            gamma_min: 0.7,
            gamma_max: 1.5,
            gamma_probability: 0.5,
            flip_probability: 0.5,
            pretrain_iterations: train.pretrain_iterations,
            batch_size: train.batch_size,
            adam_lr: train.adam_lr,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adapt_iterations: train.adapt_iterations,
            adapt_batch_size: train.adapt_batch_size,
            sgd_lr: train.sgd_lr,
            disc_lr: train.disc_lr,
            adversarial_weight: train.adversarial_weight,
            class_weights: Vec::new(),
            checkpoint_every: 0,
            resume: false,
            max_depth: train.max_depth,
            mode: AdaptMode::Classwise,
            init: String::new(),
            checkpoint: String::new(),
            mean_mode: MeanMode::Present,
            frames: String::new(),
            predictions: String::new(),
            trajectory: String::new(),
            intrinsics: String::new(),
            fusion_window: fusion.window,
            voxel_size: fusion.voxel_size,
            fusion_max_range: fusion.max_range,
        }
    }
}

/// Split `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Convert a textual value to JSON shaped like the key's default.
fn typed_value(key: &str, text: &str, default: &Value) -> Result<Value> {
    let bad = || anyhow!("key `{key}`: cannot parse `{text}`");
    Ok(match default {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_f64() => serde_json::json!(text.parse::<f64>().map_err(|_| bad())?),
        Value::Number(_) => serde_json::json!(text.parse::<u64>().map_err(|_| bad())?),
        Value::Array(_) if text.is_empty() => Value::Array(Vec::new()),
        Value::Array(_) => Value::Array(
            text.split(',')
                .map(|t| t.trim().parse::<f64>().map(|x| serde_json::json!(x)).map_err(|_| bad()))
                .collect::<Result<_>>()?,
        ),
        // Optional indices: a number or `none`.
        Value::Null => match text {
            "none" => Value::Null,
            _ => serde_json::json!(text.parse::<u64>().map_err(|_| bad())?),
        },
        _ => Value::String(text.to_string()),
    })
}

impl RunConfig {
    /// Apply overrides in order; later pairs win.
    pub fn with_pairs(&self, pairs: &[(String, String)]) -> Result<Self> {
        let defaults = serde_json::to_value(Self::default())?;
        let defaults = defaults.as_object().expect("struct serializes to an object");
        let mut current: Map<String, Value> = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        for (k, v) in pairs {
            let default = defaults.get(k).ok_or_else(|| anyhow!("unknown config key `{k}`"))?;
            let default = match (k.as_str(), default) {
                ("ignore_index", _) => &Value::Null,
                _ => default,
            };
            current.insert(k.clone(), typed_value(k, v, default)?);
        }
        let cfg: Self = serde_json::from_value(Value::Object(current)).context("invalid config value")?;
        Ok(cfg)
    }

    /// Read a flat config file, or the `config` object of a `run.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if text.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(&text)?;
            let inner = v.get("config").cloned().unwrap_or(v);
            return serde_json::from_value(inner).with_context(|| format!("parsing {}", path.display()));
        }
        Self::default().with_pairs(&parse_pairs(&text)?)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    /// Dataset root: explicit, else under the cache root, else under `out`.
    pub fn resolved_data_root(&self) -> PathBuf {
        if !self.data_root.is_empty() {
            return PathBuf::from(&self.data_root);
        }
        let base = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| self.out_dir());
        base.join(format!("toy_s{}_{}x{}_n{}", self.seed, self.toy_height, self.toy_width, self.toy_samples))
    }

    pub fn resolved_eval_root(&self) -> PathBuf {
        if self.eval_root.is_empty() {
            self.resolved_data_root().join("eval")
        } else {
            PathBuf::from(&self.eval_root)
        }
    }

    /// Fill every path left empty with its concrete value.
    pub fn resolve(&self) -> Self {
        let mut c = self.clone();
        let out = self.out_dir();
        let or = |s: &str, d: PathBuf| if s.is_empty() { d.display().to_string() } else { s.to_string() };
        c.data_root = or(&self.data_root, self.resolved_data_root());
        c.eval_root = or(&self.eval_root, self.resolved_eval_root());
        c.init = or(&self.init, out.join("cnn_c.ckpt"));
        c.checkpoint = or(&self.checkpoint, out.join("cnn_r.ckpt"));
        let frames = PathBuf::from(or(&self.frames, PathBuf::from(&c.eval_root)));
        c.frames = frames.display().to_string();
        c.predictions = or(&self.predictions, out.join("predictions"));
        c.trajectory = or(&self.trajectory, frames.join("trajectory.txt"));
        c.intrinsics = or(&self.intrinsics, frames.join("intrinsics.txt"));
        c
    }

    pub fn dataset_spec(&self, root: PathBuf) -> DatasetSpec {
        DatasetSpec {
            root,
            modality: self.modality,
            class_count: self.class_count,
            ignore_index: self.ignore_index.unwrap_or(0),
        }
    }

    pub fn toy(&self) -> Result<ToySceneConfig> {
        let toy = ToySceneConfig {
            height: self.toy_height,
            width: self.toy_width,
            objects_per_scene: (self.toy_objects_min, self.toy_objects_max),
            clutter_probability: self.toy_clutter_probability,
            material_jitter: self.toy_material_jitter,
            min_class_diversity: self.toy_min_class_diversity,
            dominance_cap: self.toy_dominance_cap,
            shift: DomainShift {
                hue_rotation_deg: self.shift_hue_rotation_deg,
                brightness_scale: self.shift_brightness_scale,
                noise_sigma: self.shift_noise_sigma,
                texture_amplitude: self.shift_texture_amplitude,
                depth_noise: self.shift_depth_noise,
                depth_hole_rate: self.shift_depth_hole_rate,
            },
            seed: self.seed,
            ..ToySceneConfig::default()
        };
        if toy.class_count != self.class_count {
            bail!("the toy generator has {} classes, config asks for {}", toy.class_count, self.class_count);
        }
        toy.validate()?;
        Ok(toy)
    }

    pub fn noise(&self) -> NoisePolicy {
        NoisePolicy {
            p_gaussian: self.noise_p_gaussian,
            p_salt_pepper: self.noise_p_salt_pepper,
            p_blur: self.noise_p_blur,
            p_bilateral: self.noise_p_bilateral,
            gaussian_sigma: self.noise_gaussian_sigma,
            salt_pepper_rate: self.noise_salt_pepper_rate,
            blur_kernel: (self.noise_blur_kernel, self.noise_blur_kernel),
            bilateral_sigma_spatial: self.noise_bilateral_sigma_spatial,
            bilateral_sigma_range: self.noise_bilateral_sigma_range,
            apply_to_depth: self.noise_apply_to_depth,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            pretrain_iterations: self.pretrain_iterations,
            batch_size: self.batch_size,
            adam_lr: self.adam_lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adapt_iterations: self.adapt_iterations,
            adapt_batch_size: self.adapt_batch_size,
            sgd_lr: self.sgd_lr,
            disc_lr: self.disc_lr,
            adversarial_weight: self.adversarial_weight,
            class_weights: self.class_weights.clone(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            modality: self.modality,
            max_depth: self.max_depth,
            ignore_index: self.ignore_index,
            noise: self.noise(),
            augment: AugmentPolicy {
                crop: (self.crop_height, self.crop_width),
                gamma_range: (self.gamma_min, self.gamma_max),
                gamma_probability: self.gamma_probability,
                flip_probability: self.flip_probability,
            },
        };
        cfg.validate(self.class_count)?;
        Ok(cfg)
    }

    pub fn segnet(&self) -> SegNetConfig {
        let c = self.modality.channels();
        match self.profile {
            Profile::Full => SegNetConfig::full(c, self.class_count),
            Profile::Desk => SegNetConfig::desk_for_size(c, self.class_count, self.crop_height.min(self.crop_width)),
        }
    }

    pub fn disc(&self) -> DiscConfig {
        match self.profile {
            Profile::Full => DiscConfig::full(),
            Profile::Desk => DiscConfig::desk_for_size(self.crop_height.min(self.crop_width)),
        }
    }

    pub fn fusion(&self) -> FusionParams {
        FusionParams {
            window: self.fusion_window,
            voxel_size: self.voxel_size,
            max_range: self.fusion_max_range,
            ignore: self.ignore_index.map(|i| i as u8),
        }
    }
}
