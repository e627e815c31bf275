//! Run configuration in a flat `key = value` text format with dotted keys.
//!
//! Resolution order: defaults, then the `preset` key (which only sets the
//! encoder shape), then the remaining keys of the file, then overrides.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::ColorJitter;
use crate::dataset::sha256_hex;
use crate::decoder::DecoderConfig;
use crate::encoder::ScalePreset;
use crate::error::{Error, Result};
use crate::geometry::GroupNorm;
use crate::losses::TargetNorm;
use crate::model::{ModelConfig, TokenizerConfig};
use crate::optim::{AdamConfig, Schedule};
use crate::synthdata::SceneConfig;

pub const PRETRAIN_BUDGET: usize = 96;
pub const DISTILL_BUDGET: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Visible tokens per sample; `None` picks the mode default.
    pub budget: Option<usize>,
    pub alpha: f64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub color_jitter: bool,
    pub jitter: ColorJitter,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                total_steps: 5000,
                ..Schedule::default()
            },
            adam: AdamConfig::default(),
            grad_clip: 0.1,
            batch_size: 8,
            budget: None,
            alpha: 1.0,
            checkpoint_every: 500,
            color_jitter: true,
            jitter: ColorJitter::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub teacher: Option<PathBuf>,
    pub beta: f64,
    pub delta: f64,
    pub bottom: bool,
    pub middle: bool,
    pub top: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            beta: 1.0,
            delta: 1.0,
            bottom: true,
            middle: true,
            top: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub cloud_points: usize,
    pub hfov_deg: f64,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            cloud_points: 8192,
            hfov_deg: 55.0,
            max_objects: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub preset: Option<ScalePreset>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Some(ScalePreset::Small),
            model: ModelConfig {
                tokenizer: TokenizerConfig::default(),
                encoder: ScalePreset::Small.encoder(),
                decoder: DecoderConfig::default(),
                target_norm: TargetNorm::default(),
            },
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Config {
    /// Small model used by tests and quick runs: 16×16 images with 8×8
    /// patches and 4 point groups (12 tokens), a 16-wide two-block encoder
    /// and a one-block decoder.
    pub fn micro() -> Self {
        let mut c = Self {
            preset: Some(ScalePreset::Micro),
            ..Self::default()
        };
        c.model.encoder = ScalePreset::Micro.encoder();
        c.model.tokenizer = TokenizerConfig {
            image_height: 16,
            image_width: 16,
            patch: 8,
            groups: 4,
            k: 7,
            point_hidden: vec![16],
            ..TokenizerConfig::default()
        };
        c.model.decoder = DecoderConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            ..DecoderConfig::default()
        };
        c.train.schedule = Schedule {
            peak_lr: 1e-2,
            min_lr: 1e-4,
            warmup_steps: 20,
            total_steps: 500,
        };
        c.train.batch_size = 4;
        c.train.budget = Some(4);
        c.train.checkpoint_every = 100;
        c.train.color_jitter = false;
        c.data.cloud_points = 64;
        c
    }

    /// Applies one key; unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.model.tokenizer;
        let e = &mut self.model.encoder;
        let d = &mut self.model.decoder;
        let tr = &mut self.train;
        let ds = &mut self.distill;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "preset" => {
                if v == "none" {
                    self.preset = None;
                } else {
                    let p = ScalePreset::parse(v)
                        .ok_or_else(|| Error::Config(format!("unknown preset `{v}`")))?;
                    self.preset = Some(p);
                    *e = p.encoder();
                }
            }
            "image.height" => t.image_height = parse(key, v)?,
            "image.width" => t.image_width = parse(key, v)?,
            "image.patch" => t.patch = parse(key, v)?,
            "points.groups" => t.groups = parse(key, v)?,
            "points.k" => t.k = parse(key, v)?,
            "points.hidden" => {
                t.point_hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "points.norm" => {
                t.group_norm = match v {
                    "max_norm" => GroupNorm::MaxNorm,
                    "axis_std" => GroupNorm::AxisStd,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "points.random_start" => t.fps_random_start = parse_bool(key, v)?,
            "depth.normalize" => t.depth.normalize = parse_bool(key, v)?,
            "depth.d_max" => t.depth.d_max = parse(key, v)?,
            "encoder.dim" => e.dim = parse(key, v)?,
            "encoder.depth" => e.depth = parse(key, v)?,
            "encoder.heads" => e.heads = parse(key, v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, v)?,
            "encoder.layerscale" => e.layerscale = parse_bool(key, v)?,
            "encoder.layerscale_init" => e.layerscale_init = parse(key, v)?,
            "decoder.dim" => d.dim = parse(key, v)?,
            "decoder.depth" => d.depth = parse(key, v)?,
            "decoder.heads" => d.heads = parse(key, v)?,
            "decoder.mlp_ratio" => d.mlp_ratio = parse(key, v)?,
            "decoder.shared_mask_token" => d.shared_mask_token = parse_bool(key, v)?,
            "loss.target_norm" => {
                self.model.target_norm = match v {
                    "standardize" => TargetNorm::Standardize,
                    "unit_norm" => TargetNorm::UnitNorm,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "train.peak_lr" => tr.schedule.peak_lr = parse(key, v)?,
            "train.min_lr" => tr.schedule.min_lr = parse(key, v)?,
            "train.warmup_steps" => tr.schedule.warmup_steps = parse(key, v)?,
            "train.total_steps" => tr.schedule.total_steps = parse(key, v)?,
            "train.weight_decay" => tr.adam.weight_decay = parse(key, v)?,
            "train.adam_beta1" => tr.adam.beta1 = parse(key, v)?,
            "train.adam_beta2" => tr.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => tr.adam.eps = parse(key, v)?,
            "train.grad_clip" => tr.grad_clip = parse(key, v)?,
            "train.batch_size" => tr.batch_size = parse(key, v)?,
            "train.budget" => {
                tr.budget = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "train.alpha" => tr.alpha = parse(key, v)?,
            "train.checkpoint_every" => tr.checkpoint_every = parse(key, v)?,
            "train.color_jitter" => tr.color_jitter = parse_bool(key, v)?,
            "train.jitter_brightness" => tr.jitter.brightness = parse(key, v)?,
            "train.jitter_contrast" => tr.jitter.contrast = parse(key, v)?,
            "train.jitter_saturation" => tr.jitter.saturation = parse(key, v)?,
            "train.jitter_hue" => tr.jitter.hue = parse(key, v)?,
            "distill.teacher" => {
                ds.teacher = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "distill.beta" => ds.beta = parse(key, v)?,
            "distill.delta" => ds.delta = parse(key, v)?,
            "distill.bottom" => ds.bottom = parse_bool(key, v)?,
            "distill.middle" => ds.middle = parse_bool(key, v)?,
            "distill.top" => ds.top = parse_bool(key, v)?,
            "data.dir" => self.data.dir = PathBuf::from(v),
            "data.cloud_points" => self.data.cloud_points = parse(key, v)?,
            "data.hfov" => self.data.hfov_deg = parse(key, v)?,
            "data.max_objects" => self.data.max_objects = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Builds a config from optional file text and overrides. A `preset` in
    /// the overrides takes precedence over one in the file and is applied
    /// before any other key. The `micro` preset replaces the whole base
    /// config with [`Config::micro`]; the others only set the encoder.
    pub fn resolve(base: Self, file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let file_pairs = file.map(parse_pairs).transpose()?.unwrap_or_default();
        let mut cfg = base;
        let preset = overrides
            .iter()
            .rev()
            .chain(file_pairs.iter().rev())
            .find(|(k, _)| k == "preset")
            .cloned();
        if let Some((k, v)) = &preset {
            if ScalePreset::parse(v) == Some(ScalePreset::Micro) {
                cfg = Self::micro();
            } else {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in file_pairs.iter().chain(overrides).filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::resolve(Self::default(), text.as_deref(), overrides)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(Self::default(), Some(text), &[])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.schedule.validate()?;
        let tr = &self.train;
        if !(tr.grad_clip > 0.0) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        if tr.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(tr.alpha > 0.0 && tr.alpha.is_finite()) {
            return Err(Error::Config("train.alpha must be positive".into()));
        }
        let capacity: usize = self.model.tokenizer.sizes().iter().sum();
        if let Some(b) = tr.budget {
            if b == 0 || b > capacity {
                return Err(Error::Config(format!(
                    "train.budget {b} must be between 1 and the {capacity} available tokens"
                )));
            }
        }
        if self.data.cloud_points < self.model.tokenizer.groups.max(self.model.tokenizer.k + 1) {
            return Err(Error::Config(format!(
                "data.cloud_points {} is too small for {} groups of {} points",
                self.data.cloud_points,
                self.model.tokenizer.groups,
                self.model.tokenizer.k + 1
            )));
        }
        Ok(())
    }

    /// Visible-token budget for pretraining or distillation.
    pub fn budget(&self, distill: bool) -> usize {
        self.train
            .budget
            .unwrap_or(if distill { DISTILL_BUDGET } else { PRETRAIN_BUDGET })
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.model.tokenizer.image_height,
            width: self.model.tokenizer.image_width,
            hfov_deg: self.data.hfov_deg,
            max_objects: self.data.max_objects,
            d_max: self.model.tokenizer.depth.d_max,
            cloud_points: self.data.cloud_points,
        }
    }

    /// Every key with its effective value; parsing the result reproduces
    /// this config.
    pub fn to_text(&self) -> String {
        let t = &self.model.tokenizer;
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let tr = &self.train;
        let ds = &self.distill;
        let hidden: Vec<String> = t.point_hidden.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("preset", self.preset.map_or("none", |p| p.name()).to_string());
        put("image.height", t.image_height.to_string());
        put("image.width", t.image_width.to_string());
        put("image.patch", t.patch.to_string());
        put("points.groups", t.groups.to_string());
        put("points.k", t.k.to_string());
        put("points.hidden", hidden.join(","));
        put(
            "points.norm",
            match t.group_norm {
                GroupNorm::MaxNorm => "max_norm",
                GroupNorm::AxisStd => "axis_std",
            }
            .into(),
        );
        put("points.random_start", t.fps_random_start.to_string());
        put("depth.normalize", t.depth.normalize.to_string());
        put("depth.d_max", t.depth.d_max.to_string());
        put("encoder.dim", e.dim.to_string());
        put("encoder.depth", e.depth.to_string());
        put("encoder.heads", e.heads.to_string());
        put("encoder.mlp_ratio", e.mlp_ratio.to_string());
        put("encoder.layerscale", e.layerscale.to_string());
        put("encoder.layerscale_init", e.layerscale_init.to_string());
        put("decoder.dim", d.dim.to_string());
        put("decoder.depth", d.depth.to_string());
        put("decoder.heads", d.heads.to_string());
        put("decoder.mlp_ratio", d.mlp_ratio.to_string());
        put("decoder.shared_mask_token", d.shared_mask_token.to_string());
        put(
            "loss.target_norm",
            match self.model.target_norm {
                TargetNorm::Standardize => "standardize",
                TargetNorm::UnitNorm => "unit_norm",
            }
            .into(),
        );
        put("train.peak_lr", tr.schedule.peak_lr.to_string());
        put("train.min_lr", tr.schedule.min_lr.to_string());
        put("train.warmup_steps", tr.schedule.warmup_steps.to_string());
        put("train.total_steps", tr.schedule.total_steps.to_string());
        put("train.weight_decay", tr.adam.weight_decay.to_string());
        put("train.adam_beta1", tr.adam.beta1.to_string());
        put("train.adam_beta2", tr.adam.beta2.to_string());
        put("train.adam_eps", tr.adam.eps.to_string());
        put("train.grad_clip", tr.grad_clip.to_string());
        put("train.batch_size", tr.batch_size.to_string());
        put("train.budget", tr.budget.map_or("auto".into(), |b| b.to_string()));
        put("train.alpha", tr.alpha.to_string());
        put("train.checkpoint_every", tr.checkpoint_every.to_string());
        put("train.color_jitter", tr.color_jitter.to_string());
        put("train.jitter_brightness", tr.jitter.brightness.to_string());
        put("train.jitter_contrast", tr.jitter.contrast.to_string());
        put("train.jitter_saturation", tr.jitter.saturation.to_string());
        put("train.jitter_hue", tr.jitter.hue.to_string());
        put(
            "distill.teacher",
            ds.teacher.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        put("distill.beta", ds.beta.to_string());
        put("distill.delta", ds.delta.to_string());
        put("distill.bottom", ds.bottom.to_string());
        put("distill.middle", ds.middle.to_string());
        put("distill.top", ds.top.to_string());
        put("data.dir", self.data.dir.display().to_string());
        put("data.cloud_points", self.data.cloud_points.to_string());
        put("data.hfov", self.data.hfov_deg.to_string());
        put("data.max_objects", self.data.max_objects.to_string());
        s
    }

    /// SHA-256 of [`Config::to_text`].
    pub fn digest(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn text_round_trip() {
        for cfg in [Config::default(), Config::micro()] {
            assert_eq!(Config::from_text(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(Config::from_text("encoder.width = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_and_preset_goes_first() {
        let file = "encoder.depth = 3\npreset = base\n";
        let cfg = Config::resolve(Config::default(), Some(file), &ov(&[("encoder.heads", "4")])).unwrap();
        assert_eq!((cfg.model.encoder.dim, cfg.model.encoder.depth, cfg.model.encoder.heads), (768, 3, 4));
        let cfg = Config::resolve(Config::default(), Some(file), &ov(&[("preset", "large")])).unwrap();
        assert_eq!((cfg.model.encoder.dim, cfg.model.encoder.depth), (1024, 3));
    }

    #[test]
    fn micro_preset_resets_everything() {
        let cfg = Config::resolve(Config::default(), Some("preset = micro\nseed = 4\n"), &[]).unwrap();
        assert_eq!(cfg.model, Config::micro().model);
        assert_eq!((cfg.seed, cfg.train.schedule.warmup_steps), (4, 20));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::from_text("# run\n\nseed = 9  # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn budget_defaults_follow_mode() {
        let cfg = Config::default();
        assert_eq!((cfg.budget(false), cfg.budget(true)), (96, 60));
    }

    #[test]
    fn invalid_values() {
        assert!(Config::from_text("train.batch_size = 0").is_err());
        assert!(Config::from_text("train.warmup_steps = 9000").is_err());
        assert!(Config::from_text("depth.normalize = maybe").is_err());
        assert!(parse_override("novalue").is_err());
    }
}
