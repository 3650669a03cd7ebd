//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::Level;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{DiscriminatorConfig, ModelConfig, MotionRepr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub level: Level,
    pub clip_seconds: f64,
    pub batch_size: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient norm clip; 0 disables it.
    pub grad_clip: f64,
    pub finetune_lr: f64,
    pub finetune_steps: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub sigma: f64,
    pub width_div: usize,
    pub disc_width_div: usize,
    pub motion: MotionRepr,
    /// Length of the decoded crop used by the waveform and mel losses;
    /// 0 decodes the full clip.
    pub wave_crop_seconds: f64,
    /// Draw clips at random offsets inside songs instead of the fixed grid.
    pub random_offsets: bool,
    /// Metric records kept in the checkpoint.
    pub log_tail: usize,
    pub no_motion: bool,
    pub no_visual: bool,
    pub d_layers: usize,
    pub no_scaling: bool,
    pub no_reshape: bool,
    pub no_finetune: bool,
    pub disable_fm: bool,
    pub disable_code: bool,
    pub disable_wav: bool,
    pub disable_mel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            level: Level::High,
            clip_seconds: 2.0,
            batch_size: 16,
            g_lr: 1e-4,
            d_lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            grad_clip: 10.0,
            finetune_lr: 1e-5,
            finetune_steps: 100,
            max_steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            sigma: 100.0,
            width_div: 1,
            disc_width_div: 1,
            motion: MotionRepr::Keypoints2d,
            wave_crop_seconds: 0.0,
            random_offsets: false,
            log_tail: 100,
            no_motion: false,
            no_visual: false,
            d_layers: 3,
            no_scaling: false,
            no_reshape: false,
            no_finetune: false,
            disable_fm: false,
            disable_code: false,
            disable_wav: false,
            disable_mel: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

/// Every key accepted by [`TrainConfig::set`].
pub const TRAIN_KEYS: &[&str] = &[
    "level",
    "clip_seconds",
    "batch_size",
    "g_lr",
    "d_lr",
    "beta1",
    "beta2",
    "grad_clip",
    "finetune_lr",
    "finetune_steps",
    "max_steps",
    "seed",
    "lambda_fm",
    "lambda_code",
    "lambda_wav",
    "lambda_mel",
    "sigma",
    "width_div",
    "disc_width_div",
    "motion",
    "wave_crop_seconds",
    "random_offsets",
    "log_tail",
    "no_motion",
    "no_visual",
    "d_layers",
    "no_scaling",
    "no_reshape",
    "no_finetune",
    "disable_fm",
    "disable_code",
    "disable_wav",
    "disable_mel",
];

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "level" => self.level = v.parse()?,
            "clip_seconds" => self.clip_seconds = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "g_lr" => self.g_lr = parse(key, v)?,
            "d_lr" => self.d_lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "finetune_lr" => self.finetune_lr = parse(key, v)?,
            "finetune_steps" => self.finetune_steps = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "lambda_fm" => self.weights.fm = parse(key, v)?,
            "lambda_code" => self.weights.code = parse(key, v)?,
            "lambda_wav" => self.weights.wav = parse(key, v)?,
            "lambda_mel" => self.weights.mel = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "width_div" => self.width_div = parse(key, v)?,
            "disc_width_div" => self.disc_width_div = parse(key, v)?,
            "motion" => {
                self.motion = match v {
                    "keypoints2d" => MotionRepr::Keypoints2d,
                    "smpl" => MotionRepr::Smpl,
                    _ => return Err(Error::Config(format!("unknown motion representation {v:?}"))),
                }
            }
            "wave_crop_seconds" => self.wave_crop_seconds = parse(key, v)?,
            "random_offsets" => self.random_offsets = parse_bool(key, v)?,
            "log_tail" => self.log_tail = parse(key, v)?,
            "no_motion" => self.no_motion = parse_bool(key, v)?,
            "no_visual" => self.no_visual = parse_bool(key, v)?,
            "d_layers" => self.d_layers = parse(key, v)?,
            "no_scaling" => self.no_scaling = parse_bool(key, v)?,
            "no_reshape" => self.no_reshape = parse_bool(key, v)?,
            "no_finetune" => self.no_finetune = parse_bool(key, v)?,
            "disable_fm" => self.disable_fm = parse_bool(key, v)?,
            "disable_code" => self.disable_code = parse_bool(key, v)?,
            "disable_wav" => self.disable_wav = parse_bool(key, v)?,
            "disable_mel" => self.disable_mel = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clip_seconds", self.clip_seconds),
            ("g_lr", self.g_lr),
            ("d_lr", self.d_lr),
            ("finetune_lr", self.finetune_lr),
            ("sigma", self.sigma),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.width_div == 0 || self.disc_width_div == 0 {
            return Err(Error::Config("batch_size, width_div and disc_width_div must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(1..=3).contains(&self.d_layers) {
            return Err(Error::Config(format!("d_layers must be 1, 2 or 3, got {}", self.d_layers)));
        }
        if !(self.wave_crop_seconds >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("wave_crop_seconds and grad_clip must be non-negative".into()));
        }
        self.weights.validate()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Output bound of the generator; 1 with scaling disabled.
    pub fn effective_sigma(&self) -> f64 {
        if self.no_scaling {
            1.0
        } else {
            self.sigma
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            level: self.level,
            sigma: self.effective_sigma(),
            width_div: self.width_div,
            motion: self.motion,
            no_motion: self.no_motion,
            no_visual: self.no_visual,
            seed: self.seed,
        }
    }

    pub fn disc_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            seed: self.seed.wrapping_add(1),
            ..DiscriminatorConfig::for_vq(self.disc_width_div, self.d_layers, !self.no_reshape)
        }
    }

    /// Samples per training clip.
    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * crate::audio::SAMPLE_RATE as f64).round() as usize
    }

    /// Generated steps per clip.
    pub fn target_len(&self) -> usize {
        self.level.codes_for(self.clip_samples())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let motion = match self.motion {
            MotionRepr::Keypoints2d => "keypoints2d",
            MotionRepr::Smpl => "smpl",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("level", self.level.to_string()),
            ("clip_seconds", self.clip_seconds.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("g_lr", self.g_lr.to_string()),
            ("d_lr", self.d_lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda_fm", w.fm.to_string()),
            ("lambda_code", w.code.to_string()),
            ("lambda_wav", w.wav.to_string()),
            ("lambda_mel", w.mel.to_string()),
            ("sigma", self.sigma.to_string()),
            ("width_div", self.width_div.to_string()),
            ("disc_width_div", self.disc_width_div.to_string()),
            ("motion", motion.to_string()),
            ("wave_crop_seconds", self.wave_crop_seconds.to_string()),
            ("random_offsets", self.random_offsets.to_string()),
            ("log_tail", self.log_tail.to_string()),
            ("no_motion", self.no_motion.to_string()),
            ("no_visual", self.no_visual.to_string()),
            ("d_layers", self.d_layers.to_string()),
            ("no_scaling", self.no_scaling.to_string()),
            ("no_reshape", self.no_reshape.to_string()),
            ("no_finetune", self.no_finetune.to_string()),
            ("disable_fm", self.disable_fm.to_string()),
            ("disable_code", self.disable_code.to_string()),
            ("disable_wav", self.disable_wav.to_string()),
            ("disable_mel", self.disable_mel.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
