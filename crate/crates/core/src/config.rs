//! Flat `key = value` run configuration.
//!
//! One grammar covers training, translation, evaluation and data
//! generation: UTF-8 lines of `key = value` with `#` comments. Unknown
//! keys are rejected with the offending line number; later assignments
//! override earlier ones. Two presets ship: `desk` (the default;
//! 16x16 images, a 50-step chain, a 2000-step budget and a learning rate
//! sized for it) and `full` (64x64, 1000-step chain, epoch-driven budget
//! with the reference hyperparameters). The effective configuration is
//! echoed verbatim into every output directory and into checkpoints, and
//! `parse(echo(c)) == c`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fid::Extractor;
use crate::nets::{DenoiserConfig, TranslatorConfig};
use crate::sample::SamplerConfig;
use crate::schedule::{make_linear_schedule, MeanVariant, NoiseSchedule};
use crate::train::{CycleNorm, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // schedule
    pub chain_len: usize,
    pub alpha_first: f64,
    pub alpha_last: f64,
    pub mean_variant: MeanVariant,
    // data
    pub image_size: usize,
    pub channels: usize,
    pub data_root: String,
    // architecture
    pub unet_widths: Vec<usize>,
    pub emb_dim: usize,
    pub translator_width: usize,
    pub translator_blocks: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    // training
    pub lambda_cyc: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
    pub cycle_norm: CycleNorm,
    pub checkpoint_every: usize,
    // sampler
    pub release_time: usize,
    pub record_trajectory: bool,
    // evaluation
    pub extractor: String,
    pub extractor_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk-scale profile: small images, short chain, step-driven budget.
    pub fn desk() -> Self {
        RunConfig {
            chain_len: 50,
            alpha_first: 0.9999,
            alpha_last: 0.98,
            mean_variant: MeanVariant::Standard,
            image_size: 16,
            channels: 1,
            data_root: String::new(),
            unet_widths: vec![32, 64, 128],
            emb_dim: 64,
            translator_width: 32,
            translator_blocks: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-6,
            lambda_cyc: 10.0,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 1,
            steps: 2000,
            seed: 0,
            cycle_norm: CycleNorm::L1,
            checkpoint_every: 500,
            release_time: 1,
            record_trajectory: false,
            extractor: "fixed_random_conv".to_string(),
            extractor_seed: 17,
        }
    }

    /// Full-scale profile with the reference hyperparameters: 64x64
    /// images, a 1000-step chain, 20000 epochs at learning rate 1e-5.
    pub fn full() -> Self {
        RunConfig {
            chain_len: 1000,
            image_size: 64,
            channels: 3,
            unet_widths: vec![32, 64, 128, 256, 512],
            emb_dim: 128,
            translator_width: 64,
            translator_blocks: 5,
            learning_rate: 1e-5,
            epochs: 20_000,
            steps: 0,
            ..RunConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "full" => Ok(RunConfig::full()),
            other => Err(Error::config(format!("unknown preset {other:?} (use desk or full)"))),
        }
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::config(format!("key {key}: cannot parse {value:?}")))
        }
        match key {
            "preset" => *self = RunConfig::preset(value)?,
            "chain_len" => self.chain_len = num(key, value)?,
            "alpha_first" => self.alpha_first = num(key, value)?,
            "alpha_last" => self.alpha_last = num(key, value)?,
            "mean_variant" => {
                self.mean_variant = match value {
                    "standard" => MeanVariant::Standard,
                    "as_printed" => MeanVariant::AsPrinted,
                    other => {
                        return Err(Error::config(format!(
                            "key mean_variant: {other:?} (use standard or as_printed)"
                        )))
                    }
                }
            }
            "image_size" => self.image_size = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "data_root" => self.data_root = value.to_string(),
            "unet_widths" => {
                self.unet_widths = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "emb_dim" => self.emb_dim = num(key, value)?,
            "translator_width" => self.translator_width = num(key, value)?,
            "translator_blocks" => self.translator_blocks = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "bn_eps" => self.bn_eps = num(key, value)?,
            "lambda_cyc" => self.lambda_cyc = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "cycle_norm" => self.cycle_norm = CycleNorm::parse(value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "release_time" => self.release_time = num(key, value)?,
            "record_trajectory" => {
                self.record_trajectory = match value {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(Error::config(format!(
                            "key record_trajectory: {other:?} (use true or false)"
                        )))
                    }
                }
            }
            "extractor" => {
                Extractor::parse(value, 0)?;
                self.extractor = value.to_string();
            }
            "extractor_seed" => self.extractor_seed = num(key, value)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` text on top of the desk preset.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` text on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse_str(&text)
    }

    /// Canonical echo of the effective configuration; parsing it back
    /// reproduces this value exactly.
    pub fn echo(&self) -> String {
        let widths: Vec<String> = self.unet_widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("chain_len", self.chain_len.to_string());
        kv("alpha_first", self.alpha_first.to_string());
        kv("alpha_last", self.alpha_last.to_string());
        kv(
            "mean_variant",
            match self.mean_variant {
                MeanVariant::Standard => "standard".into(),
                MeanVariant::AsPrinted => "as_printed".into(),
            },
        );
        kv("image_size", self.image_size.to_string());
        kv("channels", self.channels.to_string());
        kv("data_root", self.data_root.clone());
        kv("unet_widths", widths.join(","));
        kv("emb_dim", self.emb_dim.to_string());
        kv("translator_width", self.translator_width.to_string());
        kv("translator_blocks", self.translator_blocks.to_string());
        kv("bn_momentum", self.bn_momentum.to_string());
        kv("bn_eps", self.bn_eps.to_string());
        kv("lambda_cyc", self.lambda_cyc.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps", self.steps.to_string());
        kv("seed", self.seed.to_string());
        kv("cycle_norm", self.cycle_norm.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("release_time", self.release_time.to_string());
        kv("record_trajectory", self.record_trajectory.to_string());
        kv("extractor", self.extractor.clone());
        kv("extractor_seed", self.extractor_seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.denoiser_config().validate()?;
        self.translator_config().validate()?;
        self.train_config().validate()?;
        if self.release_time == 0 || self.release_time > self.chain_len {
            return Err(Error::config(format!(
                "release_time {} outside 1..={}",
                self.release_time, self.chain_len
            )));
        }
        let divisor = 1usize << self.unet_widths.len();
        if self.image_size % divisor != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by 2^{} (U-Net depth)",
                self.image_size,
                self.unet_widths.len()
            )));
        }
        Extractor::parse(&self.extractor, self.extractor_seed)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.chain_len, self.alpha_first, self.alpha_last)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.channels,
            widths: self.unet_widths.clone(),
            emb_dim: self.emb_dim,
            max_period: 10_000.0,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    pub fn translator_config(&self) -> TranslatorConfig {
        TranslatorConfig {
            channels: self.channels,
            width: self.translator_width,
            blocks: self.translator_blocks,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_cyc: self.lambda_cyc,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            epochs: self.epochs,
            steps: self.steps,
            chain_len: self.chain_len,
            seed: self.seed,
            cycle_norm: self.cycle_norm,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            release_time: self.release_time,
            chain_len: self.chain_len,
            seed,
            record_trajectory: self.record_trajectory,
            mean_variant: self.mean_variant,
        }
    }

    pub fn fid_extractor(&self) -> Result<Extractor> {
        Extractor::parse(&self.extractor, self.extractor_seed)
    }
}
