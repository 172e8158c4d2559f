use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Plain Transformer, gates off.
    Pretrain,
    /// Gated finetuning from a trained baseline.
    FinetuneL0drop,
    /// Finetuning with fixed rule-based masks, no penalty.
    FinetunePattern,
    /// Gated training from random initialization.
    ScratchL0drop,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune_l0drop" => Ok(Self::FinetuneL0drop),
            "finetune_pattern" => Ok(Self::FinetunePattern),
            "scratch_l0drop" => Ok(Self::ScratchL0drop),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::FinetuneL0drop => "finetune_l0drop",
            Self::FinetunePattern => "finetune_pattern",
            Self::ScratchL0drop => "scratch_l0drop",
        }
    }

    pub fn gated(self) -> bool {
        matches!(self, Self::FinetuneL0drop | Self::ScratchL0drop)
    }
}

/// Optimization settings plus the model shape, read from one flat
/// `key=value` file. Model keys are the [`ModelConfig`] field names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Steps of the linear ramp from 0 to `lambda`; 0 keeps λ constant.
    pub lambda_warmup_steps: u64,
    pub steps: u64,
    /// Target tokens per batch.
    pub batch_tokens: usize,
    pub warmup: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub log_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            lambda_warmup_steps: 0,
            steps: 1000,
            batch_tokens: 1024,
            warmup: 4000,
            lr_scale: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 1.0,
            seed: 1,
            mode: TrainMode::Pretrain,
            log_every: 100,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        if self.batch_tokens == 0 || self.warmup == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_tokens, warmup and log_every must be positive".into()));
        }
        if !(self.lr_scale > 0.0) || !(self.adam_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("lr_scale and adam_eps must be positive, clip_norm >= 0".into()));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam betas must lie in [0, 1), got {b}")));
            }
        }
        self.model.validate()
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "lambda" => self.lambda = kv::value(key, raw)?,
            "lambda_warmup_steps" => self.lambda_warmup_steps = kv::value(key, raw)?,
            "steps" => self.steps = kv::value(key, raw)?,
            "batch_tokens" => self.batch_tokens = kv::value(key, raw)?,
            "warmup" => self.warmup = kv::value(key, raw)?,
            "lr_scale" => self.lr_scale = kv::value(key, raw)?,
            "adam_beta1" => self.adam_beta1 = kv::value(key, raw)?,
            "adam_beta2" => self.adam_beta2 = kv::value(key, raw)?,
            "adam_eps" => self.adam_eps = kv::value(key, raw)?,
            "clip_norm" => self.clip_norm = kv::value(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            "mode" => self.mode = TrainMode::parse(raw)?,
            "log_every" => self.log_every = kv::value(key, raw)?,
            k if ModelConfig::is_key(k) => self.model.set(k, raw)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&kv::parse(text)?)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = self.model.to_kv();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("lambda", format!("{:?}", self.lambda));
        put("lambda_warmup_steps", self.lambda_warmup_steps.to_string());
        put("steps", self.steps.to_string());
        put("batch_tokens", self.batch_tokens.to_string());
        put("warmup", self.warmup.to_string());
        put("lr_scale", format!("{:?}", self.lr_scale));
        put("adam_beta1", format!("{:?}", self.adam_beta1));
        put("adam_beta2", format!("{:?}", self.adam_beta2));
        put("adam_eps", format!("{:?}", self.adam_eps));
        put("clip_norm", format!("{:?}", self.clip_norm));
        put("seed", self.seed.to_string());
        put("mode", self.mode.name().to_string());
        put("log_every", self.log_every.to_string());
        m
    }
}
