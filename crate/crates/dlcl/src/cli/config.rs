//! Flat run configuration: defaults < preset < file < env < flags.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{AggregationMode, ModelConfig, NormPlacement};
use crate::train::{AdamConfig, SchedulerConfig, TaskKind, TaskSpec, TrainOptions};

/// Every runtime knob as one flat key/value namespace. Config files are flat
/// JSON objects over the same keys; CLI flags mirror the keys with a `--`
/// prefix; `DLCL_SEED` overrides the seed between file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub norm: NormPlacement,
    pub aggregation: AggregationMode,
    pub residual_dropout: f64,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    pub label_smoothing: f64,
    pub lr_max: f64,
    pub lr_init: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub accumulation: usize,
    pub batch_tokens: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub target_accuracy: f64,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Copy,
            vocab_size: 16,
            min_len: 4,
            max_len: 12,
            encoder_depth: 6,
            decoder_depth: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            norm: NormPlacement::PreNorm,
            aggregation: AggregationMode::Standard,
            residual_dropout: 0.1,
            attn_dropout: 0.1,
            ffn_dropout: 0.1,
            label_smoothing: 0.1,
            lr_max: 1e-3,
            lr_init: 1e-7,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.997,
            adam_eps: 1e-8,
            steps: 500,
            accumulation: 1,
            batch_tokens: 256,
            checkpoint_every: 200,
            eval_every: 25,
            target_accuracy: 0.0,
            seed: 1,
            out_dir: "runs/out".into(),
        }
    }
}

/// All known configuration keys, in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "task",
    "vocab_size",
    "min_len",
    "max_len",
    "encoder_depth",
    "decoder_depth",
    "d_model",
    "d_ff",
    "heads",
    "norm",
    "aggregation",
    "residual_dropout",
    "attn_dropout",
    "ffn_dropout",
    "label_smoothing",
    "lr_max",
    "lr_init",
    "warmup",
    "beta1",
    "beta2",
    "adam_eps",
    "steps",
    "accumulation",
    "batch_tokens",
    "checkpoint_every",
    "eval_every",
    "target_accuracy",
    "seed",
    "out_dir",
];

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Config(format!("key '{key}' expects a non-negative integer, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("key '{key}' expects a non-negative integer, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("key '{key}' expects a number, got {v}")))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("key '{key}' expects a string, got {v}")))
}

impl RunConfig {
    /// Applies one key/value pair; unknown keys are rejected by name.
    pub fn apply_kv(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "task" => self.task = TaskKind::parse(as_str(key, v)?)?,
            "vocab_size" => self.vocab_size = as_usize(key, v)?,
            "min_len" => self.min_len = as_usize(key, v)?,
            "max_len" => self.max_len = as_usize(key, v)?,
            "encoder_depth" => self.encoder_depth = as_usize(key, v)?,
            "decoder_depth" => self.decoder_depth = as_usize(key, v)?,
            "d_model" => self.d_model = as_usize(key, v)?,
            "d_ff" => self.d_ff = as_usize(key, v)?,
            "heads" => self.heads = as_usize(key, v)?,
            "norm" => self.norm = NormPlacement::parse(as_str(key, v)?)?,
            "aggregation" => self.aggregation = AggregationMode::parse(as_str(key, v)?)?,
            "residual_dropout" => self.residual_dropout = as_f64(key, v)?,
            "attn_dropout" => self.attn_dropout = as_f64(key, v)?,
            "ffn_dropout" => self.ffn_dropout = as_f64(key, v)?,
            "label_smoothing" => self.label_smoothing = as_f64(key, v)?,
            "lr_max" => self.lr_max = as_f64(key, v)?,
            "lr_init" => self.lr_init = as_f64(key, v)?,
            "warmup" => self.warmup = as_usize(key, v)?,
            "beta1" => self.beta1 = as_f64(key, v)?,
            "beta2" => self.beta2 = as_f64(key, v)?,
            "adam_eps" => self.adam_eps = as_f64(key, v)?,
            "steps" => self.steps = as_usize(key, v)?,
            "accumulation" => self.accumulation = as_usize(key, v)?,
            "batch_tokens" => self.batch_tokens = as_usize(key, v)?,
            "checkpoint_every" => self.checkpoint_every = as_usize(key, v)?,
            "eval_every" => self.eval_every = as_usize(key, v)?,
            "target_accuracy" => self.target_accuracy = as_f64(key, v)?,
            "seed" => self.seed = as_u64(key, v)?,
            "out_dir" => self.out_dir = as_str(key, v)?.to_string(),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a flat JSON config document.
    pub fn apply_json(&mut self, text: &str) -> Result<()> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config file must hold a flat JSON object".into()))?;
        for (key, v) in obj {
            self.apply_kv(key, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
        self.apply_json(&text)
    }

    /// Full precedence chain: defaults, then preset, file, `DLCL_SEED`, and
    /// finally explicit flag pairs.
    pub fn assemble(
        preset: Option<&str>,
        file: Option<&Path>,
        env_seed: Option<u64>,
        flags: &[(String, Value)],
    ) -> Result<RunConfig> {
        let mut cfg = match preset {
            Some(name) => preset_config(name)?,
            None => RunConfig::default(),
        };
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = env_seed {
            cfg.seed = seed;
        }
        for (key, v) in flags {
            cfg.apply_kv(key, v)?;
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder_depth: self.encoder_depth,
            decoder_depth: self.decoder_depth,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            norm: self.norm,
            aggregation: self.aggregation,
            src_vocab: self.vocab_size,
            tgt_vocab: self.vocab_size,
            residual_dropout: self.residual_dropout,
            attn_dropout: self.attn_dropout,
            ffn_dropout: self.ffn_dropout,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            seed: self.seed,
        }
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            lr_max: self.lr_max,
            warmup: self.warmup,
            lr_init: self.lr_init,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            accumulation: self.accumulation,
            batch_tokens: self.batch_tokens,
            checkpoint_every: self.checkpoint_every,
            eval_every: self.eval_every,
            target_accuracy: (self.target_accuracy > 0.0).then_some(self.target_accuracy),
            seed: self.seed,
        }
    }
}

/// Schedule constants are the full-scale defaults divided by this factor;
/// model widths are desk-scale throughout.
pub const DESK_SCALE_FACTOR: usize = 16;

/// Named configuration bundles. Schedules follow the shallow/deep recipes
/// (post-norm base 7e-4 lr / 4k warmup / beta2 0.98; pre-norm base 1e-3 / 8k
/// / 0.997; deep 2e-3 / 16k / half the updates at twice the batch), scaled
/// down by [`DESK_SCALE_FACTOR`] for desk runs.
pub fn preset_config(name: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    match name {
        "base-postnorm-6L" => {
            cfg.norm = NormPlacement::PostNorm;
            cfg.encoder_depth = 6;
            cfg.lr_max = 7e-4;
            cfg.warmup = 4000 / DESK_SCALE_FACTOR;
            cfg.beta2 = 0.98;
            cfg.attn_dropout = 0.0;
            cfg.ffn_dropout = 0.0;
            cfg.steps = 600;
        }
        "base-prenorm-6L" => {
            cfg.norm = NormPlacement::PreNorm;
            cfg.encoder_depth = 6;
            cfg.lr_max = 1e-3;
            cfg.warmup = 8000 / DESK_SCALE_FACTOR;
            cfg.beta2 = 0.997;
            cfg.steps = 600;
        }
        "deep-postnorm-20L" => {
            cfg.norm = NormPlacement::PostNorm;
            cfg.encoder_depth = 20;
            cfg.lr_max = 2e-3;
            cfg.warmup = 16000 / DESK_SCALE_FACTOR;
            cfg.beta2 = 0.98;
            cfg.attn_dropout = 0.0;
            cfg.ffn_dropout = 0.0;
            cfg.accumulation = 2;
            cfg.steps = 300;
        }
        "deep-prenorm-20L" => {
            cfg.norm = NormPlacement::PreNorm;
            cfg.encoder_depth = 20;
            cfg.lr_max = 2e-3;
            cfg.warmup = 16000 / DESK_SCALE_FACTOR;
            cfg.beta2 = 0.997;
            cfg.accumulation = 2;
            cfg.steps = 300;
        }
        "dlcl-prenorm-12L" => {
            cfg.norm = NormPlacement::PreNorm;
            cfg.aggregation = AggregationMode::DlclLearned;
            cfg.encoder_depth = 12;
            cfg.lr_max = 1e-3;
            cfg.warmup = 4000 / DESK_SCALE_FACTOR;
            cfg.beta2 = 0.997;
            cfg.accumulation = 2;
            cfg.batch_tokens = 128;
            cfg.steps = 2000;
            cfg.residual_dropout = 0.0;
            cfg.attn_dropout = 0.0;
            cfg.ffn_dropout = 0.0;
            cfg.target_accuracy = 0.99;
        }
        "dlcl-postnorm-12L" => {
            cfg.norm = NormPlacement::PostNorm;
            cfg.aggregation = AggregationMode::DlclLearned;
            cfg.encoder_depth = 12;
            cfg.lr_max = 1e-3;
            cfg.warmup = 4000 / DESK_SCALE_FACTOR;
            cfg.beta2 = 0.98;
            cfg.accumulation = 2;
            cfg.batch_tokens = 128;
            cfg.steps = 2000;
            cfg.residual_dropout = 0.0;
            cfg.attn_dropout = 0.0;
            cfg.ffn_dropout = 0.0;
            cfg.target_accuracy = 0.99;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (available: base-postnorm-6L, base-prenorm-6L, deep-postnorm-20L, deep-prenorm-20L, dlcl-prenorm-12L, dlcl-postnorm-12L)"
            )))
        }
    }
    Ok(cfg)
}
