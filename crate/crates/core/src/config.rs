//! Flat `key = value` run configuration with named presets.
//!
//! One setting per line, `#` starts a comment. A `preset` line resets every
//! setting to that preset before the following lines apply.

use std::fmt::Write as _;
use std::path::Path;

use crate::copula::{ClampConfig, CopulaConfig, FlowConfig};
use crate::embedding::EmbedConfig;
use crate::encoder::{GlobalEncoderConfig, PerceiverConfig};
use crate::error::{Error, Result};
use crate::guard::GuardConfig;
use crate::model::{EncoderConfig, ModelConfig, SchedulerConfig};
use crate::scheduler::{PermutationMode, WindowPolicy};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Perceiver,
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub seed: u64,
    pub embed: EmbedConfig,
    pub encoder: EncoderKind,
    pub perceiver: PerceiverConfig,
    pub global: GlobalEncoderConfig,
    pub copula: CopulaConfig,
    pub clamp: ClampConfig,
    pub flow: FlowConfig,
    pub mode: PermutationMode,
    pub window: WindowPolicy,
    pub guard: GuardConfig,
    pub train: TrainConfig,
    pub observed_steps: usize,
    pub predict_steps: usize,
    pub draws: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::table3()
    }
}

impl RunConfig {
    /// Sizes used for the memory-scaling comparison.
    pub fn table3() -> Self {
        RunConfig {
            preset: Some("table3".into()),
            seed: 0,
            embed: EmbedConfig {
                series_embed_dim: 5,
                token_dim: 48,
                input_encoder_layers: 3,
                positional_base: 10_000.0,
                dropout: 0.0,
            },
            encoder: EncoderKind::Perceiver,
            perceiver: PerceiverConfig {
                num_latents: 64,
                latent_dim: 48,
                attention_layers: 3,
                self_heads: 3,
                cross_heads: 3,
                decoder_heads: 3,
                dropout: 0.0,
            },
            global: GlobalEncoderConfig {
                attention_layers: 3,
                heads: 3,
                attention_dim: 16,
                feedforward_dim: 16,
                dropout: 0.0,
            },
            copula: CopulaConfig {
                layers: 3,
                heads: 3,
                attention_dim: 16,
                feedforward_dim: 16,
                feedforward_layers: 3,
                resolution: 50,
            },
            clamp: ClampConfig { u_min: 0.01, u_max: 0.99 },
            flow: FlowConfig {
                layers: 2,
                dim: 8,
                feedforward_layers: 2,
                feedforward_dim: 8,
            },
            mode: PermutationMode::Midpoint,
            window: WindowPolicy::Local(5),
            guard: GuardConfig::default(),
            train: TrainConfig::default(),
            observed_steps: 10,
            predict_steps: 10,
            draws: 100,
        }
    }

    /// Sizes used for the forecasting benchmarks.
    pub fn table4() -> Self {
        RunConfig {
            preset: Some("table4".into()),
            embed: EmbedConfig {
                dropout: 0.01,
                ..Self::table3().embed
            },
            perceiver: PerceiverConfig {
                num_latents: 256,
                latent_dim: 48,
                attention_layers: 2,
                self_heads: 3,
                cross_heads: 3,
                decoder_heads: 3,
                dropout: 0.01,
            },
            global: GlobalEncoderConfig {
                attention_layers: 2,
                heads: 2,
                attention_dim: 24,
                feedforward_dim: 24,
                dropout: 0.01,
            },
            copula: CopulaConfig {
                layers: 1,
                heads: 3,
                attention_dim: 16,
                feedforward_dim: 48,
                feedforward_layers: 1,
                resolution: 20,
            },
            clamp: ClampConfig { u_min: 0.05, u_max: 0.95 },
            flow: FlowConfig {
                layers: 3,
                dim: 16,
                feedforward_layers: 1,
                feedforward_dim: 48,
            },
            train: TrainConfig {
                batch_size: 24,
                ..TrainConfig::default()
            },
            observed_steps: 24,
            predict_steps: 24,
            ..Self::table3()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table3" => Ok(Self::table3()),
            "table4" => Ok(Self::table4()),
            other => Err(Error::Config(vec![format!("unknown preset {other:?}")])),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            embed: self.embed.clone(),
            encoder: match self.encoder {
                EncoderKind::Perceiver => EncoderConfig::Perceiver(self.perceiver.clone()),
                EncoderKind::Global => EncoderConfig::Global(self.global.clone()),
            },
            flow: self.flow.clone(),
            copula: self.copula.clone(),
            clamp: self.clamp,
            scheduler: SchedulerConfig {
                mode: self.mode,
                window: self.window,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::table3();
        cfg.preset = None;
        let mut errors = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected key = value, got {line:?}", ln + 1));
                continue;
            };
            if let Err(e) = cfg.set(k.trim(), v.trim()) {
                errors.push(format!("line {}: {e}", ln + 1));
            }
        }
        if errors.is_empty() {
            cfg.validate()?;
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                bad.push(e.to_string());
            }
        };
        check(self.embed.validate());
        check(self.perceiver.validate());
        check(self.copula.validate());
        check(self.clamp.validate());
        check(self.flow.validate());
        check(self.train.validate());
        if self.guard.enabled {
            check(self.guard.validate());
        }
        if self.draws == 0 {
            bad.push("metrics.draws must be at least 1".into());
        }
        if self.observed_steps == 0 || self.predict_steps == 0 {
            bad.push("task.observed_steps and task.predict_steps must be at least 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Applies one setting. Unknown keys and unparseable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {v:?}")),
            }
        }
        let k_max = match self.mode {
            PermutationMode::MidpointMaxInterval(k) => k,
            _ => 3,
        };
        match key {
            "preset" => {
                *self = RunConfig::preset(value).map_err(|e| e.to_string())?;
            }
            "seed" => self.seed = num(key, value)?,
            "embed.series_dim" => self.embed.series_embed_dim = num(key, value)?,
            "embed.token_dim" => self.embed.token_dim = num(key, value)?,
            "embed.input_layers" => self.embed.input_encoder_layers = num(key, value)?,
            "embed.positional_base" => self.embed.positional_base = num(key, value)?,
            "embed.dropout" => self.embed.dropout = num(key, value)?,
            "encoder.kind" => {
                self.encoder = match value {
                    "perceiver" => EncoderKind::Perceiver,
                    "global" => EncoderKind::Global,
                    _ => return Err(format!("{key}: expected perceiver or global, got {value:?}")),
                }
            }
            "perceiver.latents" => self.perceiver.num_latents = num(key, value)?,
            "perceiver.latent_dim" => self.perceiver.latent_dim = num(key, value)?,
            "perceiver.layers" => self.perceiver.attention_layers = num(key, value)?,
            "perceiver.self_heads" => self.perceiver.self_heads = num(key, value)?,
            "perceiver.cross_heads" => self.perceiver.cross_heads = num(key, value)?,
            "perceiver.decoder_heads" => self.perceiver.decoder_heads = num(key, value)?,
            "perceiver.dropout" => self.perceiver.dropout = num(key, value)?,
            "global.layers" => self.global.attention_layers = num(key, value)?,
            "global.heads" => self.global.heads = num(key, value)?,
            "global.attention_dim" => self.global.attention_dim = num(key, value)?,
            "global.feedforward_dim" => self.global.feedforward_dim = num(key, value)?,
            "global.dropout" => self.global.dropout = num(key, value)?,
            "copula.layers" => self.copula.layers = num(key, value)?,
            "copula.heads" => self.copula.heads = num(key, value)?,
            "copula.attention_dim" => self.copula.attention_dim = num(key, value)?,
            "copula.feedforward_dim" => self.copula.feedforward_dim = num(key, value)?,
            "copula.feedforward_layers" => self.copula.feedforward_layers = num(key, value)?,
            "copula.resolution" => self.copula.resolution = num(key, value)?,
            "copula.u_min" => self.clamp.u_min = num(key, value)?,
            "copula.u_max" => self.clamp.u_max = num(key, value)?,
            "flow.layers" => self.flow.layers = num(key, value)?,
            "flow.dim" => self.flow.dim = num(key, value)?,
            "flow.feedforward_layers" => self.flow.feedforward_layers = num(key, value)?,
            "flow.feedforward_dim" => self.flow.feedforward_dim = num(key, value)?,
            "scheduler.mode" => self.mode = PermutationMode::parse(value, k_max).map_err(|e| e.to_string())?,
            "scheduler.k_max" => {
                let k: usize = num(key, value)?;
                if let PermutationMode::MidpointMaxInterval(_) = self.mode {
                    self.mode = PermutationMode::MidpointMaxInterval(k);
                } else if k != 3 {
                    return Err(format!("{key}: only meaningful with scheduler.mode = midpoint_max_interval"));
                }
            }
            "scheduler.window" => {
                let k = match self.window {
                    WindowPolicy::Local(k) => k,
                    WindowPolicy::Global => 5,
                };
                self.window = match value {
                    "local" => WindowPolicy::Local(k),
                    "global" => WindowPolicy::Global,
                    _ => return Err(format!("{key}: expected local or global, got {value:?}")),
                }
            }
            "scheduler.k" => {
                let k: usize = num(key, value)?;
                if k == 0 {
                    return Err(format!("{key}: must be at least 1"));
                }
                if let WindowPolicy::Local(_) = self.window {
                    self.window = WindowPolicy::Local(k);
                } else if k != 5 {
                    return Err(format!("{key}: only meaningful with scheduler.window = local"));
                }
            }
            "guard.enabled" => self.guard.enabled = flag(key, value)?,
            "guard.probe_draws" => self.guard.probe_draws = num(key, value)?,
            "guard.threshold" => self.guard.threshold_multiplier = num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.batches_per_epoch" => self.train.batches_per_epoch = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.rmsprop_decay" => self.train.rmsprop_decay = num(key, value)?,
            "train.rmsprop_epsilon" => self.train.rmsprop_epsilon = num(key, value)?,
            "train.grad_clip" => {
                self.train.grad_clip = if value == "none" { None } else { Some(num(key, value)?) }
            }
            "train.permutation" => {
                self.train.permutation_mode = PermutationMode::parse(value, 3).map_err(|e| e.to_string())?
            }
            "task.observed_steps" => self.observed_steps = num(key, value)?,
            "task.predict_steps" => self.predict_steps = num(key, value)?,
            "metrics.draws" => self.draws = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every setting, one per line, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("embed.series_dim", self.embed.series_embed_dim.to_string());
        kv("embed.token_dim", self.embed.token_dim.to_string());
        kv("embed.input_layers", self.embed.input_encoder_layers.to_string());
        kv("embed.positional_base", self.embed.positional_base.to_string());
        kv("embed.dropout", self.embed.dropout.to_string());
        kv(
            "encoder.kind",
            match self.encoder {
                EncoderKind::Perceiver => "perceiver",
                EncoderKind::Global => "global",
            }
            .into(),
        );
        let p = &self.perceiver;
        kv("perceiver.latents", p.num_latents.to_string());
        kv("perceiver.latent_dim", p.latent_dim.to_string());
        kv("perceiver.layers", p.attention_layers.to_string());
        kv("perceiver.self_heads", p.self_heads.to_string());
        kv("perceiver.cross_heads", p.cross_heads.to_string());
        kv("perceiver.decoder_heads", p.decoder_heads.to_string());
        kv("perceiver.dropout", p.dropout.to_string());
        let gl = &self.global;
        kv("global.layers", gl.attention_layers.to_string());
        kv("global.heads", gl.heads.to_string());
        kv("global.attention_dim", gl.attention_dim.to_string());
        kv("global.feedforward_dim", gl.feedforward_dim.to_string());
        kv("global.dropout", gl.dropout.to_string());
        let c = &self.copula;
        kv("copula.layers", c.layers.to_string());
        kv("copula.heads", c.heads.to_string());
        kv("copula.attention_dim", c.attention_dim.to_string());
        kv("copula.feedforward_dim", c.feedforward_dim.to_string());
        kv("copula.feedforward_layers", c.feedforward_layers.to_string());
        kv("copula.resolution", c.resolution.to_string());
        kv("copula.u_min", self.clamp.u_min.to_string());
        kv("copula.u_max", self.clamp.u_max.to_string());
        let f = &self.flow;
        kv("flow.layers", f.layers.to_string());
        kv("flow.dim", f.dim.to_string());
        kv("flow.feedforward_layers", f.feedforward_layers.to_string());
        kv("flow.feedforward_dim", f.feedforward_dim.to_string());
        kv("scheduler.mode", self.mode.name().into());
        if let PermutationMode::MidpointMaxInterval(k) = self.mode {
            kv("scheduler.k_max", k.to_string());
        }
        match self.window {
            WindowPolicy::Local(k) => {
                kv("scheduler.window", "local".into());
                kv("scheduler.k", k.to_string());
            }
            WindowPolicy::Global => kv("scheduler.window", "global".into()),
        }
        kv("guard.enabled", self.guard.enabled.to_string());
        kv("guard.probe_draws", self.guard.probe_draws.to_string());
        kv("guard.threshold", self.guard.threshold_multiplier.to_string());
        let t = &self.train;
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batches_per_epoch", t.batches_per_epoch.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.rmsprop_decay", t.rmsprop_decay.to_string());
        kv("train.rmsprop_epsilon", t.rmsprop_epsilon.to_string());
        kv(
            "train.grad_clip",
            t.grad_clip.map_or("none".to_string(), |c| c.to_string()),
        );
        let tp = match t.permutation_mode {
            PermutationMode::MidpointMaxInterval(_) => "midpoint_max_interval",
            m => m.name(),
        };
        kv("train.permutation", tp.into());
        kv("task.observed_steps", self.observed_steps.to_string());
        kv("task.predict_steps", self.predict_steps.to_string());
        kv("metrics.draws", self.draws.to_string());
        s
    }
}
