//! Run configuration as flat `key = value` text. Unknown keys are errors and
//! every run writes the fully resolved file next to its outputs.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::SamplerConfig;
use crate::error::{Result, VistaError};
use crate::model::ModelConfig;
use crate::param::AdamW;
use crate::story::{GenerationConfig, HistoryMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub dim: usize,
    pub fusion_blocks: usize,
    pub adapter_copy_base: bool,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub train_stories: usize,
    pub test_stories: usize,
    pub frames: usize,

    pub stage0_steps: usize,
    pub stage0_batch: usize,
    pub stage0_lr: f64,
    pub stage1_steps: usize,
    pub stage1_batch: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_batch: usize,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    pub cfg_drop: f64,
    pub warmup: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,

    pub lambda: f64,
    pub history_mode: HistoryMode,
    pub sampler_steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub sample_seed: u64,
    pub gen_batch: usize,
    pub eval_stories: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 64,
            fusion_blocks: 4,
            adapter_copy_base: true,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            train_stories: 2000,
            test_stories: 200,
            frames: 8,
            stage0_steps: 2000,
            stage0_batch: 64,
            stage0_lr: 1e-3,
            stage1_steps: 5000,
            stage1_batch: 16,
            stage1_lr: 1e-3,
            stage2_steps: 5000,
            stage2_batch: 16,
            stage2_lr: 1e-4,
            weight_decay: 0.01,
            cfg_drop: 0.1,
            warmup: 100,
            log_every: 100,
            checkpoint_every: 1000,
            lambda: 0.5,
            history_mode: HistoryMode::Salient,
            sampler_steps: 50,
            guidance: 5.0,
            eta: 0.0,
            sample_seed: 0,
            gen_batch: 16,
            eval_stories: 50,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| VistaError::Config(format!("invalid value `{v}` for `{key}`")))
}

macro_rules! fields {
    ($($name:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($name)),*];

        impl Config {
            /// Set one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    "history_mode" => self.history_mode = HistoryMode::parse(value)?,
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    other => return Err(VistaError::Config(format!("unknown config key `{other}`"))),
                }
                Ok(())
            }

            /// Canonical text form: every key, fixed order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($name), self.$name);)*
                let _ = writeln!(s, "history_mode = {}", self.history_mode.name());
                s
            }
        }
    };
}

fields!(
    seed,
    dim,
    fusion_blocks,
    adapter_copy_base,
    timesteps,
    beta_start,
    beta_end,
    train_stories,
    test_stories,
    frames,
    stage0_steps,
    stage0_batch,
    stage0_lr,
    stage1_steps,
    stage1_batch,
    stage1_lr,
    stage2_steps,
    stage2_batch,
    stage2_lr,
    weight_decay,
    cfg_drop,
    warmup,
    log_every,
    checkpoint_every,
    lambda,
    sampler_steps,
    guidance,
    eta,
    sample_seed,
    gen_batch,
    eval_stories,
);

impl Config {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().copied().chain(std::iter::once("history_mode"))
    }

    /// Defaults overridden by the lines of `text`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| VistaError::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| VistaError::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Apply `key=value` overrides, e.g. from the command line.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| VistaError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VistaError::Config(m.into()));
        if self.dim == 0 || self.fusion_blocks == 0 {
            return bad("dim and fusion_blocks must be positive");
        }
        if self.frames < 2 {
            return bad("stories need at least two frames");
        }
        if self.sampler_steps == 0 || self.sampler_steps > self.timesteps {
            return bad("sampler_steps must be in 1..=timesteps");
        }
        if self.guidance < 0.0 {
            return bad("guidance must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.cfg_drop) {
            return bad("cfg_drop must be a probability");
        }
        if self.stage0_batch < 2 || self.stage1_batch == 0 || self.stage2_batch == 0 || self.gen_batch == 0 {
            return bad("batch sizes must be positive (stage0 needs two)");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            fusion_blocks: self.fusion_blocks,
            adapter_copy_base: self.adapter_copy_base,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler_steps,
            guidance: self.guidance,
            eta: self.eta,
            seed: self.sample_seed,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            lambda: self.lambda,
            mode: self.history_mode,
            sampler: self.sampler(),
            batch: self.gen_batch,
        }
    }

    pub fn adamw(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert_eq!(Config::keys().count(), c.to_text().lines().count());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = Config::parse("# run\nlambda = 0.25\n\nhistory_mode = all-mean  # ablation\nadapter_copy_base=false\n").unwrap();
        assert_eq!(c.lambda, 0.25);
        assert_eq!(c.history_mode, HistoryMode::AllMean);
        assert!(!c.adapter_copy_base);
        assert_eq!(c.guidance, 5.0);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let e = Config::parse("lamda = 0.5").unwrap_err();
        assert!(matches!(e, VistaError::Config(_)));
        assert!(e.to_string().contains("lamda"));
        assert!(Config::parse("lambda 0.5").is_err());
        assert!(Config::parse("dim = sixty").is_err());
        assert!(Config::parse("sampler_steps = 2000").is_err());
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn overrides_and_hash() {
        let base = Config::default();
        let c = base.clone().with_overrides(&["stage2_steps=10".into()]).unwrap();
        assert_eq!(c.stage2_steps, 10);
        assert_ne!(c.hash(), base.hash());
        assert!(base.clone().with_overrides(&["nope".into()]).is_err());
    }
}
