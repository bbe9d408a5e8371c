//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; a config file only needs the keys it changes.
//! Lines starting with `#` are comments. [`ExperimentConfig::to_text`]
//! writes every key, so the text is a complete record of a run.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use mvdream_core::agent::AgentConfig;
use mvdream_core::distributions::{CategoricalAveraging, LatentFamily};
use mvdream_core::envs::{Env, EnvKind};
use mvdream_core::worldmodel::{FusionMode, ModelConfig};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyName {
    Gaussian,
    Categorical,
}

impl Display for FamilyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyName::Gaussian => "gaussian",
            FamilyName::Categorical => "categorical",
        })
    }
}

impl FromStr for FamilyName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(FamilyName::Gaussian),
            "categorical" => Ok(FamilyName::Categorical),
            _ => Err(format!("expected gaussian or categorical, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Averaging(pub CategoricalAveraging);

impl Display for Averaging {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            CategoricalAveraging::Probability => "probability",
            CategoricalAveraging::Logit => "logit",
        })
    }
}

impl FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "probability" => Ok(Averaging(CategoricalAveraging::Probability)),
            "logit" => Ok(Averaging(CategoricalAveraging::Logit)),
            _ => Err(format!("expected probability or logit, got {s:?}")),
        }
    }
}

/// Training-crop jitter: `full` or a pixel bound around the center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropJitter(pub Option<usize>);

impl Display for CropJitter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            None => f.write_str("full"),
            Some(j) => write!(f, "{j}"),
        }
    }
}

impl FromStr for CropJitter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "full" {
            return Ok(CropJitter(None));
        }
        s.parse()
            .map(|j| CropJitter(Some(j)))
            .map_err(|_| format!("expected full or a pixel count, got {s:?}"))
    }
}

macro_rules! experiment_config {
    ($($(#[$doc:meta])* $key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[$doc])* pub $key: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|e| {
                            HarnessError::Config(format!("{}: cannot parse {value:?}: {e}", stringify!($key)))
                        })?;
                    })*
                    other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// All keys with their text values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string())),*]
            }
        }
    };
}

experiment_config! {
    env: EnvKind = EnvKind::DualPendulum;
    latent_family: FamilyName = FamilyName::Gaussian;
    fusion_mode: FusionMode = FusionMode::Poe;
    seed: u64 = 0;
    /// Physics steps over the whole run, prefill included.
    env_steps: usize = 20_000;
    /// Agent steps per episode.
    episode_len: usize = 100;
    action_repeat: usize = 2;
    /// Agent steps collected per world-model train step.
    train_every: usize = 10;
    prefill_episodes: usize = 10;
    expl_noise: f64 = 0.3;
    /// Noise level reached by linear decay at the last collected episode.
    expl_noise_final: f64 = 0.0;
    eval_every: usize = 20;
    eval_episodes: usize = 5;
    checkpoint_every: usize = 50;
    replay_capacity: usize = 500;
    batch: usize = 16;
    seq_len: usize = 8;
    overshoot: usize = 3;
    deter: usize = 64;
    hidden: usize = 128;
    embed: usize = 32;
    gaussian_dim: usize = 32;
    categorical_factors: usize = 8;
    categorical_classes: usize = 8;
    categorical_averaging: Averaging = Averaging(CategoricalAveraging::Probability);
    /// Per-axis shift of training crops around the centered crop.
    crop_jitter: CropJitter = CropJitter(Some(0));
    min_std: f64 = 0.1;
    kl_balance: f64 = 0.8;
    balance_kl: bool = true;
    kl_scale: f64 = 1.0;
    /// Per-term KL floor.
    free_nats: f64 = 3.0;
    model_lr: f64 = 1e-3;
    model_grad_clip: f64 = 100.0;
    horizon: usize = 8;
    gamma: f64 = 0.99;
    lambda: f64 = 0.95;
    entropy_weight: f64 = 1e-3;
    actor_lr: f64 = 1e-4;
    critic_lr: f64 = 1e-4;
    target_every: u64 = 100;
    agent_hidden: usize = 128;
    action_min_std: f64 = 0.1;
    agent_grad_clip: f64 = 100.0;
    save_replay: bool = false;
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.episode_len == 0 || self.action_repeat == 0 {
            return bad("episode_len and action_repeat must be positive".into());
        }
        if self.train_every == 0 || self.train_every > self.episode_len {
            return bad(format!("train_every must lie in 1..={}", self.episode_len));
        }
        if self.seq_len < 2 || self.seq_len > self.episode_len + 1 {
            return bad(format!("seq_len must lie in 2..={}", self.episode_len + 1));
        }
        if self.batch == 0 || self.replay_capacity == 0 {
            return bad("batch and replay_capacity must be positive".into());
        }
        if self.prefill_episodes == 0 {
            return bad("prefill_episodes must be at least 1".into());
        }
        if self.total_episodes() <= self.prefill_episodes {
            return bad(format!(
                "env_steps = {} covers {} episodes, not more than the {} prefill episodes",
                self.env_steps,
                self.total_episodes(),
                self.prefill_episodes
            ));
        }
        if self.expl_noise < 0.0 || self.expl_noise_final < 0.0 {
            return bad("exploration noise must be non-negative".into());
        }
        self.model_config().validate()?;
        self.agent_config().validate()?;
        Ok(())
    }

    pub fn make_env(&self) -> Env {
        Env::new(self.env)
    }

    /// Physics steps per episode.
    pub fn episode_env_steps(&self) -> usize {
        self.episode_len * self.action_repeat
    }

    pub fn total_episodes(&self) -> usize {
        self.env_steps / self.episode_env_steps()
    }

    pub fn train_steps_per_episode(&self) -> usize {
        self.episode_len / self.train_every
    }

    pub fn latent_family(&self) -> LatentFamily {
        match self.latent_family {
            FamilyName::Gaussian => LatentFamily::Gaussian { dim: self.gaussian_dim },
            FamilyName::Categorical => LatentFamily::Categorical {
                factors: self.categorical_factors,
                classes: self.categorical_classes,
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let env = self.make_env();
        let mut c = ModelConfig::new(env.views(), env.image_size(), env.action_spec().dim);
        c.fusion = self.fusion_mode;
        c.family = self.latent_family();
        c.averaging = self.categorical_averaging.0;
        c.deter = self.deter;
        c.hidden = self.hidden;
        c.embed = self.embed;
        c.crop_jitter = self.crop_jitter.0;
        c.min_std = self.min_std;
        c.overshoot = self.overshoot;
        c.kl_balance = self.kl_balance;
        c.balance_kl = self.balance_kl;
        c.kl_scale = self.kl_scale;
        c.free_nats = self.free_nats;
        c.lr = self.model_lr;
        c.grad_clip = self.model_grad_clip;
        c
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            horizon: self.horizon,
            gamma: self.gamma,
            lambda: self.lambda,
            entropy_weight: self.entropy_weight,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            target_every: self.target_every,
            hidden: self.agent_hidden,
            min_std: self.action_min_std,
            grad_clip: self.agent_grad_clip,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), ExperimentConfig::KEYS.len());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# reacher baseline\nenv = blind_reacher\n\nfusion_mode = single_view:2\nlatent_family=categorical\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.env, EnvKind::BlindReacher);
        assert_eq!(cfg.fusion_mode, FusionMode::SingleView(2));
        assert_eq!(cfg.latent_family, FamilyName::Categorical);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.batch, 16);
        assert_eq!(cfg.model_config().family, LatentFamily::Categorical { factors: 8, classes: 8 });
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(ExperimentConfig::parse("nope = 1").is_err());
        assert!(ExperimentConfig::parse("seed = -1").is_err());
        assert!(ExperimentConfig::parse("seed").is_err());
        assert!(ExperimentConfig::parse("fusion_mode = single_view:3").is_err());
        assert!(ExperimentConfig::parse("fusion_mode = single_view:0").is_err());
        assert!(ExperimentConfig::parse("env_steps = 1000").is_err());
        assert!(ExperimentConfig::parse("seq_len = 1").is_err());
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.episode_env_steps(), 200);
        assert_eq!(cfg.total_episodes(), 100);
        assert_eq!(cfg.train_steps_per_episode(), 10);
    }

    #[test]
    fn override_syntax() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("overshoot=0").unwrap();
        assert_eq!(cfg.overshoot, 0);
        assert!(cfg.apply_override("overshoot").is_err());
    }
}
