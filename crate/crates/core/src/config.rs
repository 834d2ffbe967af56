//! Flat run configuration with named presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::env::{EnvConfig, EnvKind, PedMode};
use crate::error::{Error, Result};
use crate::generator::{GeneratorArch, GeneratorConfig, LossMode, LossWeights};
use crate::synthesis::{SynthesisConfig, Target, TargetSpec, ZPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::config(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

/// Every tunable of a pipeline run. Keys map one-to-one onto TOML keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub ped_mode: PedMode,
    pub resolution: usize,
    pub max_steps: usize,
    pub seed: u64,

    pub gamma: f64,
    pub agent_steps: usize,
    pub agent_lr: f64,
    pub agent_batch: usize,
    pub sync_period: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_steps: usize,
    pub replay_capacity: usize,
    pub learning_starts: usize,
    pub train_every: usize,
    pub conv_filters: Vec<usize>,
    pub hidden: usize,

    pub frames: usize,
    pub collect_epsilon: f64,

    pub latent: usize,
    pub base_filters: usize,
    pub stages: usize,
    pub loss: LossMode,
    pub eta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub blur: bool,

    pub target: String,
    pub beta: f64,
    pub alpha: f64,
    pub synth_steps: usize,
    pub synth_lr: f64,
    pub samples: usize,
    pub z_policy: ZPolicy,

    pub eval_episodes: usize,
    pub heldout_frames: usize,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            env: EnvKind::MiniPong,
            ped_mode: PedMode::Reasonable,
            resolution: 32,
            max_steps: 500,
            seed: 0,
            gamma: 0.95,
            agent_steps: 50_000,
            agent_lr: 1e-3,
            agent_batch: 32,
            sync_period: 1000,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_anneal_steps: 20_000,
            replay_capacity: 20_000,
            learning_starts: 1000,
            train_every: 4,
            conv_filters: vec![8, 16],
            hidden: 64,
            frames: 5000,
            collect_epsilon: 0.1,
            latent: 32,
            base_filters: 16,
            stages: 3,
            loss: LossMode::Full,
            eta: 1e-3,
            lambda: 1e-4,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            blur: true,
            target: "t-".into(),
            beta: 10.0,
            alpha: 1e-2,
            synth_steps: 200,
            synth_lr: 1e-2,
            samples: 16,
            z_policy: ZPolicy::FixedSeed,
            eval_episodes: 20,
            heldout_frames: 500,
        };
        match p {
            Preset::Desk => desk,
            Preset::Paper => Self {
                resolution: 64,
                agent_steps: 2_000_000,
                eps_anneal_steps: 1_000_000,
                replay_capacity: 100_000,
                learning_starts: 10_000,
                sync_period: 10_000,
                conv_filters: vec![32, 64, 64],
                hidden: 512,
                frames: 10_000,
                latent: 100,
                base_filters: 32,
                stages: 4,
                epochs: 2000,
                heldout_frames: 1000,
                ..desk
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preset values overlaid with the keys present in the file.
    pub fn load(path: &Path, base: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::preset(base);
        for (k, v) in overlay {
            cfg.set_value(&k, v)?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Applies `key=value`; bare words are taken as strings.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not of the form key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        self.set_value(key, value)
    }

    fn set_value(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).expect("config is plain data");
        if !table.contains_key(key) {
            return Err(Error::config(format!("unknown config key `{key}`")));
        }
        // Integers are accepted where reals are expected.
        let value = match (&table[key], value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key.to_string(), value);
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::config(format!("`{key}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env_config().validate()?;
        self.agent_config().validate()?;
        self.generator_config(self.loss).validate()?;
        self.target_spec()?.validate(self.env.action_count())?;
        self.synthesis_config()?.validate(self.env.action_count())?;
        if self.frames < 2 || self.heldout_frames == 0 || self.eval_episodes == 0 {
            return Err(Error::config("frames must be at least 2; heldout_frames and eval_episodes positive"));
        }
        if !(0.0..=1.0).contains(&self.collect_epsilon) {
            return Err(Error::config("collect_epsilon outside [0, 1]"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn env_config(&self) -> EnvConfig {
        let base = match self.env {
            EnvKind::MiniPong => EnvConfig::minipong(self.seed),
            EnvKind::GridDrive => EnvConfig::griddrive(self.ped_mode, self.seed),
        };
        EnvConfig { resolution: self.resolution, max_steps: self.max_steps, ..base }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            gamma: self.gamma as f32,
            train_steps: self.agent_steps,
            sync_period: self.sync_period,
            eps_start: self.eps_start as f32,
            eps_end: self.eps_end as f32,
            eps_anneal_steps: self.eps_anneal_steps,
            batch_size: self.agent_batch,
            replay_capacity: self.replay_capacity,
            learning_starts: self.learning_starts,
            train_every: self.train_every,
            lr: self.agent_lr as f32,
            huber_delta: 1.0,
            conv_filters: self.conv_filters.clone(),
            hidden: self.hidden,
        }
    }

    pub fn generator_arch(&self) -> GeneratorArch {
        GeneratorArch {
            input: self.env_config().observation_shape(),
            latent: self.latent,
            base_filters: self.base_filters,
            stages: self.stages,
        }
    }

    pub fn generator_config(&self, mode: LossMode) -> GeneratorConfig {
        GeneratorConfig {
            weights: LossWeights { eta: self.eta as f32, lambda: self.lambda as f32 },
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr as f32,
            blur: self.blur,
            ..GeneratorConfig::new(self.generator_arch(), mode)
        }
    }

    pub fn target_spec(&self) -> Result<TargetSpec> {
        Ok(TargetSpec::new(self.target.parse::<Target>().map_err(|e| Error::config(e.to_string()))?, self.beta))
    }

    pub fn synthesis_config(&self) -> Result<SynthesisConfig> {
        Ok(SynthesisConfig {
            target: self.target_spec()?,
            alpha: self.alpha as f32,
            steps: self.synth_steps,
            lr: self.synth_lr as f32,
            z_policy: self.z_policy,
            samples: self.samples,
        })
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!((c.lambda, c.eta, c.lr, c.batch_size, c.latent), (1e-4, 1e-3, 1e-3, 16, 100));
        assert_eq!((c.collect_epsilon, c.eps_end, c.gamma), (0.1, 0.1, 0.95));
        c.validate().unwrap();
        let text = c.to_toml();
        for line in ["lambda = 0.0001", "eta = 0.001", "lr = 0.001", "batch_size = 16", "latent = 100", "gamma = 0.95"] {
            assert!(text.lines().any(|l| l == line), "{line} missing from\n{text}");
        }
    }

    #[test]
    fn desk_preset_is_smaller() {
        let (d, p) = (RunConfig::preset(Preset::Desk), RunConfig::preset(Preset::Paper));
        assert_eq!((d.latent, d.resolution), (32, 32));
        assert!(d.agent_steps < p.agent_steps && d.epochs < p.epochs && d.frames < p.frames);
        d.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{}\nbogus = 3\n", RunConfig::default().to_toml());
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        assert!(RunConfig::default().set("bogus=3").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set("env=griddrive").unwrap();
        c.set("beta = 2").unwrap();
        c.set("target=action:1").unwrap();
        c.set("loss=\"plain-vae\"").unwrap();
        assert_eq!((c.env, c.beta, c.loss), (EnvKind::GridDrive, 2.0, LossMode::PlainVae));
        assert!(c.set("target=action:9").is_err());
        assert!(c.set("gamma=1.5").is_err());
        assert!(c.set("seed").is_err());
        assert_eq!(c.beta, 2.0);
    }

    #[test]
    fn partial_file_overlays_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 9\nepochs = 3\n").unwrap();
        let c = RunConfig::load(&p, Preset::Desk).unwrap();
        assert_eq!((c.seed, c.epochs, c.latent), (9, 3, 32));
        std::fs::write(&p, "sed = 9\n").unwrap();
        assert!(RunConfig::load(&p, Preset::Desk).is_err());
    }
}
