//! Experiment configuration: TOML with strict keys, dotted overrides and a
//! stable hash of the model section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::diffusion::DenoiserConfig;
use crate::error::{Error, Result};
use crate::kernelgen::GeneratorSettings;
use crate::metrics::MetricConfig;
use crate::nn::optim::AdamWConfig;
use crate::plfe::{PadPolicy, PlfeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub bands: usize,
    pub tokens: usize,
    pub latent_dim: usize,
    pub encoder_width: usize,
    pub encoder_stages: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub ranks: Vec<[usize; 4]>,
    pub latent_pool: Vec<usize>,
    /// Disables the prior entirely (plain regression backbone).
    pub use_prior: bool,
    pub generator: GeneratorSettings,
    pub denoiser_hidden: usize,
    pub denoiser_blocks: usize,
    pub time_dim: usize,
    pub diffusion_steps: usize,
    pub pad_policy: PadPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let d = DenoiserConfig::default();
        Self {
            bands: 8,
            tokens: 16,
            latent_dim: 128,
            encoder_width: 32,
            encoder_stages: 3,
            base_channels: b.base_channels,
            channel_multipliers: b.channel_multipliers,
            ranks: b.ranks,
            latent_pool: b.latent_pool,
            use_prior: true,
            generator: GeneratorSettings::default(),
            denoiser_hidden: d.hidden,
            denoiser_blocks: d.blocks,
            time_dim: d.time_dim,
            diffusion_steps: 500,
            pad_policy: PadPolicy::Error,
        }
    }
}

impl ModelConfig {
    pub fn token_side(&self) -> usize {
        (self.tokens as f64).sqrt().round() as usize
    }

    pub fn plfe(&self) -> PlfeConfig {
        PlfeConfig {
            bands: self.bands,
            base_width: self.encoder_width,
            num_stages: self.encoder_stages,
            token_side: self.token_side(),
            latent_dim: self.latent_dim,
            pad_policy: self.pad_policy,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            bands: self.bands,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            ranks: self.ranks.clone(),
            latent_pool: self.latent_pool.clone(),
            latent_dim: self.latent_dim,
            modulated: self.use_prior,
            generator: self.generator,
            pad_policy: self.pad_policy,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            tokens: self.tokens,
            latent_dim: self.latent_dim,
            hidden: self.denoiser_hidden,
            blocks: self.denoiser_blocks,
            time_dim: self.time_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.token_side();
        if side * side != self.tokens {
            return Err(Error::config(format!("tokens must be a perfect square, got {}", self.tokens)));
        }
        for &f in &self.latent_pool {
            if f == 0 || self.tokens % f != 0 {
                return Err(Error::config(format!("latent pool factor {f} does not divide {} tokens", self.tokens)));
            }
        }
        if self.diffusion_steps < 2 {
            return Err(Error::config("diffusion_steps must be at least 2"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("time_dim must be even"));
        }
        self.plfe().validate()?;
        self.backbone().validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub size: usize,
    pub test_size: usize,
    pub ratio: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_samples: 8,
            test_samples: 20,
            size: 64,
            test_size: 64,
            ratio: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_split: String,
    pub test_split: String,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            test_split: "test".into(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Mode {
    /// Denoiser, condition encoder and backbone updated together.
    #[default]
    Joint,
    /// Backbone frozen; only the diffusion side learns.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            iterations: 2000,
            batch_size: 8,
            lr: a.lr,
            weight_decay: a.weight_decay,
        }
    }
}

impl StageConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Weight of the reconstruction term in stage 2.
    pub lambda: f64,
    pub ema_decay: f64,
    pub mode: Stage2Mode,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            lambda: 1.0,
            ema_decay: 0.995,
            mode: Stage2Mode::Joint,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(s.lr > 0.0) {
                return Err(Error::config(format!("{name}.lr must be positive")));
            }
            if s.batch_size == 0 {
                return Err(Error::config(format!("{name}.batch_size must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub sampling_steps: usize,
    pub eta: f64,
    pub use_ema: bool,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 25,
            eta: 0.0,
            use_ema: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub metrics: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside a TOML table, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path {key:?} crosses a non-table value")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid TOML: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.infer.sampling_steps == 0 || self.infer.sampling_steps > self.model.diffusion_steps {
            return Err(Error::config(format!(
                "infer.sampling_steps must be in 1..={}",
                self.model.diffusion_steps
            )));
        }
        let s = &self.data.synth;
        if s.ratio == 0 || s.size % s.ratio != 0 || s.test_size % s.ratio != 0 {
            return Err(Error::config("synthetic patch sizes must be multiples of the ratio"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot encode config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_toml_str("[model]\nbandz = 4\n", &[]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
    }

    #[test]
    fn overrides_apply_with_types() {
        let c = ExperimentConfig::from_toml_str(
            "",
            &["model.bands=4".into(), "train.mode=separate".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(c.model.bands, 4);
        assert_eq!(c.train.mode, Stage2Mode::Separate);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert!(ExperimentConfig::from_toml_str("", &["train.lambda=-1".into()]).is_err());
    }

    #[test]
    fn hash_tracks_model_changes() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.latent_dim = 64;
        assert_ne!(a.hash(), b.hash());
    }
}
