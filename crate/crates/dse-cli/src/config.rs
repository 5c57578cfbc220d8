//! TOML run configuration. Unknown keys are rejected; every field has a
//! default so an empty file is valid.

use std::path::{Path, PathBuf};

use candle_core::DType;
use dse::attention::AttentionConfig;
use dse::backbone::{Backbone, BackboneSpec};
use dse::evalharness::MetricParams;
use dse::generators::{Generator, GeneratorSpec};
use dse::similarity::LossConfig;
use dse::training::TrainConfig;
use dse::{DseError, Family, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// CPU-sized channel schedule.
    #[default]
    Desk,
    /// Channel schedule of the published architectures.
    FullScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub family: Family,
    pub scale: Scale,
    pub resolution: usize,
    /// Pretrained generator checkpoint; a seeded toy generator when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            family: Family::Style,
            scale: Scale::Desk,
            resolution: 32,
            checkpoint: None,
        }
    }
}

impl GeneratorSection {
    pub fn spec(&self) -> GeneratorSpec {
        match self.scale {
            Scale::Desk => GeneratorSpec::desk(self.family, self.resolution),
            Scale::FullScale => GeneratorSpec::full_scale(self.family, self.resolution),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    /// Trained encoder checkpoint; defaults to `<out_dir>/train/encoder`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    #[default]
    Desk,
    Vgg16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub preset: BackbonePreset,
    /// Safetensors weights; falls back to `DSE_BACKBONE`, then to seeded
    /// random weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InvertMode {
    /// One encoder pass.
    #[default]
    Single,
    /// Fine-tune a copy of the encoder on the inputs.
    Finetune,
    /// Optimize style latents directly, starting from the encoder output.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvertSection {
    pub mode: InvertMode,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimize_const: bool,
    pub loss: LossConfig,
}

impl Default for InvertSection {
    fn default() -> Self {
        Self {
            mode: InvertMode::Single,
            steps: 200,
            learning_rate: 0.0015,
            optimize_const: false,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Root for command outputs.
    pub out_dir: PathBuf,
    pub generator: GeneratorSection,
    pub encoder: EncoderSection,
    pub backbone: BackboneSection,
    pub attention: AttentionConfig,
    pub train: TrainConfig,
    pub invert: InvertSection,
    pub metrics: MetricParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs"),
            generator: GeneratorSection::default(),
            encoder: EncoderSection::default(),
            backbone: BackboneSection::default(),
            attention: AttentionConfig::default(),
            train: TrainConfig::desk(),
            invert: InvertSection::default(),
            metrics: MetricParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DseError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            DseError::Config(m) => DseError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DseError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DseError::Config(e.to_string()))
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn generator(&self) -> Result<Generator> {
        match &self.generator.checkpoint {
            Some(dir) => Generator::load_pretrained(dir, self.generator.family, self.dtype()),
            None => Generator::toy(self.generator.spec(), self.seed, self.dtype()),
        }
    }

    pub fn backbone(&self) -> Result<Backbone> {
        let spec = match self.backbone.preset {
            BackbonePreset::Desk => BackboneSpec::desk(),
            BackbonePreset::Vgg16 => BackboneSpec::vgg16(),
        };
        match self.backbone.path.clone().or_else(Backbone::env_path) {
            Some(path) => Backbone::load(&path, spec, self.dtype()),
            None => Backbone::seeded(spec, self.seed ^ 0xb4c6, self.dtype()),
        }
    }

    pub fn encoder_dir(&self) -> PathBuf {
        self.encoder
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("train").join(dse::training::ENCODER_DIR))
    }

    /// Training config with the strategy's view weights written into the
    /// loss weights, as actually used.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        out.train.weights = self.train.loss_config().weights;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(matches!(err, DseError::Config(_)));
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn defaults_survive_a_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("learning_rate = 0.0015"));
    }
}
