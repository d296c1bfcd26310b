use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::discriminators::CriticConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, SCALE};
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            generator: AdamConfig::default(),
            discriminator: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Write a checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    /// Skip both discriminator updates.
    pub freeze_discriminators: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            checkpoint_every: 500,
            freeze_discriminators: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of stored sequences; when absent, sequences are synthesized from `synth`.
    pub manifest: Option<PathBuf>,
    /// Sequence ids held out for evaluation.
    pub test_ids: Vec<String>,
    /// When `test_ids` is empty, hold out this many sequences from the end.
    pub test_sequences: usize,
    pub synth: SynthConfig,
    pub synth_sequences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            test_ids: Vec::new(),
            test_sequences: 20,
            synth: SynthConfig::default(),
            synth_sequences: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Super-resolution factor; only 4 is supported.
    pub scale: usize,
    pub generator: GeneratorConfig,
    pub spatial_critic: CriticConfig,
    pub temporal_critic: CriticConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            scale: SCALE,
            generator: GeneratorConfig::default(),
            spatial_critic: CriticConfig::default(),
            temporal_critic: CriticConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != SCALE {
            return Err(Error::Config(format!("scale must be {SCALE}, got {}", self.scale)));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.loss.validate()?;
        for (name, a) in [("generator", &self.optim.generator), ("discriminator", &self.optim.discriminator)] {
            if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
                return Err(Error::Config(format!("invalid {name} optimizer settings {a:?}")));
            }
        }
        let g = &self.generator;
        if g.latent_channels == 0 || g.encoder_hidden == 0 || g.decoder_channels == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        if g.phycell_kernel_size < 3 || g.phycell_kernel_size % 2 == 0 {
            return Err(Error::Config("phycell_kernel_size must be odd and >= 3".into()));
        }
        if g.bank_layout.is_empty() {
            return Err(Error::Config("bank_layout must not be empty".into()));
        }
        for c in [&self.spatial_critic, &self.temporal_critic] {
            if c.channels.is_empty() || c.channels.contains(&0) {
                return Err(Error::Config("critic channels must be non-empty and positive".into()));
            }
        }
        self.data.synth.validate().map_err(|e| Error::Config(format!("data.synth: {e}")))?;
        Ok(())
    }
}
