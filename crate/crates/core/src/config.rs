//! Experiment configuration read from a single TOML file.
//!
//! ```toml
//! seed = 7
//!
//! [data.synthetic]
//! images = 2000
//!
//! [model]
//! variant = "full"
//!
//! [train]
//! epochs = 30
//! ```
//!
//! Every section and field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{AsenConfig, Variant};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    /// Train, validation and test proportions.
    pub ratios: [f64; 3],
    /// Share of validation and test images used as queries.
    pub query_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            ratios: [8.0, 1.0, 1.0],
            query_fraction: 0.2,
        }
    }
}

/// Model dimensions left unset resolve from the backbone width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub c_prime: Option<usize>,
    pub reduction: Option<usize>,
    pub d_embed: Option<usize>,
    pub attention_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            c_prime: None,
            reduction: None,
            d_embed: None,
            attention_bias: false,
        }
    }
}

impl ModelConfig {
    pub fn resolve(&self, c: usize, n: usize) -> AsenConfig {
        let mut cfg = AsenConfig::with_defaults(c, n, self.variant);
        if let Some(v) = self.c_prime {
            cfg.c_prime = v;
        }
        if let Some(v) = self.reduction {
            cfg.r = v;
        }
        if let Some(v) = self.d_embed {
            cfg.d_embed = v;
        }
        cfg.attention_bias = self.attention_bias;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out triplets for relation prediction.
    pub triplets: usize,
    pub rerank_k: usize,
    /// Attributes for reranking and attention export; all when empty.
    pub attrs: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            triplets: 5000,
            rerank_k: 10,
            attrs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                line,
                msg: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Makes every seeded component follow the top-level seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.synthetic.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()
    }

    pub fn model_config(&self, n_attributes: usize) -> AsenConfig {
        self.model.resolve(self.backbone.out_channels, n_attributes)
    }
}

/// Hex SHA-256 of the architecture: two runs share a hash exactly when their
/// parameter stores are interchangeable.
pub fn architecture_hash(model: &AsenConfig, backbone: &BackboneConfig) -> String {
    #[derive(Serialize)]
    struct Arch<'a> {
        model: &'a AsenConfig,
        backbone: &'a BackboneConfig,
    }
    let text = toml::to_string(&Arch { model, backbone }).expect("configuration serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}
