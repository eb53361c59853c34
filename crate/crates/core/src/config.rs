//! Run configuration, read from a single TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{AdapterHyper, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::ScaleMode;
use crate::harness::StreamSpec;
use crate::router::{DEFAULT_CHUNK_SIZE, DEFAULT_LAMBDA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub expanded_dim: usize,
    pub lambda: f64,
    pub scale_mode: ScaleMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            expanded_dim: 256,
            lambda: DEFAULT_LAMBDA,
            scale_mode: ScaleMode::InvSqrtDim,
            seed: 2,
        }
    }
}

/// Gradient-trained router used by the ablation baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpRouterConfig {
    /// Hidden width; 0 means the expansion size.
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BpRouterConfig {
    fn default() -> Self {
        Self {
            hidden: 0,
            learning_rate: 0.05,
            epochs: 30,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Rows per Woodbury step.
    pub chunk_size: usize,
    /// Adds a router class that sends task-agnostic prompts to the bare base model.
    pub generalist_route: bool,
    /// Re-run the router on the growing sequence before every generated token.
    pub per_token_rerouting: bool,
    pub max_answer_len: usize,
    pub encoder: EncoderConfig,
    pub pipeline: PipelineConfig,
    pub stream: StreamSpec,
    pub adapter: AdapterHyper,
    pub bp_router: BpRouterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            generalist_route: false,
            per_token_rerouting: false,
            max_answer_len: 4,
            encoder: EncoderConfig::default(),
            pipeline: PipelineConfig::default(),
            stream: StreamSpec::default(),
            adapter: AdapterHyper::default(),
            bp_router: BpRouterConfig::default(),
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
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.pipeline.expanded_dim == 0 {
            return Err(Error::Config("pipeline.expanded_dim must be >= 1".into()));
        }
        if !(self.pipeline.lambda > 0.0 && self.pipeline.lambda.is_finite()) {
            return Err(Error::Config("pipeline.lambda must be positive".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be >= 1".into()));
        }
        if self.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be >= 1".into()));
        }
        if self.adapter.rank == 0 || self.adapter.batch_size == 0 {
            return Err(Error::Config(
                "adapter rank and batch_size must be >= 1".into(),
            ));
        }
        self.stream
            .validate(self.encoder.vocab)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Reseeds every component from one number.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.encoder.seed = seed;
        self.pipeline.seed = seed.wrapping_add(1);
        self.stream.seed = seed.wrapping_add(2);
        self.adapter.seed = seed.wrapping_add(3);
        self.bp_router.seed = seed.wrapping_add(4);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str("[stream]\ntasks = 3\norder = \"order2\"\n").unwrap();
        assert_eq!(cfg.stream.tasks, 3);
        assert_eq!(cfg.stream.arrival_order().unwrap(), vec![2, 1, 0]);
        assert_eq!(cfg.encoder, EncoderConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("bogus = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml_str("[encoder]\nlayers = 3\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[stream]\nseparation = 2.0\n").is_err());
        assert!(RunConfig::from_toml_str("[pipeline]\nlambda = 0.0\n").is_err());
        assert!(RunConfig::from_toml_str("[encoder]\nsplit_layer = 4\n").is_err());
        assert!(RunConfig::from_toml_str("chunk_size = 0\n").is_err());
    }
}
