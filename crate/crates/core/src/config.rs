//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! source = "pinwheel"
//!
//! [network]
//! widths = [2, 16, 32]
//!
//! [train]
//! dist = "geometric:0.9"
//! epochs = 20
//!
//! [binarize]
//! beta = 0.2
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected. The
//! `ORDREP_SEED` environment variable overrides `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compression::Ordering;
use crate::data::{IngestFormat, PinwheelParams};
use crate::error::{Error, Result};
use crate::numerics::Activation;
use crate::trainer::{SweepConfig, TrainConfig};
use crate::truncation::DistSpec;

pub const SEED_ENV: &str = "ORDREP_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub binarize: Option<BinarizeSection>,
    pub index: Option<IndexSection>,
    pub bench: Option<BenchSection>,
    pub compress: Option<CompressSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Pinwheel,
    Gaussian,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub pinwheel: PinwheelParams,
    pub dim: usize,
    pub count: usize,
    pub spectrum: Vec<f64>,
    pub path: Option<String>,
    pub format: IngestFormat,
    pub normalize: bool,
    /// Fraction of examples held out for calibration and queries.
    pub holdout_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Pinwheel,
            pinwheel: PinwheelParams::default(),
            dim: 10,
            count: 2000,
            spectrum: vec![8.0, 5.0, 3.0, 2.0, 1.5, 1.0, 0.8, 0.6, 0.4, 0.2],
            path: None,
            format: IngestFormat::PackedF64Rows,
            normalize: true,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Input width, hidden widths, code width `K`; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub code_activation: Activation,
    pub tied: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            widths: vec![2, 16, 32],
            hidden_activation: Activation::Relu,
            code_activation: Activation::Sigmoid,
            tied: false,
        }
    }
}

impl NetworkSection {
    pub fn k(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub dist: DistSpec,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub input_corruption_prob: f64,
    pub hidden_dropout_prob: f64,
    pub weight_decay_ratio: f64,
    pub invariance_weight: f64,
    pub invariance_noise_scale: f64,
    pub binarize_forward: Option<f64>,
    pub expected_gradient: bool,
    pub log_every: usize,
    pub sweep: SweepConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            dist: DistSpec::Geometric { rho: 0.9, k: None },
            minibatch_size: 100,
            epochs: 20,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 1.0,
            input_corruption_prob: 0.0,
            hidden_dropout_prob: 0.0,
            weight_decay_ratio: 0.0,
            invariance_weight: 0.0,
            invariance_noise_scale: 0.01,
            binarize_forward: None,
            expected_gradient: false,
            log_every: 10,
            sweep: SweepConfig::default(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, k: usize, seed: u64) -> Result<TrainConfig> {
        let mut c = TrainConfig::new(self.dist.build(k)?);
        c.minibatch_size = self.minibatch_size;
        c.epochs = self.epochs;
        c.learning_rate = self.learning_rate;
        c.momentum = self.momentum;
        c.lr_decay = self.lr_decay;
        c.input_corruption_prob = self.input_corruption_prob;
        c.hidden_dropout_prob = self.hidden_dropout_prob;
        c.weight_decay_ratio = self.weight_decay_ratio;
        c.invariance_weight = self.invariance_weight;
        c.invariance_noise_scale = self.invariance_noise_scale;
        c.binarize_forward = self.binarize_forward;
        c.expected_gradient = self.expected_gradient;
        c.sweep = self.sweep.clone();
        c.rng_seed = seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinarizeSection {
    pub beta: f64,
}

impl Default for BinarizeSection {
    fn default() -> Self {
        Self { beta: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub collapse: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        Self {
            collapse: crate::retrieval::DEFAULT_COLLAPSE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub queries: usize,
    pub r_list: Vec<usize>,
    /// Queries also answered by the linear Hamming scan baseline.
    pub scan_queries: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            queries: 100,
            r_list: vec![2, 32],
            scan_queries: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressSection {
    pub b_list: Vec<usize>,
    pub orderings: Vec<Ordering>,
}

impl Default for CompressSection {
    fn default() -> Self {
        Self {
            b_list: vec![16, 64, 128, 256, 1024],
            orderings: vec![Ordering::NestedDropout, Ordering::Plain],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Read a config file and apply the environment seed override.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("{SEED_ENV}={v}: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.network.widths;
        if w.len() < 2 || w.contains(&0) {
            return Err(Error::invalid("network.widths needs >= 2 positive entries"));
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(Error::invalid("data.holdout_fraction must be in [0,1)"));
        }
        if self.data.source == DataSource::File && self.data.path.is_none() {
            return Err(Error::invalid("data.source = \"file\" needs data.path"));
        }
        self.train.to_train_config(self.network.k(), self.seed)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML serialization (first 16 digits).
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.binarize = Some(BinarizeSection::default());
        cfg.compress = Some(CompressSection::default());
        cfg.train.dist = DistSpec::Explicit(vec![0.1; 32].into_iter().map(|p| p / 3.2).collect());
        cfg.train.binarize_forward = Some(0.3);
        let a = cfg.to_toml().unwrap();
        let parsed = ExperimentConfig::from_toml(&a).unwrap();
        assert_eq!(parsed.to_toml().unwrap(), a);
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn partial_and_invalid() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[network]\nwidths = [2, 4]\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 20);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[network]\nwidths = [2]\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\ndist = \"geometric:0.9:5\"\n").is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 16);
    }
}
