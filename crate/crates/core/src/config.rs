//! Run configuration: a TOML file with unknown keys rejected.
//!
//! ```toml
//! profile = "desk"            # or a [profile] table with every field
//! [space]                     # candidate bits, t_max, pruning_rate, share_alpha, io_bits, [space.neuron]
//! [loss]                      # lambda1 (per bit), lambda2 (per bit-SynOp)
//! [optim]                     # weight_lr, momentum, arch_lr, betas, eps
//! [train]                     # epochs, batch_size, retrain_epochs, aux_cell, aux_weight, arch_split,
//!                             # test_fraction, inherit_weights, encoding, seed
//! [data]                      # kind = "synthetic-patterns" | "idx-images" | "csv-table", ...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{BackboneProfile, SearchSpace};
use crate::data::{DatasetSpec, Encoding};
use crate::error::{Result, SnasError};
use crate::objectives::LossConfig;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileChoice {
    Named(String),
    Custom(BackboneProfile),
}

impl Default for ProfileChoice {
    fn default() -> Self {
        ProfileChoice::Named("desk".into())
    }
}

impl ProfileChoice {
    pub fn resolve(&self) -> Result<BackboneProfile> {
        match self {
            ProfileChoice::Named(n) => BackboneProfile::by_name(n),
            ProfileChoice::Custom(p) => Ok(p.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Three settings of increasing strictness for the desk profile. The
/// resource terms are in raw bits, so useful coefficients scale with the
/// model; at desk size ~1e4 model bits and ~1e6 bit-SynOps per sample.
pub const DESK_LAMBDA_GRID: [(f64, f64); 3] = [(0.0, 0.0), (1e-5, 1e-7), (5e-5, 5e-7)];

/// Where the architecture step draws its batches from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchSplit {
    /// Disjoint half of the training data.
    #[default]
    HeldOut,
    /// The weight step's batch.
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub retrain_epochs: usize,
    /// 1-based cell feeding the auxiliary head; profile default when unset.
    pub aux_cell: Option<usize>,
    pub aux_weight: f64,
    pub arch_split: ArchSplit,
    pub test_fraction: f64,
    pub inherit_weights: bool,
    pub encoding: Encoding,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 30,
            retrain_epochs: 20,
            aux_cell: None,
            aux_weight: 0.4,
            arch_split: ArchSplit::HeldOut,
            test_fraction: 0.2,
            inherit_weights: true,
            encoding: Encoding::Spike,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: ProfileChoice,
    pub space: SearchSpace,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SnasError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SnasError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical serialization; this is what checkpoints embed and hash.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SnasError::Config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_toml`].
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    pub fn backbone(&self) -> Result<BackboneProfile> {
        self.profile.resolve()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
            pruning_rate: self.space.pruning_rate,
        }
    }

    /// Auxiliary head position: configured, else cell 6 (cifar), cell 5
    /// (gsc) or the penultimate cell.
    pub fn aux_cell(&self) -> Result<Option<usize>> {
        if self.train.aux_cell.is_some() {
            return Ok(self.train.aux_cell);
        }
        let p = self.backbone()?;
        Ok(match p.name.as_str() {
            "cifar" => Some(6),
            "gsc" => Some(5),
            _ => p.cells.checked_sub(1).filter(|&c| c > 0),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let profile = self.backbone()?;
        profile.validate()?;
        self.space.validate()?;
        self.loss_config()
            .validate()
            .map_err(|e| SnasError::Config(e.to_string()))?;
        self.optim.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(SnasError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.test_fraction) {
            return Err(SnasError::Config("test_fraction must lie in [0, 1)".into()));
        }
        if t.aux_weight < 0.0 {
            return Err(SnasError::Config("aux_weight must be non-negative".into()));
        }
        if let Some(a) = t.aux_cell {
            if a == 0 || a > profile.cells {
                return Err(SnasError::Config(format!(
                    "aux_cell {a} outside 1..={}",
                    profile.cells
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 16);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "profile = \"gsc\"\n[loss]\nlambda1 = 1e-9\n[train]\nepochs = 3\n[data]\nkind = \"csv-table\"\npath = \"x.csv\"\nlabel_column = \"y\"\n",
        )
        .unwrap();
        assert_eq!(cfg.backbone().unwrap().cells, 6);
        assert_eq!(cfg.loss.lambda1, 1e-9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 30);
        assert_eq!(cfg.aux_cell().unwrap(), Some(5));
        assert_eq!(RunConfig::default().aux_cell().unwrap(), Some(1));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(
            RunConfig::from_toml("[data]\nkind = \"synthetic-patterns\"\nclass = 3\n").is_err()
        );
        assert!(
            RunConfig::from_toml("[data]\nkind = \"synthetic-patterns\"\nclasses = 4\n").is_ok()
        );
        assert!(RunConfig::from_toml("[loss]\nlambda1 = -1.0\n").is_err());
        assert!(RunConfig::from_toml("profile = \"imagenet\"\n").is_err());
        assert!(RunConfig::from_toml("[space]\nbits = []\n").is_err());
        assert!(RunConfig::from_toml("[train]\naux_cell = 5\n").is_err());
    }

    #[test]
    fn custom_profile_table() {
        let cfg = RunConfig::from_toml(
            "[profile]\nname = \"tiny\"\nin_channels = 1\nheight = 4\nwidth = 4\ninit_channels = 2\ncells = 1\nreductions = []\nnodes = 1\nclasses = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.backbone().unwrap().name, "tiny");
        assert_eq!(cfg.aux_cell().unwrap(), None);
    }
}
