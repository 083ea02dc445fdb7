//! Named size/budget profiles: `desk` for CPU-scale runs, `full` for the
//! published configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cwae::CwaeConfig;
use crate::dsp::DspConfig;
use crate::error::NdfError;
use crate::mcnn::McnnConfig;
use crate::training::{CwaeTrainConfig, McnnTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }

    pub fn dsp(self) -> DspConfig {
        match self {
            Profile::Desk => DspConfig::desk(),
            Profile::Full => DspConfig::full(),
        }
    }

    pub fn cwae(self, n_classes: usize) -> CwaeConfig {
        match self {
            Profile::Desk => CwaeConfig::desk(n_classes),
            Profile::Full => CwaeConfig::full(n_classes),
        }
    }

    pub fn mcnn(self) -> McnnConfig {
        match self {
            Profile::Desk => McnnConfig::desk(),
            Profile::Full => McnnConfig::full(),
        }
    }

    /// Synthetic corpus size per class.
    pub fn items_per_class(self) -> usize {
        match self {
            Profile::Desk => 64,
            Profile::Full => 3000,
        }
    }

    pub fn cwae_training(self) -> CwaeTrainConfig {
        match self {
            Profile::Desk => CwaeTrainConfig {
                per_class_n: 16,
                iterations: 2000,
                ..CwaeTrainConfig::full()
            },
            Profile::Full => CwaeTrainConfig::full(),
        }
    }

    pub fn mcnn_training(self) -> McnnTrainConfig {
        match self {
            Profile::Desk => McnnTrainConfig::desk(),
            Profile::Full => McnnTrainConfig::full(),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = NdfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(NdfError::Config(format!(
                "unknown profile {other:?} (expected desk or full)"
            ))),
        }
    }
}
