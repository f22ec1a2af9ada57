//! Cross-modal (visible/thermal) person re-identification building blocks.
//!
//! - [`numerics`]: feature-map pooling and min-max scaling
//! - [`alignment`]: stripe distance matrix and shortest-path alignment
//! - [`enhancement`]: BN-weighted global feature enhancement
//! - [`losses`]: identity, heterogeneous-center triplet and part alignment losses
//! - [`toytrain`]: synthetic bimodal data and a small two-stream model
//! - [`evalkit`]: CMC / mAP / mINP and the repeated-split protocol
//! - [`rerank`]: expanded cross neighborhood re-ranking
//! - [`formats`]: on-disk feature banks, label sidecars, logs and configs

pub mod alignment;
pub mod enhancement;
pub mod error;
pub mod losses;
pub mod evalkit;
pub mod formats;
pub mod numerics;
pub mod rerank;
pub mod toytrain;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Sensor domain of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "V")]
    Visible,
    #[serde(rename = "T")]
    Thermal,
}

impl Modality {
    pub fn code(self) -> char {
        match self {
            Modality::Visible => 'V',
            Modality::Thermal => 'T',
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Visible => Modality::Thermal,
            Modality::Thermal => Modality::Visible,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Thermal => "thermal",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "V" | "v" | "visible" => Ok(Modality::Visible),
            "T" | "t" | "thermal" => Ok(Modality::Thermal),
            other => Err(Error::InvalidInput(format!("unknown modality '{other}'"))),
        }
    }
}
