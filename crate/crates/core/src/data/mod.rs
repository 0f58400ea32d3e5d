//! Patch records, CSV manifests, class-balanced sampling, augmentation and
//! the synthetic H&E patch generator.

pub mod augment;
pub mod manifest;
pub mod sampler;
pub mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use augment::AugmentPlan;
pub use manifest::DatasetManifest;
pub use sampler::BalancedSampler;
pub use synth::SynthConfig;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: {message}")]
    Validation { path: String, line: usize, message: String },
    #[error("patient {patient} appears in splits {first} and {second}")]
    SplitLeak { patient: String, first: Split, second: Split },
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Image { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One manifest row. Centroids are `(row, col)` pixel coordinates and stay
/// hidden from training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub patient_id: String,
    /// As written in the manifest, relative to the manifest directory.
    pub image_path: PathBuf,
    pub label: bool,
    pub centroids: Vec<(f64, f64)>,
    pub split: Split,
}

/// A record together with its decoded image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: PatchRecord,
    pub image: RgbImage,
}

impl Sample {
    pub fn label_f32(&self) -> f32 {
        if self.record.label {
            1.0
        } else {
            0.0
        }
    }
}
