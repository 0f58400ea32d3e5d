//! Run configuration as a flat `key=value` file with dotted keys. Blank
//! lines and `#` comments are ignored; later assignments win, so command
//! line overrides can simply be applied after the file.

use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::head::HeadConfig;
use crate::stain::StainProfile;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Per-image Macenko normalization toward `stain_target` before augmentation.
    pub stain_normalize: bool,
    pub stain_target: Option<PathBuf>,
    pub augment: bool,
    pub match_radius: f64,
    pub min_area: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 1,
            manifest: None,
            output_dir: PathBuf::from("runs"),
            stain_normalize: true,
            stain_target: None,
            augment: true,
            match_radius: crate::evaluation::DEFAULT_RADIUS,
            min_area: 1,
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), message: format!("{v:?}: {e}") })
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: [&'static str; 17] = [
        "backbone.num_stages",
        "backbone.stem_channels",
        "backbone.input_channels",
        "backbone.pretrained_weights_path",
        "head.mode",
        "head.aggregator",
        "head.attention_hidden_dim",
        "train.epochs",
        "train.batch_size",
        "train.learning_rate",
        "train.seed",
        "data.manifest",
        "data.stain_normalize",
        "data.stain_target",
        "data.augment",
        "eval.match_radius",
        "inference.min_area",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let v = v.trim();
        match key {
            "backbone.num_stages" => self.backbone.num_stages = value(key, v)?,
            "backbone.stem_channels" => self.backbone.stem_channels = value(key, v)?,
            "backbone.input_channels" => self.backbone.input_channels = value(key, v)?,
            "backbone.pretrained_weights_path" => self.backbone.pretrained_weights_path = opt_path(v),
            "head.mode" => self.head.mode = value(key, v)?,
            "head.aggregator" => self.head.aggregator = value(key, v)?,
            "head.attention_hidden_dim" => self.head.attention_hidden_dim = value(key, v)?,
            "train.epochs" => self.epochs = value(key, v)?,
            "train.batch_size" => self.batch_size = value(key, v)?,
            "train.learning_rate" => self.learning_rate = value(key, v)?,
            "train.seed" => self.seed = value(key, v)?,
            "data.manifest" => self.manifest = opt_path(v),
            "data.stain_normalize" => self.stain_normalize = value(key, v)?,
            "data.stain_target" => self.stain_target = opt_path(v),
            "data.augment" => self.augment = value(key, v)?,
            "eval.match_radius" => self.match_radius = value(key, v)?,
            "inference.min_area" => self.min_area = value(key, v)?,
            "paths.output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "backbone.num_stages" => self.backbone.num_stages.to_string(),
            "backbone.stem_channels" => self.backbone.stem_channels.to_string(),
            "backbone.input_channels" => self.backbone.input_channels.to_string(),
            "backbone.pretrained_weights_path" => show_path(&self.backbone.pretrained_weights_path),
            "head.mode" => self.head.mode.to_string(),
            "head.aggregator" => self.head.aggregator.to_string(),
            "head.attention_hidden_dim" => self.head.attention_hidden_dim.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.learning_rate" => self.learning_rate.to_string(),
            "train.seed" => self.seed.to_string(),
            "data.manifest" => show_path(&self.manifest),
            "data.stain_normalize" => self.stain_normalize.to_string(),
            "data.stain_target" => show_path(&self.stain_target),
            "data.augment" => self.augment.to_string(),
            "eval.match_radius" => self.match_radius.to_string(),
            "inference.min_area" => self.min_area.to_string(),
            "paths.output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, message: format!("expected key=value, got {line:?}") })?;
            self.set(k.trim(), v).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::Syntax { line: i + 1, message: format!("unknown key {k:?}") },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .chain(["paths.output_dir"].iter())
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.head.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ConfigError::Invalid("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.match_radius >= 0.0) {
            return Err(ConfigError::Invalid(format!("eval.match_radius must be ≥ 0, got {}", self.match_radius)));
        }
        Ok(())
    }

    /// Target stain profile: measured from `stain_target` when given,
    /// otherwise the built-in reference.
    pub fn target_profile(&self) -> Result<StainProfile, ConfigError> {
        match &self.stain_target {
            None => Ok(StainProfile::REFERENCE),
            Some(p) => {
                let img = image::open(p)
                    .map_err(|e| ConfigError::Io { path: p.display().to_string(), message: e.to_string() })?
                    .to_rgb8();
                crate::stain::estimate_stain_profile(&img)
                    .map_err(|e| ConfigError::Invalid(format!("stain target {}: {e}", p.display())))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (40, 32, 1e-4));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_carry_location() {
        assert!(matches!(RunConfig::parse("train.epochs=4\nnonsense\n"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(RunConfig::parse("head.aggregator=median"), Err(ConfigError::Value { .. })));
    }
}
