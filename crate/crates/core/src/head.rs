//! Weakly-supervised heads: per-cell (instance) classification followed by
//! aggregation of probabilities, or pooling of cell embeddings followed by
//! a single classifier. The instance/max pairing is the default.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::FeatureMap;
use crate::numerics::{NumericsError, ParamId, ParamStore, Real, Tape, Tensor, Var, BCE_EPS};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadMode {
    #[default]
    Instance,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregator {
    #[default]
    Max,
    Mean,
    Attention,
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Instance => "instance",
            HeadMode::Embedding => "embedding",
        })
    }
}

impl FromStr for HeadMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instance" => Ok(HeadMode::Instance),
            "embedding" => Ok(HeadMode::Embedding),
            other => Err(ModelError::Config(format!("unknown head mode {other:?}"))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Max => "max",
            Aggregator::Mean => "mean",
            Aggregator::Attention => "attention",
        })
    }
}

impl FromStr for Aggregator {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Aggregator::Max),
            "mean" => Ok(Aggregator::Mean),
            "attention" => Ok(Aggregator::Attention),
            other => Err(ModelError::Config(format!("unknown aggregator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub aggregator: Aggregator,
    pub attention_hidden_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { mode: HeadMode::Instance, aggregator: Aggregator::Max, attention_hidden_dim: 128 }
    }
}

impl HeadConfig {
    pub fn new(mode: HeadMode, aggregator: Aggregator) -> Self {
        Self { mode, aggregator, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.mode == HeadMode::Instance && self.aggregator == Aggregator::Attention {
            return Err(ModelError::Config("attention aggregation needs embedding mode".into()));
        }
        if self.aggregator == Aggregator::Attention && self.attention_hidden_dim == 0 {
            return Err(ModelError::Config("attention_hidden_dim must be positive".into()));
        }
        Ok(())
    }

    /// Short label used in tables, e.g. `instance-max` or `attentionMIL`.
    pub fn label(&self) -> String {
        match (self.mode, self.aggregator) {
            (HeadMode::Embedding, Aggregator::Attention) => "attentionMIL".into(),
            (m, a) => format!("{m}-{a}"),
        }
    }

    /// The five head configurations compared in the ablation, in table order.
    pub fn ablation_variants() -> [HeadConfig; 5] {
        [
            HeadConfig::new(HeadMode::Embedding, Aggregator::Mean),
            HeadConfig::new(HeadMode::Embedding, Aggregator::Max),
            HeadConfig::new(HeadMode::Embedding, Aggregator::Attention),
            HeadConfig::new(HeadMode::Instance, Aggregator::Mean),
            HeadConfig::new(HeadMode::Instance, Aggregator::Max),
        ]
    }
}

/// Per-cell probabilities at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    /// `[h, w]`, every value in `[0, 1]`.
    pub values: Tensor<f32>,
    pub stride: usize,
}

impl ProbabilityMap {
    pub fn new(values: Tensor<f32>, stride: usize) -> Result<Self, NumericsError> {
        values.dims2()?;
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(NumericsError::Contract("probability map values must lie in [0, 1]".into()));
        }
        Ok(Self { values, stride })
    }
}

/// Image-level score `H ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct GlobalScore(pub f32);

/// Aggregates an instance probability map into one score.
pub fn aggregate(map: &ProbabilityMap, aggregator: Aggregator) -> Result<GlobalScore, ModelError> {
    let v = map.values.data();
    if v.is_empty() {
        return Err(ModelError::Numerics(NumericsError::Dimension("empty probability map".into())));
    }
    match aggregator {
        Aggregator::Max => Ok(GlobalScore(v.iter().copied().fold(f32::NEG_INFINITY, f32::max))),
        Aggregator::Mean => Ok(GlobalScore((v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32)),
        Aggregator::Attention => {
            Err(ModelError::Config("attention weights cell embeddings, not probabilities".into()))
        }
    }
}

/// `−[y·ln H + (1−y)·ln(1−H)]` with `H` clamped to `[ε, 1−ε]`.
pub fn bce_loss(h: f64, y: f64) -> Result<f64, NumericsError> {
    if y != 0.0 && y != 1.0 {
        return Err(NumericsError::Contract(format!("label {y} is not 0 or 1")));
    }
    let hc = h.clamp(BCE_EPS, 1.0 - BCE_EPS);
    Ok(-(y * hc.ln() + (1.0 - y) * (1.0 - hc).ln()))
}

/// Tape handles produced by a head forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[N,1,h,w]` per-cell probabilities. For instance heads these are the
    /// aggregated values; embedding heads apply their classifier per cell.
    pub cell_probs: Var,
    /// `[N,1]` image-level scores `H`.
    pub global: Var,
    /// `[N,h·w]` attention weights, attention heads only.
    pub attention: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Head {
    config: HeadConfig,
    channels: usize,
    weight: ParamId,
    bias: ParamId,
    attention: Option<(ParamId, ParamId)>,
}

impl Head {
    /// Registers parameters under the `head.` prefix. The classifier is a
    /// `[1,C,1,1]` kernel in every mode so it can also be swept over cells.
    pub fn build<T: Real>(
        config: &HeadConfig,
        channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let bound = 1.0 / (channels as f64).sqrt();
        let mut uniform = |shape: &[usize], bound: f64| Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)));
        let weight = store.add("head.classifier.weight", uniform(&[1, channels, 1, 1], bound), true);
        let bias = store.add("head.classifier.bias", Tensor::zeros(&[1]), true);
        let attention = (config.aggregator == Aggregator::Attention).then(|| {
            let d = config.attention_hidden_dim;
            let v = store.add("head.attention.v", uniform(&[channels, d], bound), true);
            let w = store.add("head.attention.w", uniform(&[d, 1], 1.0 / (d as f64).sqrt()), true);
            (v, w)
        });
        Ok(Self { config: *config, channels, weight, bias, attention })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    fn cell_logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var, NumericsError> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let z = tape.conv2d(features, w, 1, 0)?;
        tape.bias_add(z, b)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &FeatureMap,
    ) -> Result<HeadOutput, NumericsError> {
        let [n, c, h, w] = tape.value(features.var).dims4()?;
        if c != self.channels {
            return Err(NumericsError::Dimension(format!(
                "head expects {} channels, features are {:?}",
                self.channels,
                tape.value(features.var).shape()
            )));
        }
        let logits = self.cell_logits(tape, store, features.var)?;
        let cell_probs = tape.sigmoid(logits)?;
        match self.config.mode {
            HeadMode::Instance => {
                let global = match self.config.aggregator {
                    Aggregator::Max => tape.spatial_max(cell_probs)?,
                    Aggregator::Mean => tape.spatial_mean(cell_probs)?,
                    Aggregator::Attention => unreachable!("rejected by HeadConfig::validate"),
                };
                Ok(HeadOutput { cell_probs, global, attention: None })
            }
            HeadMode::Embedding => {
                let mut attention = None;
                let pooled = match self.config.aggregator {
                    Aggregator::Max => tape.spatial_max(features.var)?,
                    Aggregator::Mean => tape.spatial_mean(features.var)?,
                    Aggregator::Attention => {
                        let (v_id, w_id) = self.attention.expect("attention parameters");
                        let rows = tape.cells_to_rows(features.var)?;
                        let v = tape.param(store, v_id)?;
                        let hidden = tape.matmul(rows, v)?;
                        let hidden = tape.tanh(hidden)?;
                        let wv = tape.param(store, w_id)?;
                        let scores = tape.matmul(hidden, wv)?;
                        let scores = tape.reshape(scores, &[n, h * w])?;
                        let a = tape.softmax_rows(scores)?;
                        attention = Some(a);
                        tape.weighted_cell_sum(a, features.var)?
                    }
                };
                let wv = tape.param(store, self.weight)?;
                let wv = tape.reshape(wv, &[c, 1])?;
                let b = tape.param(store, self.bias)?;
                let z = tape.matmul(pooled, wv)?;
                let z = tape.bias_add(z, b)?;
                let global = tape.sigmoid(z)?;
                Ok(HeadOutput { cell_probs, global, attention })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f32], h: usize, w: usize) -> ProbabilityMap {
        ProbabilityMap::new(Tensor::new(vec![h, w], v.to_vec()).unwrap(), 16).unwrap()
    }

    #[test]
    fn max_and_mean_aggregation() {
        let m = map(&[0.1, 0.9, 0.2, 0.3], 2, 2);
        assert_eq!(aggregate(&m, Aggregator::Max).unwrap().0, 0.9);
        assert!((aggregate(&m, Aggregator::Mean).unwrap().0 - 0.375).abs() < 1e-7);
        assert!(matches!(aggregate(&m, Aggregator::Attention), Err(ModelError::Config(_))));
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(0.5, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-7, 1.0).unwrap() < 1e-6);
        assert!((bce_loss(0.9, 0.0).unwrap() - 2.302585).abs() < 1e-5);
        assert!(bce_loss(0.5, 0.5).is_err());
    }

    #[test]
    fn attention_requires_embedding_mode() {
        let bad = HeadConfig::new(HeadMode::Instance, Aggregator::Attention);
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
        assert!(HeadConfig::new(HeadMode::Embedding, Aggregator::Attention).validate().is_ok());
    }

    #[test]
    fn probability_map_rejects_out_of_range() {
        assert!(ProbabilityMap::new(Tensor::new(vec![1, 2], vec![0.5, 1.5]).unwrap(), 4).is_err());
    }

    #[test]
    fn labels_parse_round_trip() {
        for cfg in HeadConfig::ablation_variants() {
            assert_eq!(cfg.mode.to_string().parse::<HeadMode>().unwrap(), cfg.mode);
            assert_eq!(cfg.aggregator.to_string().parse::<Aggregator>().unwrap(), cfg.aggregator);
        }
    }
}
