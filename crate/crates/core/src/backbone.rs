//! Truncated 18-layer residual feature extractor: a 7×7/2 stem with 3×3/2
//! max pooling, followed by 1–4 stages of two basic blocks each.
//!
//! Parameter names follow the torchvision ResNet layout under a `backbone.`
//! prefix (`conv1.weight` → `backbone.conv1.weight`,
//! `layer2.0.downsample.1.running_var` → `backbone.layer2.0.downsample.1.running_var`),
//! so externally converted ImageNet weights import by renaming keys.

use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{NumericsError, ParamId, ParamStore, Real, StatUpdate, Tape, Tensor, Var};
use crate::ModelError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub num_stages: usize,
    pub stem_channels: usize,
    pub input_channels: usize,
    pub pretrained_weights_path: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { num_stages: 3, stem_channels: 64, input_channels: 3, pretrained_weights_path: None }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(1..=4).contains(&self.num_stages) {
            return Err(ModelError::Config(format!("num_stages must be in 1..=4, got {}", self.num_stages)));
        }
        if self.stem_channels == 0 || self.input_channels == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Input pixels per feature cell.
    pub fn output_stride(&self) -> usize {
        4 << (self.num_stages - 1)
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels(self.num_stages - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are refreshed.
    Train,
    /// Running averages.
    Eval,
}

/// Backbone output: `[N,C,h,w]` features and their stride.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl Norm {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.weight"), Tensor::full(&[c], T::one()), true),
            beta: store.add(format!("{prefix}.bias"), Tensor::zeros(&[c]), true),
            mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false),
            var: store.add(format!("{prefix}.running_var"), Tensor::full(&[c], T::one()), false),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var, NumericsError> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        match mode {
            Mode::Train => {
                let (y, batch_mean, batch_var) = tape.batch_norm_train(x, g, b, BN_EPS)?;
                tape.push_stat_update(StatUpdate { mean: self.mean, var: self.var, batch_mean, batch_var });
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.mean).tensor.data().to_vec();
                let var = store.get(self.var).tensor.data().to_vec();
                tape.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
            }
        }
    }
}

fn conv_param<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: String,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> ParamId {
    // He initialization, fan-out mode.
    let std = (2.0 / (out_c * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let t = Tensor::from_fn(&[out_c, in_c, k, k], |_| T::lit(normal.sample(rng)));
    store.add(name, t, true)
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ParamId,
    bn1: Norm,
    conv2: ParamId,
    bn2: Norm,
    downsample: Option<(ParamId, Norm)>,
    stride: usize,
}

impl BasicBlock {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var, NumericsError> {
        let w1 = tape.param(store, self.conv1)?;
        let y = tape.conv2d(x, w1, self.stride, 1)?;
        let y = self.bn1.forward(tape, store, y, mode)?;
        let y = tape.relu(y)?;
        let w2 = tape.param(store, self.conv2)?;
        let y = tape.conv2d(y, w2, 1, 1)?;
        let y = self.bn2.forward(tape, store, y, mode)?;
        let shortcut = match &self.downsample {
            Some((w, bn)) => {
                let wv = tape.param(store, *w)?;
                let s = tape.conv2d(x, wv, self.stride, 0)?;
                bn.forward(tape, store, s, mode)?
            }
            None => x,
        };
        let y = tape.add(y, shortcut)?;
        tape.relu(y)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    conv1: ParamId,
    bn1: Norm,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    /// Registers all parameters in `store` under the `backbone.` prefix.
    pub fn build<T: Real>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let stem = config.stem_channels;
        let conv1 = conv_param(store, rng, "backbone.conv1.weight".into(), stem, config.input_channels, 7);
        let bn1 = Norm::register(store, "backbone.bn1", stem);
        let mut stages = Vec::with_capacity(config.num_stages);
        let mut in_c = stem;
        for s in 0..config.num_stages {
            let out_c = config.stage_channels(s);
            let mut blocks = Vec::with_capacity(2);
            for b in 0..2 {
                let p = format!("backbone.layer{}.{b}", s + 1);
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block_in = if b == 0 { in_c } else { out_c };
                let conv1 = conv_param(store, rng, format!("{p}.conv1.weight"), out_c, block_in, 3);
                let bn1 = Norm::register(store, &format!("{p}.bn1"), out_c);
                let conv2 = conv_param(store, rng, format!("{p}.conv2.weight"), out_c, out_c, 3);
                let bn2 = Norm::register(store, &format!("{p}.bn2"), out_c);
                let downsample = (stride != 1 || block_in != out_c).then(|| {
                    let w = conv_param(store, rng, format!("{p}.downsample.0.weight"), out_c, block_in, 1);
                    (w, Norm::register(store, &format!("{p}.downsample.1"), out_c))
                });
                blocks.push(BasicBlock { conv1, bn1, conv2, bn2, downsample, stride });
            }
            stages.push(blocks);
            in_c = out_c;
        }
        Ok(Self { config: config.clone(), conv1, bn1, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: Var,
        mode: Mode,
    ) -> Result<FeatureMap, NumericsError> {
        let [_, c, h, w] = tape.value(images).dims4()?;
        if c != self.config.input_channels {
            return Err(NumericsError::Dimension(format!(
                "backbone expects {} input channels, got images {:?}",
                self.config.input_channels,
                tape.value(images).shape()
            )));
        }
        let stride = self.config.output_stride();
        if h < stride || w < stride {
            return Err(NumericsError::Dimension(format!(
                "image {h}x{w} is smaller than the backbone stride {stride}"
            )));
        }
        let w1 = tape.param(store, self.conv1)?;
        let mut x = tape.conv2d(images, w1, 2, 3)?;
        x = self.bn1.forward(tape, store, x, mode)?;
        x = tape.relu(x)?;
        x = tape.max_pool2d(x, 3, 2, 1)?;
        for block in self.stages.iter().flatten() {
            x = block.forward(tape, store, x, mode)?;
        }
        Ok(FeatureMap { var: x, stride })
    }

    /// Names of every backbone tensor, in registration order.
    pub fn param_names<T: Real>(&self, store: &ParamStore<T>) -> Vec<String> {
        store.iter().map(|(_, p)| p.name.clone()).filter(|n| n.starts_with("backbone.")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rejects_out_of_range_depth() {
        for n in [0, 5] {
            let cfg = BackboneConfig { num_stages: n, ..Default::default() };
            let mut store = ParamStore::<f32>::new();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            assert!(matches!(Backbone::build(&cfg, &mut store, &mut rng), Err(ModelError::Config(_))));
        }
    }

    #[test]
    fn stride_doubles_per_stage() {
        let strides: Vec<usize> =
            (1..=4).map(|n| BackboneConfig { num_stages: n, ..Default::default() }.output_stride()).collect();
        assert_eq!(strides, vec![4, 8, 16, 32]);
    }
}
