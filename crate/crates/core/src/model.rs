use std::path::Path;

use image::RgbImage;

use crate::backbone::{Backbone, BackboneConfig, FeatureMap, Mode};
use crate::head::{Head, HeadConfig, HeadOutput};
use crate::numerics::{Checkpoint, NumericsError, ParamStore, Real, Tape, Tensor, Var};
use crate::{rng_stream, ModelError};

/// Per-channel input normalization (ImageNet statistics, matching the
/// convention of externally pre-trained weights).
pub const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Stacks RGB images of identical size into a normalized `[N,3,H,W]` batch.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Tensor<f32>, NumericsError> {
    let images: Vec<&RgbImage> = images.into_iter().collect();
    let Some(first) = images.first() else {
        return Err(NumericsError::Dimension("empty image batch".into()));
    };
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in &images {
        if img.dimensions() != first.dimensions() {
            return Err(NumericsError::Dimension(format!(
                "batch mixes image sizes {:?} and {:?}",
                first.dimensions(),
                img.dimensions()
            )));
        }
        let raw = img.as_raw();
        for ch in 0..3 {
            data.extend(raw.iter().skip(ch).step_by(3).map(|&v| (v as f32 / 255.0 - INPUT_MEAN[ch]) / INPUT_STD[ch]));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Forward-pass handles for a batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub features: FeatureMap,
    pub head: HeadOutput,
}

/// Backbone and head layout plus the `f32` parameters they index.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub head: Head,
    pub params: ParamStore<f32>,
}

/// Scores for one image computed in inference mode.
#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub global: f32,
    /// `[h, w]` per-cell probabilities.
    pub cells: Tensor<f32>,
    pub stride: usize,
}

impl Model {
    /// Fresh model; initialization draws from the `init` stream of `seed`.
    pub fn new(backbone: &BackboneConfig, head: &HeadConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = rng_stream(seed, "init");
        let mut params = ParamStore::new();
        let bb = Backbone::build(backbone, &mut params, &mut rng)?;
        let hd = Head::build(head, backbone.out_channels(), &mut params, &mut rng)?;
        let mut model = Self { backbone: bb, head: hd, params };
        if let Some(path) = &backbone.pretrained_weights_path {
            let unmatched = model.load_pretrained(path)?;
            if !unmatched.is_empty() {
                log::warn!("ignored {} tensors from {}: {unmatched:?}", unmatched.len(), path.display());
            }
        }
        Ok(model)
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn head_config(&self) -> &HeadConfig {
        self.head.config()
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: Var,
        mode: Mode,
    ) -> Result<ModelOutput, NumericsError> {
        let features = self.backbone.forward(tape, store, images, mode)?;
        let head = self.head.forward(tape, store, &features)?;
        Ok(ModelOutput { features, head })
    }

    /// Inference-mode scores for a normalized `[N,3,H,W]` batch.
    pub fn predict(&self, images: Tensor<f32>) -> Result<Vec<ImagePrediction>, NumericsError> {
        let mut tape = Tape::new();
        let x = tape.leaf(images)?;
        let out = self.forward(&mut tape, &self.params, x, Mode::Eval)?;
        let cells = tape.value(out.head.cell_probs);
        let [n, _, h, w] = cells.dims4()?;
        let global = tape.value(out.head.global).data();
        Ok((0..n)
            .map(|i| ImagePrediction {
                global: global[i],
                cells: Tensor::new(vec![h, w], cells.data()[i * h * w..(i + 1) * h * w].to_vec()).unwrap(),
                stride: out.features.stride,
            })
            .collect())
    }

    /// Parameters, buffers and architecture in one checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let b = self.backbone_config();
        let h = self.head_config();
        ck.meta.insert("backbone.num_stages".into(), b.num_stages.to_string());
        ck.meta.insert("backbone.stem_channels".into(), b.stem_channels.to_string());
        ck.meta.insert("backbone.input_channels".into(), b.input_channels.to_string());
        ck.meta.insert("head.mode".into(), h.mode.to_string());
        ck.meta.insert("head.aggregator".into(), h.aggregator.to_string());
        ck.meta.insert("head.attention_hidden_dim".into(), h.attention_hidden_dim.to_string());
        for (_, p) in self.params.iter() {
            ck.insert(p.name.clone(), p.tensor.clone().with_requires_grad(false));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let meta = |k: &str| {
            ck.meta.get(k).ok_or_else(|| ModelError::Load(format!("checkpoint lacks metadata {k}")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            meta(k)?.parse().map_err(|_| ModelError::Load(format!("bad metadata {k}")))
        };
        let backbone = BackboneConfig {
            num_stages: num("backbone.num_stages")?,
            stem_channels: num("backbone.stem_channels")?,
            input_channels: num("backbone.input_channels")?,
            pretrained_weights_path: None,
        };
        let head = HeadConfig {
            mode: meta("head.mode")?.parse()?,
            aggregator: meta("head.aggregator")?.parse()?,
            attention_hidden_dim: num("head.attention_hidden_dim")?,
        };
        let mut model = Self::new(&backbone, &head, 0)?;
        let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
        let missing: Vec<&String> = names.iter().filter(|n| ck.get(n).is_none()).collect();
        if !missing.is_empty() {
            return Err(ModelError::Load(format!("checkpoint lacks parameters {missing:?}")));
        }
        for name in &names {
            model.params.assign(name, ck.get(name).expect("checked")).map_err(|e| ModelError::Load(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Overwrites every backbone tensor from a checkpoint file. Names may
    /// carry the `backbone.` prefix or be bare torchvision names. Returns
    /// the file entries that matched nothing.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<Vec<String>, ModelError> {
        let ck = Checkpoint::load(path)?;
        let wanted = self.backbone.param_names(&self.params);
        let key = |n: &str| if n.starts_with("backbone.") { n.to_string() } else { format!("backbone.{n}") };
        let mut provided = std::collections::BTreeMap::new();
        let mut unmatched = Vec::new();
        for (name, t) in &ck.tensors {
            let k = key(name);
            if wanted.contains(&k) {
                provided.insert(k, t);
            } else {
                unmatched.push(name.clone());
            }
        }
        let missing: Vec<&String> = wanted.iter().filter(|n| !provided.contains_key(*n)).collect();
        if !missing.is_empty() {
            return Err(ModelError::Load(format!("{} lacks parameters {missing:?}", path.display())));
        }
        for (name, t) in provided {
            let expected = self.params.by_name(&name).expect("wanted").tensor.shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(ModelError::Load(format!(
                    "parameter {name}: file has shape {:?}, model needs {expected:?}",
                    t.shape()
                )));
            }
            self.params.assign(&name, t)?;
        }
        Ok(unmatched)
    }
}
