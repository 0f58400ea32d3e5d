//! Training loop, validation-based model selection and variant ablation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use image::RgbImage;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Mode;
use crate::config::RunConfig;
use crate::data::{augment::AugmentPlan, BalancedSampler, DataError, DatasetManifest, Sample, Split};
use crate::evaluation::{image_level_metrics, match_detections, prf1, Counts, EvalError, MetricSummary};
use crate::inference::{extract_detections, predict_maps, roc_operating_point, MapPrediction, ThresholdPolicy};
use crate::model::{images_to_tensor, Model};
use crate::numerics::{Adam, AdamConfig, AdamState, Checkpoint, NumericsError, Tape, Tensor};
use crate::stain::{estimate_pooled_profile, normalize, StainProfile};
use crate::{rng_stream, ModelError};

/// Threshold used when validation scores cannot define an operating point.
pub const FALLBACK_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite value during training (epoch {epoch}, batch {batch}, samples {indices:?}, H = {scores:?}): {source}")]
    NonFinite { epoch: usize, batch: usize, indices: Vec<usize>, scores: Vec<f32>, source: NumericsError },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Loaded and stain-normalized splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Normalizes every image toward `target`, pooling the source estimate
/// over all images of the same patient. Patients whose pixels do not yield
/// a profile are left as they are.
pub fn normalize_by_patient(samples: &mut [Sample], target: &StainProfile) {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.record.patient_id.clone()).or_default().push(i);
    }
    for (patient, idx) in groups {
        let images: Vec<&RgbImage> = idx.iter().map(|&i| &samples[i].image).collect();
        match estimate_pooled_profile(&images) {
            Ok(source) => {
                for &i in &idx {
                    samples[i].image = normalize(&samples[i].image, &source, target).expect("estimated profile is valid");
                }
            }
            Err(e) => log::warn!("patient {patient}: stain normalization skipped ({e})"),
        }
    }
}

impl PreparedData {
    pub fn load(manifest: &DatasetManifest, config: &RunConfig) -> Result<Self, TrainError> {
        let target = config.target_profile().map_err(|e| TrainError::Config(e.to_string()))?;
        let load = |split| -> Result<Vec<Sample>, TrainError> {
            let mut s = manifest.load_split(split)?;
            if config.stain_normalize {
                normalize_by_patient(&mut s, &target);
            }
            Ok(s)
        };
        let data = Self { train: load(Split::Train)?, val: load(Split::Val)?, test: load(Split::Test)? };
        if data.train.is_empty() || data.val.is_empty() {
            return Err(TrainError::Config("the manifest needs non-empty train and val splits".into()));
        }
        Ok(data)
    }
}

/// Per-image scores and maps for one split.
#[derive(Debug, Clone)]
pub struct SplitPrediction {
    pub maps: Vec<MapPrediction>,
}

impl SplitPrediction {
    pub fn scores(&self) -> Vec<f64> {
        self.maps.iter().map(|m| m.global).collect()
    }
}

pub fn predict_split(model: &Model, samples: &[Sample], batch_size: usize) -> Result<SplitPrediction, NumericsError> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        maps.extend(predict_maps(model, &images)?);
    }
    Ok(SplitPrediction { maps })
}

/// Micro-averaged detection counts of thresholded maps against centroids.
pub fn localization_counts(
    maps: &[MapPrediction],
    samples: &[Sample],
    policy: &ThresholdPolicy,
    min_area: usize,
    radius: f64,
) -> Result<Counts, TrainError> {
    let mut total = Counts::default();
    for (m, s) in maps.iter().zip(samples) {
        let dets: Vec<(f64, f64)> = extract_detections(&m.full, policy, min_area)?.iter().map(|d| d.position()).collect();
        total += match_detections(&dets, &s.record.centroids, radius)?.counts();
    }
    Ok(total)
}

/// Image-level and localization metrics of one split at a given threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub image: MetricSummary,
    pub localization: MetricSummary,
    pub counts: Counts,
}

pub fn evaluate_split(
    model: &Model,
    samples: &[Sample],
    policy: &ThresholdPolicy,
    config: &RunConfig,
) -> Result<SplitMetrics, TrainError> {
    let pred = predict_split(model, samples, config.batch_size)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.record.label).collect();
    let image = image_level_metrics(&pred.scores(), &labels, policy.value)?;
    let counts = localization_counts(&pred.maps, samples, policy, config.min_area, config.match_radius)?;
    Ok(SplitMetrics { image, localization: prf1(counts), counts })
}

/// Operating point on validation scores, or the fallback when undefined.
pub fn validation_threshold(scores: &[f64], labels: &[bool]) -> ThresholdPolicy {
    let pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    match roc_operating_point(&pairs) {
        Ok(op) => op.policy,
        Err(e) => {
            log::warn!("{e}; using threshold {FALLBACK_THRESHOLD}");
            ThresholdPolicy::fixed(FALLBACK_THRESHOLD).expect("inside (0, 1)")
        }
    }
}

/// Mean batch loss and image scores of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub scores: Vec<f32>,
}

/// One forward/backward pass with batch statistics, running-stat refresh
/// and an Adam update.
pub fn train_step(model: &mut Model, adam: &mut Adam, images: Tensor<f32>, labels: &[f32]) -> Result<StepOutput, NumericsError> {
    let mut tape = Tape::new();
    let x = tape.leaf(images)?;
    let out = model.forward(&mut tape, &model.params, x, Mode::Train)?;
    let scores = tape.value(out.head.global).data().to_vec();
    let loss_var = tape.bce_mean(out.head.global, labels)?;
    let loss = tape.value(loss_var).data()[0] as f64;
    let updates = tape.take_stat_updates();
    tape.backward(loss_var, &mut model.params)?;
    model.params.apply_stat_updates(updates, crate::backbone::BN_MOMENTUM);
    adam.step(&mut model.params)?;
    Ok(StepOutput { loss, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_image_f1: f64,
    pub val_loc_f1: f64,
    pub threshold: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_auc,val_image_f1,val_loc_f1,threshold";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_auc, self.val_image_f1, self.val_loc_f1, self.threshold
        )
    }
}

/// Snapshot of the epoch with the best validation image-level F1.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_image_f1: f64,
    pub threshold: f64,
    pub checkpoint: Checkpoint,
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    data: &'a PreparedData,
    pub model: Model,
    adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestSnapshot>,
    pub log: Vec<EpochLog>,
    pub last_threshold: f64,
}

fn adam_config(config: &RunConfig) -> AdamConfig {
    AdamConfig { lr: config.learning_rate, ..Default::default() }
}

impl<'a> Trainer<'a> {
    pub fn new(config: &RunConfig, data: &'a PreparedData) -> Result<Self, TrainError> {
        config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let model = Model::new(&config.backbone, &config.head, config.seed)?;
        Ok(Self {
            config: config.clone(),
            data,
            model,
            adam: Adam::new(adam_config(config)),
            epoch: 0,
            best: None,
            log: Vec::new(),
            last_threshold: FALLBACK_THRESHOLD,
        })
    }

    /// Continues from a state checkpoint written by [`Trainer::state_checkpoint`].
    pub fn resume(
        config: &RunConfig,
        data: &'a PreparedData,
        state: &Checkpoint,
        best: Option<Checkpoint>,
        log: Vec<EpochLog>,
    ) -> Result<Self, TrainError> {
        let mut t = Self::new(config, data)?;
        t.model = Model::from_checkpoint(state)?;
        if t.model.backbone_config().num_stages != config.backbone.num_stages || t.model.head_config() != &config.head {
            return Err(TrainError::Config("resume checkpoint architecture differs from the configuration".into()));
        }
        let meta = |k: &str| state.meta.get(k).ok_or_else(|| TrainError::Config(format!("state checkpoint lacks {k}")));
        t.epoch = meta("epoch")?.parse().map_err(|_| TrainError::Config("bad epoch".into()))?;
        let steps: u64 = meta("optim.t")?.parse().map_err(|_| TrainError::Config("bad optim.t".into()))?;
        t.last_threshold = meta("threshold")?.parse().map_err(|_| TrainError::Config("bad threshold".into()))?;
        if steps > 0 {
            let names: Vec<(usize, String, bool)> =
                t.model.params.iter().map(|(id, p)| (id.0, p.name.clone(), p.trainable)).collect();
            for (index, name, trainable) in names {
                if !trainable {
                    continue;
                }
                let get = |kind: &str| {
                    state
                        .get(&format!("optim.{kind}.{name}"))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| TrainError::Config(format!("state checkpoint lacks optimizer moments of {name}")))
                };
                t.adam.set_state(index, AdamState { m: get("m")?, v: get("v")?, t: steps });
            }
        }
        if let Some(b) = best {
            let num = |k: &str| -> Result<f64, TrainError> {
                b.meta.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| TrainError::Config(format!("best checkpoint lacks {k}")))
            };
            t.best = Some(BestSnapshot {
                epoch: num("epoch")? as usize,
                val_image_f1: num("val_image_f1")?,
                threshold: num("threshold")?,
                checkpoint: b,
            });
        }
        t.log = log;
        Ok(t)
    }

    fn sampler_labels(&self) -> Vec<bool> {
        self.data.train.iter().map(|s| s.record.label).collect()
    }

    /// Runs one epoch of balanced, augmented training and validates.
    pub fn run_epoch(&mut self) -> Result<EpochLog, TrainError> {
        let epoch = self.epoch + 1;
        let mut sampler = BalancedSampler::new(
            &self.sampler_labels(),
            self.config.batch_size,
            rng_stream(self.config.seed, &format!("sampler.{epoch}")),
        )?;
        let mut aug_rng: ChaCha8Rng = rng_stream(self.config.seed, &format!("augment.{epoch}"));
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (b, batch) in sampler.epoch().into_iter().enumerate() {
            let images: Vec<RgbImage> = batch
                .iter()
                .map(|&i| {
                    let s = &self.data.train[i];
                    if self.config.augment {
                        AugmentPlan::sample(&mut aug_rng, s.image.height(), s.image.width())
                            .apply(&s.image, &s.record.centroids)
                            .0
                    } else {
                        s.image.clone()
                    }
                })
                .collect();
            let labels: Vec<f32> = batch.iter().map(|&i| self.data.train[i].label_f32()).collect();
            let x = images_to_tensor(&images)?;
            let out = train_step(&mut self.model, &mut self.adam, x, &labels).map_err(|source| {
                let scores = predict_scores_quiet(&self.model, &images);
                TrainError::NonFinite { epoch, batch: b, indices: batch.clone(), scores, source }
            })?;
            loss_sum += out.loss * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = loss_sum / count.max(1) as f64;

        let pred = predict_split(&self.model, &self.data.val, self.config.batch_size)?;
        let labels: Vec<bool> = self.data.val.iter().map(|s| s.record.label).collect();
        let scores = pred.scores();
        let policy = validation_threshold(&scores, &labels);
        let (val_auc, val_image_f1) = match image_level_metrics(&scores, &labels, policy.value) {
            Ok(m) => (m.auc.unwrap_or(0.0), m.f1),
            Err(_) => (0.0, 0.0),
        };
        let counts = localization_counts(&pred.maps, &self.data.val, &policy, self.config.min_area, self.config.match_radius)?;
        let row = EpochLog { epoch, train_loss, val_auc, val_image_f1, val_loc_f1: prf1(counts).f1, threshold: policy.value };
        self.epoch = epoch;
        self.last_threshold = policy.value;
        if self.best.as_ref().is_none_or(|b| val_image_f1 > b.val_image_f1) {
            self.best = Some(BestSnapshot {
                epoch,
                val_image_f1,
                threshold: policy.value,
                checkpoint: self.model_checkpoint(epoch, val_image_f1, policy.value),
            });
        }
        log::info!(
            "epoch {epoch}: loss {train_loss:.4}, val AUC {val_auc:.3}, val image F1 {val_image_f1:.3}, val localization F1 {:.3}",
            row.val_loc_f1
        );
        self.log.push(row.clone());
        Ok(row)
    }

    fn model_checkpoint(&self, epoch: usize, val_image_f1: f64, threshold: f64) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta.insert("epoch".into(), epoch.to_string());
        ck.meta.insert("val_image_f1".into(), val_image_f1.to_string());
        ck.meta.insert("threshold".into(), threshold.to_string());
        ck.meta.insert("eval.match_radius".into(), self.config.match_radius.to_string());
        ck.meta.insert("inference.min_area".into(), self.config.min_area.to_string());
        ck.meta.insert("config".into(), self.config.to_text());
        ck
    }

    /// Model, optimizer moments and counters of the latest epoch.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model_checkpoint(self.epoch, self.log.last().map_or(0.0, |l| l.val_image_f1), self.last_threshold);
        ck.meta.insert("optim.t".into(), self.adam.steps_taken().to_string());
        for ((_, p), st) in self.model.params.iter().zip(self.adam.states()) {
            if let Some(st) = st {
                let shape = p.tensor.shape().to_vec();
                ck.insert(format!("optim.m.{}", p.name), Tensor::new(shape.clone(), st.m.clone()).expect("state length"));
                ck.insert(format!("optim.v.{}", p.name), Tensor::new(shape, st.v.clone()).expect("state length"));
            }
        }
        ck
    }

    /// Trains until `config.epochs`, calling `on_epoch` after each epoch.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while self.epoch < self.config.epochs {
            let row = self.run_epoch()?;
            on_epoch(self, &row)?;
        }
        Ok(())
    }

    /// The best-validation model and its stored threshold.
    pub fn best_model(&self) -> Result<(Model, ThresholdPolicy), TrainError> {
        let best = self.best.as_ref().ok_or_else(|| TrainError::Config("no epoch has completed".into()))?;
        let model = Model::from_checkpoint(&best.checkpoint)?;
        Ok((model, ThresholdPolicy::fixed(best.threshold).map_err(|e| TrainError::Config(e.to_string()))?))
    }
}

fn predict_scores_quiet(model: &Model, images: &[RgbImage]) -> Vec<f32> {
    images_to_tensor(images)
        .and_then(|x| model.predict(x))
        .map(|p| p.iter().map(|p| p.global).collect())
        .unwrap_or_default()
}

/// Writes `metrics.csv`, `last.ckpt` and `best.ckpt` under `dir`.
pub fn write_run_files(dir: &Path, trainer: &Trainer) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::from(EpochLog::HEADER);
    text.push('\n');
    for row in &trainer.log {
        text.push_str(&row.to_string());
        text.push('\n');
    }
    std::fs::write(dir.join("metrics.csv"), text)?;
    let io = |e: NumericsError| std::io::Error::other(e.to_string());
    trainer.state_checkpoint().save(&dir.join("last.ckpt")).map_err(io)?;
    if let Some(b) = &trainer.best {
        b.checkpoint.save(&dir.join("best.ckpt")).map_err(io)?;
    }
    Ok(())
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<EpochLog>, TrainError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || TrainError::Config(format!("{}: malformed log row {l:?}", path.display()));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                val_auc: num(2)?,
                val_image_f1: num(3)?,
                val_loc_f1: num(4)?,
                threshold: num(5)?,
            })
        })
        .collect()
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub label: String,
    pub num_stages: usize,
    pub image_f1: f64,
    pub loc_f1: f64,
    pub test: Option<SplitMetrics>,
    pub error: Option<String>,
}

/// Trains `config` from scratch and scores the best-validation model on
/// the test split (or validation when there is no test split).
pub fn train_and_evaluate<'a>(config: &RunConfig, data: &'a PreparedData) -> Result<(Trainer<'a>, SplitMetrics), TrainError> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.fit(|_, _| Ok(()))?;
    let (model, policy) = trainer.best_model()?;
    let eval_set = if data.test.is_empty() { &data.val } else { &data.test };
    let metrics = evaluate_split(&model, eval_set, &policy, config)?;
    Ok((trainer, metrics))
}

/// Trains every variant with the shared seed and data. A failing variant
/// yields a row with its error instead of aborting the rest.
pub fn ablate(variants: &[RunConfig], data: &PreparedData) -> Vec<VariantResult> {
    variants
        .iter()
        .map(|cfg| {
            let label = cfg.head.label();
            match train_and_evaluate(cfg, data) {
                Ok((_, m)) => VariantResult {
                    label,
                    num_stages: cfg.backbone.num_stages,
                    image_f1: m.image.f1,
                    loc_f1: m.localization.f1,
                    test: Some(m),
                    error: None,
                },
                Err(e) => VariantResult {
                    label,
                    num_stages: cfg.backbone.num_stages,
                    image_f1: f64::NAN,
                    loc_f1: f64::NAN,
                    test: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}
