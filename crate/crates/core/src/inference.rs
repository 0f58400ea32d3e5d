//! From probability maps to centroids: upsampling, operating-point
//! threshold selection and connected-component extraction.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::head::ProbabilityMap;
use crate::model::{images_to_tensor, Model};
use crate::numerics::{bilinear_affine, Checkpoint, NumericsError, Tensor};
use crate::stain::{estimate_pooled_profile, normalize, StainProfile};
use crate::ModelError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InferenceError {
    #[error("cannot select a threshold: {0}")]
    Threshold(String),
    #[error("invalid threshold {0}: must lie strictly inside (0, 1)")]
    Range(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub row: f64,
    pub col: f64,
    pub score: f64,
}

impl Detection {
    pub fn position(&self) -> (f64, f64) {
        (self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    RocOperativePoint,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub value: f64,
    pub source: ThresholdSource,
}

impl ThresholdPolicy {
    pub fn fixed(value: f64) -> Result<Self, InferenceError> {
        if !(value > 0.0 && value < 1.0) {
            return Err(InferenceError::Range(value));
        }
        Ok(Self { value, source: ThresholdSource::Fixed })
    }
}

/// Result of the operating-point search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub policy: ThresholdPolicy,
    /// Youden's J = TPR − FPR of the chosen cut.
    pub youden_j: f64,
    /// The lowest score of the positive side of the chosen cut.
    pub cut_score: f64,
}

/// Sweeps every unique score `s` (descending) as the rule `score ≥ s`, keeps
/// the first maximizer of Youden's J and returns the midpoint between it and
/// the next lower unique score. When the chosen score is the minimum, half of
/// it is returned (or, for a minimum of 0, the midpoint between the maximum
/// score and 1). A non-positive best J logs a warning.
pub fn roc_operating_point(scores: &[(f64, bool)]) -> Result<OperatingPoint, InferenceError> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| !(0.0..=1.0).contains(s)) {
        return Err(InferenceError::Threshold(format!("score {s} is outside [0, 1]")));
    }
    let pos = scores.iter().filter(|(_, y)| *y).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(InferenceError::Threshold("validation scores contain a single class".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    if sorted[0].0 == sorted[sorted.len() - 1].0 {
        return Err(InferenceError::Threshold("all scores are equal; no cut separates them".into()));
    }
    let mut uniques = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<(usize, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let j = tp as f64 / pos as f64 - fp as f64 / neg as f64;
        if best.is_none_or(|(_, bj)| j > bj) {
            best = Some((uniques.len(), j));
        }
        uniques.push(s);
    }
    let (k, youden_j) = best.expect("at least one unique score");
    let cut_score = uniques[k];
    let value = match uniques.get(k + 1) {
        Some(&lower) => 0.5 * (cut_score + lower),
        // Accepting everything scores J = 0, as does rejecting everything;
        // the latter is the only option when the minimum score is 0.
        None if cut_score == 0.0 => 0.5 * (1.0 + uniques[0]),
        None => 0.5 * cut_score,
    };
    let value = value.clamp(1e-9, 1.0 - 1e-9);
    if youden_j <= 0.0 {
        log::warn!("operating point has Youden J = {youden_j:.4}; validation scores do not separate the classes");
    }
    Ok(OperatingPoint { policy: ThresholdPolicy { value, source: ThresholdSource::RocOperativePoint }, youden_j, cut_score })
}

pub fn select_threshold(scores: &[(f64, bool)]) -> Result<ThresholdPolicy, InferenceError> {
    Ok(roc_operating_point(scores)?.policy)
}

/// Coarse and full-resolution maps for one image.
#[derive(Debug, Clone)]
pub struct MapPrediction {
    pub global: f64,
    pub coarse: ProbabilityMap,
    /// `[H, W]`, the input resolution.
    pub full: Tensor<f32>,
}

/// Upsamples a coarse map to `out_h × out_w`. The backbone's padded,
/// strided convolutions centre feature cell `j` on input pixel `stride·j`,
/// so the map is sampled at `pixel / stride` rather than on the half-pixel
/// grid, which would shift every detection by `(stride − 1)/2` pixels.
pub fn upsample(coarse: &ProbabilityMap, out_h: usize, out_w: usize) -> Result<Tensor<f32>, NumericsError> {
    let step = 1.0 / coarse.stride.max(1) as f64;
    let mut full = bilinear_affine(&coarse.values, out_h, out_w, (step, 0.0), (step, 0.0))?;
    // Interpolation is convex; clamping only removes rounding excursions.
    for v in full.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(full)
}

/// Inference-mode maps for a batch of equally sized images.
pub fn predict_maps(model: &Model, images: &[&RgbImage]) -> Result<Vec<MapPrediction>, NumericsError> {
    let x = images_to_tensor(images.iter().copied())?;
    let [_, _, h, w] = x.dims4()?;
    model
        .predict(x)?
        .into_iter()
        .map(|p| {
            let coarse = ProbabilityMap::new(p.cells, p.stride)?;
            let full = upsample(&coarse, h, w)?;
            Ok(MapPrediction { global: p.global as f64, coarse, full })
        })
        .collect()
}

pub fn predict_map(model: &Model, image: &RgbImage) -> Result<MapPrediction, NumericsError> {
    Ok(predict_maps(model, &[image])?.pop().expect("one image in, one map out"))
}

/// 8-connected labeling of a row-major mask. Labels start at 1 in raster
/// order of each component's first pixel; 0 is background.
pub fn label_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count as u32;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let q = rr as usize * w + cc as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = count as u32;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Binarizes `map ≥ threshold` and emits one detection per 8-connected
/// component of at least `min_area` pixels: the unweighted centroid and the
/// component's maximum probability.
pub fn extract_detections(map: &Tensor<f32>, policy: &ThresholdPolicy, min_area: usize) -> Result<Vec<Detection>, NumericsError> {
    let [h, w] = map.dims2()?;
    let mask: Vec<bool> = map.data().iter().map(|&p| p as f64 >= policy.value).collect();
    let (labels, count) = label_components(&mask, h, w);
    let mut acc = vec![(0usize, 0.0f64, 0.0f64, 0.0f64); count];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let a = &mut acc[l as usize - 1];
        a.0 += 1;
        a.1 += (i / w) as f64;
        a.2 += (i % w) as f64;
        a.3 = a.3.max(map.data()[i] as f64);
    }
    Ok(acc
        .into_iter()
        .filter(|a| a.0 >= min_area.max(1))
        .map(|(n, r, c, s)| Detection { row: r / n as f64, col: c / n as f64, score: s })
        .collect())
}

/// Grayscale rendering of a probability map, `round(255·p)`.
pub fn map_to_png(map: &Tensor<f32>) -> Result<GrayImage, NumericsError> {
    let [h, w] = map.dims2()?;
    let px = map.data().iter().map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions"))
}

/// One row of a detections CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image_id: String,
    pub row: f64,
    pub col: f64,
    pub score: f64,
}

pub fn write_detections_csv(path: &Path, rows: &[DetectionRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Detections grouped by image id, in file order within each image.
pub fn read_detections_csv(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>, csv::Error> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for r in csv::Reader::from_path(path)?.deserialize() {
        let r: DetectionRow = r?;
        out.entry(r.image_id).or_default().push(Detection { row: r.row, col: r.col, score: r.score });
    }
    Ok(out)
}

/// A trained model with the threshold, component filter and stain handling
/// stored alongside it at training time.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: Model,
    pub policy: ThresholdPolicy,
    pub min_area: usize,
    /// Target profile when inputs are stain-normalized.
    pub stain_target: Option<StainProfile>,
}

/// Per-image output of [`Predictor::run`].
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub maps: MapPrediction,
    pub detections: Vec<Detection>,
}

impl Predictor {
    /// Reads the model and the `threshold`, `inference.min_area` and
    /// `config` metadata of a training checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let model = Model::from_checkpoint(ck)?;
        let threshold: f64 = ck
            .meta
            .get("threshold")
            .ok_or_else(|| ModelError::Load("checkpoint carries no threshold; was it written by training?".into()))?
            .parse()
            .map_err(|_| ModelError::Load("unreadable threshold".into()))?;
        let policy = ThresholdPolicy { value: threshold, source: ThresholdSource::RocOperativePoint };
        let config = match ck.meta.get("config") {
            Some(text) => RunConfig::parse(text).map_err(|e| ModelError::Load(format!("stored config: {e}")))?,
            None => RunConfig::default(),
        };
        let stain_target = if config.stain_normalize {
            Some(config.target_profile().map_err(|e| ModelError::Load(e.to_string()))?)
        } else {
            None
        };
        Ok(Self { model, policy, min_area: config.min_area, stain_target })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Stain-normalizes `images` as one pooled group when enabled. A group
    /// without enough tissue is passed through unchanged.
    pub fn prepare(&self, images: &[RgbImage]) -> Vec<RgbImage> {
        let Some(target) = &self.stain_target else { return images.to_vec() };
        let refs: Vec<&RgbImage> = images.iter().collect();
        match estimate_pooled_profile(&refs) {
            Ok(source) => images.iter().map(|im| normalize(im, &source, target).expect("estimated profile is valid")).collect(),
            Err(e) => {
                log::warn!("stain normalization skipped ({e})");
                images.to_vec()
            }
        }
    }

    /// Maps and detections for already prepared images.
    pub fn run(&self, images: &[RgbImage]) -> Result<Vec<ImageResult>, NumericsError> {
        let mut out = Vec::with_capacity(images.len());
        for im in images {
            let maps = predict_map(&self.model, im)?;
            let detections = extract_detections(&maps.full, &self.policy, self.min_area)?;
            out.push(ImageResult { maps, detections });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_midpoint() {
        let s = [(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        let p = select_threshold(&s).unwrap();
        assert!((p.value - 0.5).abs() < 1e-12);
        assert_eq!(p.source, ThresholdSource::RocOperativePoint);
    }

    #[test]
    fn inverted_scores_still_return_policy() {
        let s = [(0.1, true), (0.2, true), (0.8, false), (0.9, false)];
        let op = roc_operating_point(&s).unwrap();
        assert!(op.youden_j <= 0.0);
        assert!(op.policy.value > 0.0 && op.policy.value < 1.0);
    }

    #[test]
    fn threshold_errors() {
        assert!(select_threshold(&[(0.4, true), (0.4, false)]).is_err());
        assert!(select_threshold(&[(0.4, true), (0.6, true)]).is_err());
        assert!(ThresholdPolicy::fixed(1.0).is_err());
    }

    #[test]
    fn square_blob() {
        let mut t = Tensor::<f32>::zeros(&[21, 21]);
        for r in 9..=11 {
            for c in 9..=11 {
                t.data_mut()[r * 21 + c] = 0.9;
            }
        }
        let d = extract_detections(&t, &ThresholdPolicy::fixed(0.5).unwrap(), 1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].row, d[0].col), (10.0, 10.0));
        assert!((d[0].score - 0.9).abs() < 1e-6);
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        let mask = [true, false, false, true];
        assert_eq!(label_components(&mask, 2, 2).1, 1);
    }
}
