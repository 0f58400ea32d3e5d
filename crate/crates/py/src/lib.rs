//! Python bindings: synthetic data, stain normalization, metrics, training
//! and checkpoint inference. Images cross the boundary as file paths.

use std::collections::HashMap;
use std::path::PathBuf;

use mitoloc::config::RunConfig;
use mitoloc::data::synth::{generate_synthetic as synth, SynthConfig};
use mitoloc::data::DatasetManifest;
use mitoloc::evaluation;
use mitoloc::inference::{self, Predictor as CorePredictor};
use mitoloc::stain::{self, StainProfile};
use mitoloc::train::{self, PreparedData};
use mitoloc::{HeadConfig, Model as CoreModel};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn read_rgb(path: &str) -> PyResult<image::RgbImage> {
    Ok(image::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?.to_rgb8())
}

fn profile_from(v: Option<Vec<f64>>) -> PyResult<StainProfile> {
    match v {
        None => Ok(StainProfile::REFERENCE),
        Some(v) => {
            let a: [f64; 8] = v.try_into().map_err(|_| value_err("a stain profile has 8 numbers"))?;
            Ok(StainProfile::from_array(a))
        }
    }
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_patches=2000, patch_size=64, positive_fraction=0.3, n_patients=20, seed=1))]
fn generate_synthetic(
    out_dir: PathBuf,
    n_patches: usize,
    patch_size: u32,
    positive_fraction: f64,
    n_patients: usize,
    seed: u64,
) -> PyResult<String> {
    let cfg = SynthConfig { n_patches, patch_size, positive_fraction, n_patients, rng_seed: seed, ..Default::default() };
    synth(&cfg, &out_dir).map_err(value_err)?;
    Ok(out_dir.join(mitoloc::data::synth::MANIFEST_NAME).display().to_string())
}

/// Default match radius of the synthetic geometry.
#[pyfunction]
fn synthetic_match_radius() -> f64 {
    SynthConfig::default().match_radius
}

/// Macenko profile of an image as `[h_r, h_g, h_b, e_r, e_g, e_b, c_h, c_e]`.
#[pyfunction]
fn estimate_stain_profile(path: &str) -> PyResult<Vec<f64>> {
    Ok(stain::estimate_stain_profile(&read_rgb(path)?).map_err(value_err)?.to_array().to_vec())
}

#[pyfunction]
fn reference_stain_profile() -> Vec<f64> {
    StainProfile::REFERENCE.to_array().to_vec()
}

/// Normalizes `input` toward `target` (the built-in reference by default)
/// and writes the result to `output`.
#[pyfunction]
#[pyo3(signature = (input, output, target=None))]
fn normalize_image(input: &str, output: &str, target: Option<Vec<f64>>) -> PyResult<()> {
    let out = stain::normalize_to(&read_rgb(input)?, &profile_from(target)?).map_err(value_err)?;
    out.save(output).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Optimal one-to-one matching within `radius`; returns tp, fp, fn and the
/// matched `(detection, annotation, distance)` triples.
#[pyfunction]
#[pyo3(signature = (detections, annotations, radius=30.0))]
fn match_detections(
    py: Python<'_>,
    detections: Vec<(f64, f64)>,
    annotations: Vec<(f64, f64)>,
    radius: f64,
) -> PyResult<Py<PyAny>> {
    let r = evaluation::match_detections(&detections, &annotations, radius).map_err(value_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("tp", r.tp)?;
    d.set_item("fp", r.fp)?;
    d.set_item("fn", r.fn_)?;
    let pairs: Vec<(usize, usize, f64)> = r.pairs.iter().map(|p| (p.detection, p.annotation, p.distance)).collect();
    d.set_item("pairs", pairs)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> f64 {
    evaluation::f1_score(precision, recall)
}

/// Precision, recall and F1 from detection counts.
#[pyfunction]
fn prf1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let m = evaluation::prf1(evaluation::Counts { tp, fp, fn_ });
    (m.precision, m.recall, m.f1)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluation::auc(&scores, &labels).map_err(value_err)
}

/// Youden-optimal operating threshold of image-level scores.
#[pyfunction]
fn select_threshold(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    let pairs: Vec<(f64, bool)> = scores.into_iter().zip(labels).collect();
    Ok(inference::select_threshold(&pairs).map_err(value_err)?.value)
}

fn run_config(settings: Option<HashMap<String, String>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut keys: Vec<(String, String)> = settings.unwrap_or_default().into_iter().collect();
    keys.sort();
    for (k, v) in keys {
        cfg.set(&k, &v).map_err(value_err)?;
    }
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Trains with dotted-key `settings` (e.g. `{"train.epochs": "5"}`), writes
/// the run files to `paths.output_dir` and returns test metrics of the best
/// checkpoint.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn train_model(py: Python<'_>, settings: Option<HashMap<String, String>>) -> PyResult<HashMap<String, f64>> {
    let cfg = run_config(settings)?;
    py.detach(|| {
        let path = cfg.manifest.clone().ok_or_else(|| value_err("data.manifest is not set"))?;
        let manifest = DatasetManifest::load(&path).map_err(value_err)?;
        let data = PreparedData::load(&manifest, &cfg).map_err(value_err)?;
        let (trainer, m) = train::train_and_evaluate(&cfg, &data).map_err(value_err)?;
        train::write_run_files(&cfg.output_dir, &trainer).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let best = trainer.best.as_ref().map_or(0, |b| b.epoch);
        Ok(HashMap::from([
            ("best_epoch".to_string(), best as f64),
            ("image_f1".to_string(), m.image.f1),
            ("image_auc".to_string(), m.image.auc.unwrap_or(f64::NAN)),
            ("loc_precision".to_string(), m.localization.precision),
            ("loc_recall".to_string(), m.localization.recall),
            ("loc_f1".to_string(), m.localization.f1),
        ]))
    })
}

/// An untrained model, mainly for inspecting architectures.
#[pyclass]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (num_stages=3, stem_channels=64, mode="instance", aggregator="max", seed=1))]
    fn new(num_stages: usize, stem_channels: usize, mode: &str, aggregator: &str, seed: u64) -> PyResult<Self> {
        let bb = mitoloc::BackboneConfig { num_stages, stem_channels, ..Default::default() };
        let head = HeadConfig::new(mode.parse().map_err(value_err)?, aggregator.parse().map_err(value_err)?);
        Ok(Self { inner: CoreModel::new(&bb, &head, seed).map_err(value_err)? })
    }

    #[getter]
    fn stride(&self) -> usize {
        self.inner.backbone_config().output_stride()
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.numel()).sum()
    }

    /// Global score and coarse per-cell map of one image.
    fn predict(&self, path: &str) -> PyResult<(f64, Vec<Vec<f64>>)> {
        let m = inference::predict_map(&self.inner, &read_rgb(path)?).map_err(value_err)?;
        Ok((m.global, rows(&m.coarse.values)))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }
}

fn rows(t: &mitoloc::numerics::Tensor<f32>) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// A trained checkpoint with its stored threshold.
#[pyclass]
struct Predictor {
    inner: CorePredictor,
}

#[pymethods]
impl Predictor {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CorePredictor::load(&checkpoint).map_err(value_err)? })
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.policy.value
    }

    /// `(global score, [(row, col, score), ...])` per image. The images are
    /// stain-normalized as one group.
    fn detect(&self, paths: Vec<String>) -> PyResult<Vec<(f64, Vec<(f64, f64, f64)>)>> {
        let images = paths.iter().map(|p| read_rgb(p)).collect::<PyResult<Vec<_>>>()?;
        let out = self.inner.run(&self.inner.prepare(&images)).map_err(value_err)?;
        Ok(out
            .into_iter()
            .map(|r| (r.maps.global, r.detections.iter().map(|d| (d.row, d.col, d.score)).collect()))
            .collect())
    }

    /// Full-resolution probability map of one image.
    fn probability_map(&self, path: &str) -> PyResult<Vec<Vec<f64>>> {
        let img = self.inner.prepare(&[read_rgb(path)?]);
        let m = inference::predict_map(&self.inner.model, &img[0]).map_err(value_err)?;
        Ok(rows(&m.full))
    }
}

#[pymodule]
#[pyo3(name = "mitoloc")]
fn mitoloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_match_radius, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_stain_profile, m)?)?;
    m.add_function(wrap_pyfunction!(reference_stain_profile, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_image, m)?)?;
    m.add_function(wrap_pyfunction!(match_detections, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(prf1, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Predictor>()?;
    Ok(())
}
