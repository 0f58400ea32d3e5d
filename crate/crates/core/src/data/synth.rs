//! Synthetic H&E patches rendered in optical-density space.
//!
//! Every patch has an eosin-pink background, light elliptical nuclei and,
//! at random, dark but round hard-negative nuclei. Positive patches add 1–3
//! very dark irregular "mitotic" clumps whose pixel centroids are recorded.
//! Each patient gets its own perturbed stain vectors and intensity.

use std::f64::consts::PI;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetManifest, PatchRecord, Split};
use crate::rng_stream;
use crate::stain::od_to_rgb;

/// Canonical unit OD vectors of hematoxylin and eosin.
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
pub const EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patches: usize,
    pub patch_size: u32,
    /// Exactly `round(n_patches · positive_fraction)` patches are positive.
    pub positive_fraction: f64,
    /// Range of mitotic clump radii.
    pub mitosis_radius_px: (f64, f64),
    /// Expected light nuclei per 1000 px².
    pub distractor_density: f64,
    /// Probability that a patch holds a hard-negative nucleus.
    pub hard_negative_rate: f64,
    pub n_patients: usize,
    /// Detection match radius appropriate for this geometry. It plays the
    /// role of the 30-pixel rule at 40×: close enough that a hit names the
    /// right clump (clumps are at least `2·match_radius` apart) and wide
    /// enough for stride-16 feature cells.
    pub match_radius: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patches: 2000,
            patch_size: 64,
            positive_fraction: 0.3,
            mitosis_radius_px: (3.0, 5.0),
            distractor_density: 1.0,
            hard_negative_rate: 0.5,
            n_patients: 20,
            match_radius: 12.0,
            rng_seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(format!("positive_fraction must lie in (0, 1), got {}", self.positive_fraction));
        }
        if self.patch_size < 32 {
            return Err(format!("patch_size must be at least 32, got {}", self.patch_size));
        }
        let (lo, hi) = self.mitosis_radius_px;
        if !(lo > 0.0 && hi >= lo && hi * 4.0 < self.patch_size as f64) {
            return Err(format!("mitosis_radius_px {:?} does not fit the patch", self.mitosis_radius_px));
        }
        if self.n_patches == 0 || self.n_patients < 3 {
            return Err("need at least one patch and three patients".into());
        }
        if !(self.distractor_density >= 0.0) || !(0.0..=1.0).contains(&self.hard_negative_rate) {
            return Err("distractor_density must be ≥ 0 and hard_negative_rate in [0, 1]".into());
        }
        if !(self.match_radius > 0.0) {
            return Err("match_radius must be positive".into());
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        (self.n_patches as f64 * self.positive_fraction).round() as usize
    }

    /// Patient-level split: the first 70% of patients train, the next 15%
    /// validate, the rest test.
    pub fn patient_split(&self, patient: usize) -> Split {
        let p = self.n_patients as f64;
        let n_train = (0.7 * p).round() as usize;
        let n_val = ((0.15 * p).round() as usize).max(1);
        if patient < n_train.min(self.n_patients - 2) {
            Split::Train
        } else if patient < (n_train + n_val).min(self.n_patients - 1) {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Stain appearance of one patient.
#[derive(Debug, Clone, Copy)]
struct Stains {
    h: [f64; 3],
    e: [f64; 3],
    intensity: f64,
}

impl Stains {
    fn canonical() -> Self {
        Self { h: unit(HEMATOXYLIN), e: unit(EOSIN), intensity: 1.0 }
    }

    fn perturbed(rng: &mut impl Rng) -> Self {
        let jitter = Normal::new(0.0, 0.04).expect("valid");
        let mut perturb = |v: [f64; 3]| unit(v.map(|x| (x + jitter.sample(rng)).max(0.01)));
        let h = perturb(HEMATOXYLIN);
        let e = perturb(EOSIN);
        Self { h, e, intensity: rng.random_range(0.85..1.15) }
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

/// Per-pixel stain concentrations.
struct Canvas {
    h: usize,
    w: usize,
    hema: Vec<f64>,
    eosin: Vec<f64>,
}

impl Canvas {
    fn background(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let noise = Normal::new(0.0, 0.02).expect("valid");
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let freq = rng.random_range(0.05..0.2);
                (theta.cos() * freq, theta.sin() * freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.02..0.06))
            })
            .collect();
        let base = rng.random_range(0.28..0.4);
        let mut eosin = vec![0.0; h * w];
        let mut hema = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let wave: f64 = waves.iter().map(|&(fy, fx, ph, a)| a * (fy * r as f64 + fx * c as f64 + ph).sin()).sum();
                eosin[r * w + c] = (base + wave + noise.sample(rng)).max(0.02);
                hema[r * w + c] = (0.04 + 0.5 * noise.sample(rng)).max(0.0);
            }
        }
        Self { h, w, hema, eosin }
    }

    /// Raises hematoxylin to `level·profile` inside a soft-edged region;
    /// returns the pixels whose profile exceeds ½.
    fn stamp(&mut self, level: f64, texture: f64, rng: &mut impl Rng, inside: impl Fn(f64, f64) -> f64) -> Vec<usize> {
        let mut core = Vec::new();
        for r in 0..self.h {
            for c in 0..self.w {
                let a = inside(r as f64, c as f64);
                if a <= 0.0 {
                    continue;
                }
                let i = r * self.w + c;
                let v = level * a * (1.0 + texture * rng.random_range(-1.0..1.0));
                self.hema[i] = self.hema[i].max(v);
                self.eosin[i] *= 1.0 - 0.6 * a;
                if a > 0.5 {
                    core.push(i);
                }
            }
        }
        core
    }

    fn render(&self, stains: &Stains, rng: &mut impl Rng) -> RgbImage {
        let noise = Normal::new(0.0, 0.01).expect("valid");
        let mut img = RgbImage::new(self.w as u32, self.h as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            let (ch, ce) = (self.hema[i] * stains.intensity, self.eosin[i] * stains.intensity);
            for k in 0..3 {
                px[k] = od_to_rgb((stains.h[k] * ch + stains.e[k] * ce + noise.sample(rng)).max(0.0));
            }
        }
        img
    }
}

/// Soft membership of an ellipse with a one-pixel ramp.
fn ellipse(cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> impl Fn(f64, f64) -> f64 {
    let (s, c) = theta.sin_cos();
    move |r, col| {
        let (dy, dx) = (r - cy, col - cx);
        let u = (c * dx + s * dy) / a;
        let v = (-s * dx + c * dy) / b;
        let d = (u * u + v * v).sqrt();
        // Signed distance approximated in units of the smaller semi-axis.
        ((1.0 - d) * a.min(b) + 0.5).clamp(0.0, 1.0)
    }
}

/// Irregular clump: a union of small lobes around a center.
fn clump(cy: f64, cx: f64, radius: f64, rng: &mut impl Rng) -> impl Fn(f64, f64) -> f64 {
    let n = rng.random_range(4..=7);
    let lobes: Vec<(f64, f64, f64)> = (0..n)
        .map(|k| {
            let ang = 2.0 * PI * k as f64 / n as f64 + rng.random_range(-0.5..0.5);
            let off = if k == 0 { 0.0 } else { rng.random_range(0.3..0.75) * radius };
            (cy + off * ang.sin(), cx + off * ang.cos(), rng.random_range(0.35..0.55) * radius)
        })
        .collect();
    move |r, c| {
        lobes
            .iter()
            .map(|&(ly, lx, lr)| (lr - (r - ly).hypot(c - lx) + 0.5).clamp(0.0, 1.0))
            .fold(0.0, f64::max)
    }
}

fn far_from(p: (f64, f64), others: &[(f64, f64)], min_dist: f64) -> bool {
    others.iter().all(|o| (p.0 - o.0).hypot(p.1 - o.1) >= min_dist)
}

/// Renders one patch; returns the image and the recorded centroids.
fn render_patch(
    cfg: &SynthConfig,
    positive: bool,
    stains: &Stains,
    size: usize,
    rng: &mut impl Rng,
) -> (RgbImage, Vec<(f64, f64)>) {
    let mut canvas = Canvas::background(size, size, rng);
    let area = (size * size) as f64;
    let (rlo, rhi) = cfg.mitosis_radius_px;
    let margin = rhi + 2.0;
    let span = margin..(size as f64 - 1.0 - margin);

    let mut centers = Vec::new();
    if positive {
        let want = rng.random_range(1..=3);
        let min_sep = 2.0 * cfg.match_radius;
        for _ in 0..200 {
            if centers.len() == want {
                break;
            }
            let p = (rng.random_range(span.clone()), rng.random_range(span.clone()));
            if far_from(p, &centers, min_sep) {
                centers.push(p);
            }
        }
    }

    let mut hard = Vec::new();
    if rng.random_bool(cfg.hard_negative_rate) {
        for _ in 0..50 {
            let p = (rng.random_range(span.clone()), rng.random_range(span.clone()));
            if far_from(p, &centers, rhi * 2.0 + 8.0) {
                hard.push(p);
                break;
            }
        }
    }

    let n_nuclei = Poisson::new((cfg.distractor_density * area / 1000.0).max(1e-9))
        .expect("positive rate")
        .sample(rng) as usize;
    for _ in 0..n_nuclei {
        let p = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        if !far_from(p, &centers, rhi + 6.0) || !far_from(p, &hard, 10.0) {
            continue;
        }
        let a = rng.random_range(3.0..6.0);
        let b = rng.random_range(2.5..4.5);
        let level = rng.random_range(0.3..0.45);
        let theta = rng.random_range(0.0..PI);
        canvas.stamp(level, 0.1, rng, ellipse(p.0, p.1, a, b, theta));
    }
    for &p in &hard {
        let r = rng.random_range(4.0..5.5);
        let level = rng.random_range(0.6..0.8);
        canvas.stamp(level, 0.03, rng, ellipse(p.0, p.1, r, r, 0.0));
    }

    let mut centroids = Vec::new();
    for &(cy, cx) in &centers {
        let radius = rng.random_range(rlo..=rhi);
        let level = rng.random_range(1.4..1.7);
        let shape = clump(cy, cx, radius, rng);
        let core = canvas.stamp(level, 0.15, rng, shape);
        let n = core.len().max(1) as f64;
        let r = core.iter().map(|&i| (i / size) as f64).sum::<f64>() / n;
        let c = core.iter().map(|&i| (i % size) as f64).sum::<f64>() / n;
        centroids.push((r, c));
    }
    (canvas.render(stains, rng), centroids)
}

pub fn patient_id(p: usize) -> String {
    format!("p{p:02}")
}

/// Renders the dataset into `out_dir` as `img_XXXXX.png` plus `manifest.csv`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    cfg.validate().map_err(|message| DataError::Validation { path: out_dir.display().to_string(), line: 0, message })?;
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let mut label_rng = rng_stream(cfg.rng_seed, "synth.labels");
    let mut positive = vec![false; cfg.n_patches];
    positive[..cfg.n_positive()].iter_mut().for_each(|p| *p = true);
    positive.shuffle(&mut label_rng);

    let mut stain_rng = rng_stream(cfg.rng_seed, "synth.stains");
    let patients: Vec<Stains> = (0..cfg.n_patients).map(|_| Stains::perturbed(&mut stain_rng)).collect();

    let mut render_rng = rng_stream(cfg.rng_seed, "synth.render");
    let size = cfg.patch_size as usize;
    let mut records = Vec::with_capacity(cfg.n_patches);
    for (i, &pos) in positive.iter().enumerate() {
        let patient = i % cfg.n_patients;
        let (img, centroids) = render_patch(cfg, pos, &patients[patient], size, &mut render_rng);
        let name = format!("img_{i:05}.png");
        let path = out_dir.join(&name);
        img.save(&path).map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })?;
        records.push(PatchRecord {
            id: format!("img_{i:05}"),
            patient_id: patient_id(patient),
            image_path: name.into(),
            label: pos,
            centroids,
            split: cfg.patient_split(patient),
        });
    }
    let manifest = DatasetManifest::new(out_dir, records)?;
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// The fixed 256×256 tile the built-in stain target is measured from.
pub fn reference_tile() -> RgbImage {
    let cfg = SynthConfig { patch_size: 256, distractor_density: 1.5, hard_negative_rate: 1.0, ..Default::default() };
    let mut rng: ChaCha8Rng = rng_stream(0, "synth.reference");
    render_patch(&cfg, true, &Stains::canonical(), 256, &mut rng).0
}
