//! Macenko stain estimation and normalization for H&E images.

use std::fmt;

use image::RgbImage;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Optical-density threshold below which a pixel counts as background.
pub const BETA: f64 = 0.15;
/// Percentile (in percent) of the extreme angles taken as stain directions.
pub const ALPHA: f64 = 1.0;
pub const MIN_TISSUE_PIXELS: usize = 100;
/// Second covariance eigenvalue relative to the first below which the OD
/// cloud is treated as rank one.
pub const DEGENERATE_RATIO: f64 = 1e-3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StainError {
    #[error("image is background only: {tissue} pixels exceed the OD threshold, {MIN_TISSUE_PIXELS} needed")]
    BackgroundOnly { tissue: usize },
    #[error("degenerate stain distribution: {0}")]
    DegenerateStain(String),
}

/// `−log10((I+1)/256)`.
pub fn rgb_to_od(v: u8) -> f64 {
    -((v as f64 + 1.0) / 256.0).log10()
}

/// Inverse of [`rgb_to_od`], rounded and clamped to `u8`.
pub fn od_to_rgb(od: f64) -> u8 {
    (256.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

pub fn image_to_od(image: &RgbImage) -> Vec<[f64; 3]> {
    image.pixels().map(|p| [rgb_to_od(p[0]), rgb_to_od(p[1]), rgb_to_od(p[2])]).collect()
}

/// Two unit stain vectors in OD space plus the 99th-percentile
/// concentration of each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    /// Columns of the 3×2 stain matrix: hematoxylin first, then eosin.
    pub stain_matrix: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

impl StainProfile {
    /// The built-in target, measured from [`crate::data::synth::reference_tile`]
    /// (shipped as `assets/reference_tile.png`).
    pub const REFERENCE: StainProfile = StainProfile {
        stain_matrix: [
            [0.5301600813602402, 0.8094488566554888, 0.25243382616286875],
            [0.06780475380120149, 0.9923033351157444, 0.1036175973477925],
        ],
        max_concentrations: [0.541053882226392, 0.4948771232898542],
    };

    /// The eight numbers `h_r h_g h_b e_r e_g e_b c_h c_e`.
    pub fn to_array(&self) -> [f64; 8] {
        let [h, e] = self.stain_matrix;
        let [ch, ce] = self.max_concentrations;
        [h[0], h[1], h[2], e[0], e[1], e[2], ch, ce]
    }

    pub fn from_array(v: [f64; 8]) -> Self {
        Self { stain_matrix: [[v[0], v[1], v[2]], [v[3], v[4], v[5]]], max_concentrations: [v[6], v[7]] }
    }

    fn matrix(&self) -> nalgebra::Matrix3x2<f64> {
        let [h, e] = self.stain_matrix;
        nalgebra::Matrix3x2::new(h[0], e[0], h[1], e[1], h[2], e[2])
    }

    /// Least-squares concentrations `(MᵀM)⁻¹Mᵀ od` for every pixel.
    fn concentrations(&self, od: &[[f64; 3]]) -> Result<Vec<[f64; 2]>, StainError> {
        let m = self.matrix();
        let pinv = (m.transpose() * m)
            .try_inverse()
            .ok_or_else(|| StainError::DegenerateStain("stain vectors are collinear".into()))?
            * m.transpose();
        Ok(od
            .iter()
            .map(|o| {
                let c = pinv * Vector3::new(o[0], o[1], o[2]);
                [c[0], c[1]]
            })
            .collect())
    }
}

impl fmt::Display for StainProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_array();
        let s: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        write!(f, "{}", s.join(" "))
    }
}

/// Linear-interpolated percentile (`q` in percent) of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn unit_nonnegative(v: Vector3<f64>) -> Vector3<f64> {
    let v = if v.sum() < 0.0 { -v } else { v };
    let v = v.map(|x| x.max(0.0));
    v / v.norm()
}

pub fn estimate_stain_profile(image: &RgbImage) -> Result<StainProfile, StainError> {
    estimate_stain_profile_with(image, BETA, ALPHA)
}

/// One profile for several images of the same slide or patient, estimated
/// from their pooled pixels. Small tiles rarely hold enough of both stains
/// for stable concentration percentiles on their own.
pub fn estimate_pooled_profile(images: &[&RgbImage]) -> Result<StainProfile, StainError> {
    let od: Vec<[f64; 3]> = images.iter().flat_map(|im| image_to_od(im)).collect();
    estimate_from_od(&od, BETA, ALPHA)
}

pub fn estimate_stain_profile_with(image: &RgbImage, beta: f64, alpha: f64) -> Result<StainProfile, StainError> {
    estimate_from_od(&image_to_od(image), beta, alpha)
}

/// Macenko estimate from OD pixels.
pub fn estimate_from_od(od: &[[f64; 3]], beta: f64, alpha: f64) -> Result<StainProfile, StainError> {
    let tissue: Vec<[f64; 3]> =
        od.iter().copied().filter(|o| o.iter().copied().fold(f64::MIN, f64::max) > beta).collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(StainError::BackgroundOnly { tissue: tissue.len() });
    }
    let n = tissue.len() as f64;
    let mean = tissue.iter().fold(Vector3::zeros(), |a, o| a + Vector3::new(o[0], o[1], o[2])) / n;
    let mut cov = Matrix3::zeros();
    for o in &tissue {
        let d = Vector3::new(o[0], o[1], o[2]) - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= DEGENERATE_RATIO * l1 {
        return Err(StainError::DegenerateStain(format!(
            "OD covariance is rank one (eigenvalues {l1:.3e}, {l2:.3e})"
        )));
    }
    let fix = |v: Vector3<f64>| if v.sum() < 0.0 { -v } else { v };
    let e1 = fix(eig.eigenvectors.column(order[0]).into_owned());
    let e2 = fix(eig.eigenvectors.column(order[1]).into_owned());
    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|o| {
            let v = Vector3::new(o[0], o[1], o[2]);
            v.dot(&e2).atan2(v.dot(&e1))
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile(&angles, alpha);
    let hi = percentile(&angles, 100.0 - alpha);
    let v1 = unit_nonnegative(e1 * lo.cos() + e2 * lo.sin());
    let v2 = unit_nonnegative(e1 * hi.cos() + e2 * hi.sin());
    if v1.dot(&v2) > 1.0 - 1e-12 {
        return Err(StainError::DegenerateStain("extreme angles coincide".into()));
    }
    let (h, e) = if v1[2] >= v2[2] { (v1, v2) } else { (v2, v1) };
    let mut profile = StainProfile { stain_matrix: [[h[0], h[1], h[2]], [e[0], e[1], e[2]]], max_concentrations: [1.0, 1.0] };
    let conc = profile.concentrations(&tissue)?;
    for k in 0..2 {
        let mut c: Vec<f64> = conc.iter().map(|c| c[k]).collect();
        c.sort_by(f64::total_cmp);
        profile.max_concentrations[k] = percentile(&c, 100.0 - alpha);
    }
    if profile.max_concentrations.iter().any(|&c| !(c > 0.0)) {
        return Err(StainError::DegenerateStain(format!(
            "non-positive stain concentration scale {:?}",
            profile.max_concentrations
        )));
    }
    Ok(profile)
}

/// Re-expresses `image` in the `target` stain basis: clamped least-squares
/// concentrations under `source`, rescaled by the max-concentration ratio.
pub fn normalize(image: &RgbImage, source: &StainProfile, target: &StainProfile) -> Result<RgbImage, StainError> {
    let conc = source.concentrations(&image_to_od(image))?;
    let scale = [
        target.max_concentrations[0] / source.max_concentrations[0],
        target.max_concentrations[1] / source.max_concentrations[1],
    ];
    let [th, te] = target.stain_matrix;
    let mut out = RgbImage::new(image.width(), image.height());
    for (px, c) in out.pixels_mut().zip(conc) {
        let ch = c[0].max(0.0) * scale[0];
        let ce = c[1].max(0.0) * scale[1];
        for k in 0..3 {
            px[k] = od_to_rgb(th[k] * ch + te[k] * ce);
        }
    }
    Ok(out)
}

/// Estimates the source profile from `image` itself, then normalizes.
pub fn normalize_to(image: &RgbImage, target: &StainProfile) -> Result<RgbImage, StainError> {
    normalize(image, &estimate_stain_profile(image)?, target)
}
