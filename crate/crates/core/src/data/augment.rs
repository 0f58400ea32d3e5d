//! Random translation, rotation and Gaussian blur, each applied with
//! probability ½. Centroids follow the geometric steps; those pushed out of
//! the frame are dropped while the label is kept.

use image::imageops;
use image::RgbImage;
use rand::Rng;

pub const STEP_PROBABILITY: f64 = 0.5;
pub const MAX_SHIFT_FRACTION: f64 = 0.1;
pub const MAX_ANGLE_DEG: f64 = 15.0;
pub const MAX_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentPlan {
    /// Integer `(rows, cols)` shift.
    pub translate: Option<(i64, i64)>,
    /// Clockwise quarter turns, then a small extra angle in degrees.
    pub rotate: Option<(u8, f64)>,
    pub blur_sigma: Option<f64>,
}

/// Mirror index into `[0, n)` without repeating the edge pixel.
fn reflect(i: i64, n: i64) -> i64 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - m
    }
}

fn sample_reflect(img: &RgbImage, r: f64, c: f64) -> [u8; 3] {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let mut out = [0.0f64; 3];
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let wgt = wr * wc;
            if wgt == 0.0 {
                continue;
            }
            let y = reflect(r0 as i64 + dr, h) as u32;
            let x = reflect(c0 as i64 + dc, w) as u32;
            let p = img.get_pixel(x, y);
            for k in 0..3 {
                out[k] += wgt * p[k] as f64;
            }
        }
    }
    out.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn sample(rng: &mut impl Rng, height: u32, width: u32) -> Self {
        let mut plan = Self::identity();
        if rng.random_bool(STEP_PROBABILITY) {
            let my = (MAX_SHIFT_FRACTION * height as f64).floor() as i64;
            let mx = (MAX_SHIFT_FRACTION * width as f64).floor() as i64;
            plan.translate = Some((rng.random_range(-my..=my), rng.random_range(-mx..=mx)));
        }
        if rng.random_bool(STEP_PROBABILITY) {
            plan.rotate = Some((rng.random_range(0..4), rng.random_range(-MAX_ANGLE_DEG..=MAX_ANGLE_DEG)));
        }
        if rng.random_bool(STEP_PROBABILITY) {
            plan.blur_sigma = Some(rng.random_range(0.0..=MAX_SIGMA));
        }
        plan
    }

    pub fn apply(&self, image: &RgbImage, centroids: &[(f64, f64)]) -> (RgbImage, Vec<(f64, f64)>) {
        let mut img = image.clone();
        let mut pts = centroids.to_vec();
        if let Some((dy, dx)) = self.translate {
            let (h, w) = (img.height() as i64, img.width() as i64);
            let src = img.clone();
            for (x, y, p) in img.enumerate_pixels_mut() {
                *p = *src.get_pixel(reflect(x as i64 - dx, w) as u32, reflect(y as i64 - dy, h) as u32);
            }
            for pt in &mut pts {
                *pt = (pt.0 + dy as f64, pt.1 + dx as f64);
            }
        }
        if let Some((quarters, angle)) = self.rotate {
            for _ in 0..quarters % 4 {
                let h = img.height() as f64;
                img = imageops::rotate90(&img);
                for pt in &mut pts {
                    *pt = (pt.1, h - 1.0 - pt.0);
                }
            }
            if angle != 0.0 {
                let (sin, cos) = angle.to_radians().sin_cos();
                let cy = (img.height() as f64 - 1.0) / 2.0;
                let cx = (img.width() as f64 - 1.0) / 2.0;
                let src = img.clone();
                // Output pixel (r, c) reads the source at the inverse rotation.
                for (x, y, p) in img.enumerate_pixels_mut() {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let sr = cy + cos * dy - sin * dx;
                    let sc = cx + sin * dy + cos * dx;
                    *p = image::Rgb(sample_reflect(&src, sr, sc));
                }
                for pt in &mut pts {
                    let (dy, dx) = (pt.0 - cy, pt.1 - cx);
                    *pt = (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx);
                }
            }
        }
        if let Some(sigma) = self.blur_sigma {
            if sigma > 0.0 {
                img = imageops::blur(&img, sigma as f32);
            }
        }
        let (h, w) = (img.height() as f64, img.width() as f64);
        pts.retain(|&(r, c)| r >= 0.0 && c >= 0.0 && r <= h - 1.0 && c <= w - 1.0);
        (img, pts)
    }
}

/// Samples a plan from `rng` and applies it.
pub fn augment(image: &RgbImage, centroids: &[(f64, f64)], rng: &mut impl Rng) -> (RgbImage, Vec<(f64, f64)>) {
    AugmentPlan::sample(rng, image.height(), image.width()).apply(image, centroids)
}
