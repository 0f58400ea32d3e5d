//! Detection overlays: matched detections in green, missed annotations in
//! blue, false positives in yellow, each drawn as a circle of the match
//! radius.

use image::{Rgb, RgbImage};

use crate::evaluation::{match_detections, EvalError, MatchReport};

pub const TP_COLOR: Rgb<u8> = Rgb([0, 200, 0]);
pub const FN_COLOR: Rgb<u8> = Rgb([0, 80, 255]);
pub const FP_COLOR: Rgb<u8> = Rgb([255, 220, 0]);

/// Draws a one-pixel circle outline centred on `(row, col)`, clipped to the
/// image.
pub fn draw_circle(image: &mut RgbImage, center: (f64, f64), radius: f64, color: Rgb<u8>) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut put = |r: i64, c: i64| {
        if r >= 0 && c >= 0 && r < h && c < w {
            image.put_pixel(c as u32, r as u32, color);
        }
    };
    if radius < 0.5 {
        put(center.0.round() as i64, center.1.round() as i64);
        return;
    }
    let steps = ((2.0 * std::f64::consts::PI * radius).ceil() as usize * 2).max(8);
    for k in 0..steps {
        let t = 2.0 * std::f64::consts::PI * k as f64 / steps as f64;
        put((center.0 + radius * t.sin()).round() as i64, (center.1 + radius * t.cos()).round() as i64);
    }
}

/// Matches `detections` to `annotations` and renders the result on a copy
/// of `image`.
pub fn render_overlay(
    image: &RgbImage,
    detections: &[(f64, f64)],
    annotations: &[(f64, f64)],
    radius: f64,
) -> Result<(RgbImage, MatchReport), EvalError> {
    let report = match_detections(detections, annotations, radius)?;
    let mut out = image.clone();
    for (a, hit) in annotations.iter().zip(report.annotation_matched(annotations.len())) {
        if !hit {
            draw_circle(&mut out, *a, radius, FN_COLOR);
        }
    }
    for (d, hit) in detections.iter().zip(report.detection_matched(detections.len())) {
        draw_circle(&mut out, *d, radius, if hit { TP_COLOR } else { FP_COLOR });
    }
    Ok((out, report))
}
