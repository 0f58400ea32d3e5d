use image::{Rgb, RgbImage};
use mitoloc::inference::label_components;
use mitoloc::overlay::{draw_circle, render_overlay, FN_COLOR, FP_COLOR, TP_COLOR};

fn canvas() -> RgbImage {
    RgbImage::from_pixel(200, 200, Rgb([128, 128, 128]))
}

/// Pixel positions of `color` grouped into 8-connected components.
fn circles(img: &RgbImage, color: Rgb<u8>) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask: Vec<bool> = img.pixels().map(|p| *p == color).collect();
    let (labels, n) = label_components(&mask, h, w);
    (1..=n as u32)
        .map(|l| (0..h * w).filter(|&i| labels[i] == l).map(|i| (i / w, i % w)).collect())
        .collect()
}

fn bbox_center(px: &[(usize, usize)]) -> (f64, f64) {
    let (r0, r1) = (px.iter().map(|p| p.0).min().unwrap(), px.iter().map(|p| p.0).max().unwrap());
    let (c0, c1) = (px.iter().map(|p| p.1).min().unwrap(), px.iter().map(|p| p.1).max().unwrap());
    ((r0 + r1) as f64 / 2.0, (c0 + c1) as f64 / 2.0)
}

#[test]
fn one_circle_per_outcome() {
    let dets = [(40.3, 40.6), (60.0, 150.2)];
    let anns = [(42.0, 40.0), (150.0, 50.0)];
    let (img, report) = render_overlay(&canvas(), &dets, &anns, 10.0).unwrap();
    assert_eq!((report.tp, report.fp, report.fn_), (1, 1, 1));
    let expected = [(TP_COLOR, (40.0, 41.0)), (FP_COLOR, (60.0, 150.0)), (FN_COLOR, (150.0, 50.0))];
    for (color, center) in expected {
        let found = circles(&img, color);
        assert_eq!(found.len(), 1, "{color:?}");
        assert_eq!(bbox_center(&found[0]), center, "{color:?}");
        assert!(found[0].len() > 40);
    }
}

#[test]
fn empty_inputs_leave_the_image_unchanged() {
    let img = canvas();
    let (out, report) = render_overlay(&img, &[], &[], 10.0).unwrap();
    assert_eq!(out, img);
    assert_eq!((report.tp, report.fp, report.fn_), (0, 0, 0));
}

#[test]
fn circle_pixels_sit_on_the_radius_and_clip() {
    let mut img = canvas();
    draw_circle(&mut img, (100.0, 100.0), 25.0, TP_COLOR);
    for (r, c) in circles(&img, TP_COLOR).concat() {
        let d = ((r as f64 - 100.0).powi(2) + (c as f64 - 100.0).powi(2)).sqrt();
        assert!((d - 25.0).abs() <= 0.75, "({r}, {c}) at {d}");
    }
    let mut edge = canvas();
    draw_circle(&mut edge, (0.0, 0.0), 12.0, FP_COLOR);
    assert!(edge.pixels().any(|p| *p == FP_COLOR));
    let mut dot = canvas();
    draw_circle(&mut dot, (5.4, 7.6), 0.0, FN_COLOR);
    assert_eq!(*dot.get_pixel(8, 5), FN_COLOR);
}
