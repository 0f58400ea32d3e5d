mod common;

use common::{angle_deg, jitter_direction, rng, two_stain_image};
use image::RgbImage;
use mitoloc::data::synth::{reference_tile, EOSIN, HEMATOXYLIN};
use mitoloc::stain::{
    estimate_pooled_profile, estimate_stain_profile, image_to_od, normalize, normalize_to, od_to_rgb, rgb_to_od,
    StainError, StainProfile,
};
use proptest::prelude::*;

fn max_pixel_diff(a: &RgbImage, b: &RgbImage) -> u8 {
    a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y)).max().unwrap()
}

fn mean_od(img: &RgbImage) -> [f64; 3] {
    let od = image_to_od(img);
    let n = od.len() as f64;
    let mut m = [0.0; 3];
    for o in &od {
        for k in 0..3 {
            m[k] += o[k] / n;
        }
    }
    m
}

#[test]
fn od_round_trip_over_all_intensities() {
    for v in 0..=255u8 {
        let back = od_to_rgb(rgb_to_od(v));
        assert!(back.abs_diff(v) <= 1, "{v} -> {back}");
        assert!(rgb_to_od(v) >= 0.0);
    }
    assert_eq!(rgb_to_od(255), 0.0);
    assert!((rgb_to_od(0) - 256f64.log10()).abs() < 1e-12);
}

#[test]
fn recovers_known_stain_vectors() {
    let mut r = rng(21);
    let mut ok = 0;
    for _ in 0..100 {
        let h = jitter_direction(&mut r, HEMATOXYLIN, 8.0);
        let e = jitter_direction(&mut r, EOSIN, 8.0);
        let img = two_stain_image(&mut r, h, e, [1.0, 0.8], 64);
        let p = estimate_stain_profile(&img).unwrap();
        if angle_deg(p.stain_matrix[0], h) <= 2.0 && angle_deg(p.stain_matrix[1], e) <= 2.0 {
            ok += 1;
        }
    }
    assert!(ok >= 95, "{ok}/100 within 2 degrees");
}

#[test]
fn profile_columns_are_unit_and_non_negative() {
    for img in [reference_tile(), two_stain_image(&mut rng(3), HEMATOXYLIN, EOSIN, [1.2, 0.6], 48)] {
        let p = estimate_stain_profile(&img).unwrap();
        for col in p.stain_matrix {
            let n: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12 && col.iter().all(|&x| x >= 0.0), "{col:?}");
        }
        assert!(p.max_concentrations.iter().all(|&c| c > 0.0));
        assert_eq!(estimate_stain_profile(&img).unwrap(), p);
    }
}

#[test]
fn same_profile_normalization_is_near_identity() {
    let mut r = rng(5);
    for _ in 0..10 {
        let img = two_stain_image(&mut r, HEMATOXYLIN, EOSIN, [0.9, 0.7], 48);
        let p = estimate_stain_profile(&img).unwrap();
        assert!(max_pixel_diff(&normalize(&img, &p, &p).unwrap(), &img) <= 2);
    }
}

#[test]
fn differently_stained_pair_converges_to_target() {
    let mut r = rng(6);
    let a = two_stain_image(&mut r, HEMATOXYLIN, EOSIN, [0.6, 0.5], 64);
    let b = two_stain_image(&mut r, HEMATOXYLIN, EOSIN, [1.5, 1.2], 64);
    let (ma, mb) = (mean_od(&a), mean_od(&b));
    assert!((0..3).any(|k| (ma[k] - mb[k]).abs() / mb[k] > 0.5));
    let na = normalize_to(&a, &StainProfile::REFERENCE).unwrap();
    let nb = normalize_to(&b, &StainProfile::REFERENCE).unwrap();
    let (ma, mb) = (mean_od(&na), mean_od(&nb));
    for k in 0..3 {
        assert!((ma[k] - mb[k]).abs() / ma[k].max(mb[k]) < 0.05, "channel {k}: {} vs {}", ma[k], mb[k]);
    }
}

#[test]
fn normalization_is_idempotent() {
    let mut r = rng(7);
    let t = StainProfile::REFERENCE;
    for img in [two_stain_image(&mut r, HEMATOXYLIN, EOSIN, [1.3, 0.9], 64), reference_tile()] {
        let once = normalize_to(&img, &t).unwrap();
        let twice = normalize_to(&once, &t).unwrap();
        assert!(max_pixel_diff(&once, &twice) <= 2);
    }
}

#[test]
fn error_cases() {
    let white = RgbImage::from_pixel(32, 32, image::Rgb([255, 255, 255]));
    assert!(matches!(estimate_stain_profile(&white), Err(StainError::BackgroundOnly { tissue: 0 })));
    let mut r = rng(8);
    let single = two_stain_image(&mut r, HEMATOXYLIN, HEMATOXYLIN, [1.0, 1.0], 32);
    assert!(matches!(estimate_stain_profile(&single), Err(StainError::DegenerateStain(_))));
    let flat = RgbImage::from_pixel(32, 32, image::Rgb([120, 60, 140]));
    assert!(matches!(estimate_stain_profile(&flat), Err(StainError::DegenerateStain(_))));
    let sparse = RgbImage::from_fn(32, 32, |x, y| if x + 32 * y < 50 { image::Rgb([90, 40, 120]) } else { image::Rgb([255; 3]) });
    assert!(matches!(estimate_stain_profile(&sparse), Err(StainError::BackgroundOnly { tissue: 50 })));
}

#[test]
fn pooled_profile_equals_profile_of_concatenation() {
    let mut r = rng(9);
    let a = two_stain_image(&mut r, HEMATOXYLIN, EOSIN, [1.0, 1.0], 32);
    let b = two_stain_image(&mut r, HEMATOXYLIN, EOSIN, [1.0, 1.0], 32);
    let mut both = RgbImage::new(32, 64);
    image::imageops::replace(&mut both, &a, 0, 0);
    image::imageops::replace(&mut both, &b, 0, 32);
    assert_eq!(estimate_pooled_profile(&[&a, &b]).unwrap(), estimate_stain_profile(&both).unwrap());
}

#[test]
fn reference_profile_is_measured_from_shipped_tile() {
    let tile = reference_tile();
    let asset = image::open(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/reference_tile.png")).unwrap().to_rgb8();
    assert_eq!(asset, tile);
    let p = estimate_stain_profile(&tile).unwrap();
    for (a, b) in p.to_array().iter().zip(StainProfile::REFERENCE.to_array()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn profile_array_and_text_round_trip() {
    let p = StainProfile::REFERENCE;
    assert_eq!(StainProfile::from_array(p.to_array()), p);
    assert_eq!(p.to_string().split_whitespace().count(), 8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]
    #[test]
    fn normalized_images_keep_shape(seed in 0u64..1000, s1 in 0.3f64..1.6, s2 in 0.3f64..1.6, size in 16u32..40) {
        let img = two_stain_image(&mut rng(seed), HEMATOXYLIN, EOSIN, [s1, s2], size);
        let out = normalize_to(&img, &StainProfile::REFERENCE).unwrap();
        prop_assert_eq!(out.dimensions(), img.dimensions());
    }
}
