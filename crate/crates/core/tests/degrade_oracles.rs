use proptest::prelude::*;

use vdforge_core::corpus::ViewSpec;
use vdforge_core::degrade::{self, Image};

fn gray_row(values: &[u8]) -> Image {
    Image::from_fn(values.len() as u32, 1, |x, _| [values[x as usize]; 3]).unwrap()
}

fn channel0(img: &Image) -> Vec<u8> {
    img.pixels().chunks(3).map(|p| p[0]).collect()
}

#[test]
fn horizontal_blur_spreads_an_impulse() {
    let out = degrade::degrade_motion_blur(&gray_row(&[0, 0, 255, 0, 0]), 3, 0.0).unwrap();
    assert_eq!(channel0(&out), [0, 85, 85, 85, 0]);
}

#[test]
fn blur_clamps_at_edges() {
    let out = degrade::degrade_motion_blur(&gray_row(&[255, 0, 0, 0, 0]), 3, 0.0).unwrap();
    // Left neighbour of x = 0 clamps to x = 0: (255 + 255 + 0) / 3.
    assert_eq!(channel0(&out), [170, 85, 0, 0, 0]);
}

#[test]
fn vertical_blur_leaves_rows_of_constant_columns_alone() {
    let img = Image::from_fn(4, 9, |x, _| [(x * 60) as u8; 3]).unwrap();
    assert_eq!(degrade::degrade_motion_blur(&img, 5, 90.0).unwrap(), img);
}

#[test]
fn kernel_weights_sum_to_one() {
    for len in 1..20 {
        for angle in [0.0, 17.0, 45.0, 90.0, 133.0, 271.0] {
            let k = degrade::motion_kernel(len, angle);
            let s: f64 = k.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12, "len {len} angle {angle}");
        }
    }
}

#[test]
fn noise_statistics_match_sigma() {
    let img = Image::filled(200, 200, [128, 128, 128]).unwrap();
    let sigma = 0.05;
    let out = degrade::degrade_gaussian_noise(&img, sigma, 7).unwrap();
    let d: Vec<f64> = out
        .pixels()
        .iter()
        .map(|&p| (p as f64 - 128.0) / 255.0)
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    // Quantization adds variance 1/(12·255²); both bounds are > 5 standard errors wide.
    assert!(
        mean.abs() < 5.0 * sigma / n.sqrt() + 1.0 / 510.0,
        "mean {mean}"
    );
    let expected = (sigma * sigma + 1.0 / (12.0 * 255.0 * 255.0)).sqrt();
    assert!(
        (sd - expected).abs() / expected < 0.02,
        "sd {sd} vs {expected}"
    );
}

#[test]
fn heavy_noise_saturates_without_wrapping() {
    let img = Image::from_fn(64, 64, |x, y| [if (x + y) % 2 == 0 { 0 } else { 255 }; 3]).unwrap();
    let out = degrade::degrade_gaussian_noise(&img, 3.0, 1).unwrap();
    let extremes = out.pixels().iter().filter(|&&p| p == 0 || p == 255).count();
    assert!(extremes as f64 > 0.7 * out.pixels().len() as f64);
}

#[test]
fn noise_seed_changes_output() {
    let img = Image::filled(32, 32, [100, 150, 200]).unwrap();
    let a = degrade::degrade_gaussian_noise(&img, 0.1, 1).unwrap();
    let b = degrade::degrade_gaussian_noise(&img, 0.1, 2).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, degrade::degrade_gaussian_noise(&img, 0.1, 1).unwrap());
}

#[test]
fn constant_image_survives_resize() {
    let img = Image::filled(37, 23, [12, 200, 77]).unwrap();
    let out = degrade::degrade_resolution(&img, 0.3).unwrap();
    assert_eq!((out.width(), out.height()), (11, 7));
    assert!(out.pixels().chunks(3).all(|p| p == [12, 200, 77]));
}

#[test]
fn degraded_views_round_trip_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(40, 30, |x, y| {
        [(x * 6) as u8, (y * 8) as u8, ((x ^ y) * 3) as u8]
    })
    .unwrap();
    let src = dir.path().join("table.png");
    img.save_png(&src).unwrap();
    for view in ["res:0.25", "noise:0.2:3", "blur:9:45"] {
        let view: ViewSpec = view.parse().unwrap();
        let out = degrade::apply_view(&Image::load(&src).unwrap(), &view).unwrap();
        let path = degrade::degraded_path(&src, dir.path(), &view);
        out.save_png(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap(), out, "{}", view.label());
    }
    assert_eq!(degrade::degraded_path(&src, dir.path(), &ViewSpec::Hq), src);
}

proptest! {
    #[test]
    fn output_dims_are_monotone_in_alpha(w in 1u32..3000, h in 1u32..3000, a in 0.001f64..1.0, b in 0.001f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(degrade::scaled_dim(w, lo) <= degrade::scaled_dim(w, hi));
        prop_assert!(degrade::scaled_dim(h, lo) <= degrade::scaled_dim(h, hi));
        prop_assert!(degrade::scaled_dim(w, lo) >= 1);
    }

    #[test]
    fn resize_stays_within_input_range(seed in any::<u64>(), alpha in 0.05f64..1.0) {
        let img = Image::from_fn(23, 17, |x, y| {
            let v = (seed ^ (x as u64 * 31 + y as u64 * 131)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            [(v >> 56) as u8, 40 + (v >> 58) as u8, 200]
        }).unwrap();
        let out = degrade::degrade_resolution(&img, alpha).unwrap();
        for c in 0..3 {
            let channel = |im: &Image| im.pixels().iter().skip(c).step_by(3).copied().collect::<Vec<u8>>();
            let (src, dst) = (channel(&img), channel(&out));
            let (min, max) = (*src.iter().min().unwrap(), *src.iter().max().unwrap());
            prop_assert!(dst.iter().all(|&p| p >= min && p <= max));
        }
    }

    #[test]
    fn operators_are_pure(seed in any::<u64>(), sigma in 0.0f64..1.0, len in 1u32..12, angle in 0.0f64..360.0) {
        let img = Image::from_fn(19, 11, |x, y| [(x * 13) as u8, (y * 23) as u8, ((x + y) * 7) as u8]).unwrap();
        let copy = img.clone();
        prop_assert_eq!(
            degrade::degrade_gaussian_noise(&img, sigma, seed).unwrap(),
            degrade::degrade_gaussian_noise(&img, sigma, seed).unwrap()
        );
        prop_assert_eq!(
            degrade::degrade_motion_blur(&img, len, angle).unwrap(),
            degrade::degrade_motion_blur(&img, len, angle).unwrap()
        );
        prop_assert_eq!(img, copy);
    }
}
