//! Deterministic image degradation operators.
//!
//! All operators work on 8-bit sRGB samples without gamma linearization and
//! are pure: identical inputs (seed included) produce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::ViewSpec;

#[derive(Debug, thiserror::Error)]
pub enum DegradeError {
    #[error("alpha {0} outside (0, 1]")]
    Alpha(f64),
    #[error("sigma {0} must be a finite value >= 0")]
    Sigma(f64),
    #[error("blur length must be positive")]
    BlurLength,
    #[error("image is empty")]
    Empty,
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, DegradeError> {
        if width == 0 || height == 0 {
            return Err(DegradeError::Empty);
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(DegradeError::BufferSize {
                got: pixels.len(),
                expected,
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, DegradeError> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.repeat(n))
    }

    /// Builds an image from a per-pixel function.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self, DegradeError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn load(path: &Path) -> Result<Self, DegradeError> {
        let codec = |source| DegradeError::Codec {
            path: path.display().to_string(),
            source,
        };
        let rgb = image::open(path).map_err(codec)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DegradeError> {
        let codec = |source| DegradeError::Codec {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(|e| codec(image::ImageError::IoError(e)))?;
        let encoder = image::codecs::png::PngEncoder::new_with_quality(
            std::io::BufWriter::new(file),
            image::codecs::png::CompressionType::Fast,
            image::codecs::png::FilterType::Adaptive,
        );
        image::ImageEncoder::write_image(
            encoder,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(codec)
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

fn quantize(x: f64) -> u8 {
    round_half_up(x).clamp(0.0, 255.0) as u8
}

/// Target size for one axis: `max(1, round_half_up(dim * alpha))`.
pub fn scaled_dim(dim: u32, alpha: f64) -> u32 {
    (round_half_up(dim as f64 * alpha) as u32).max(1)
}

/// Normalized 1-D triangle-filter taps for one output coordinate.
///
/// Filter support widens with the downscale factor so every input pixel
/// contributes (the antialiased "bilinear" used by common resize tools).
fn triangle_taps(in_size: u32, out_size: u32) -> Vec<(usize, Vec<f64>)> {
    let scale = in_size as f64 / out_size as f64;
    let filter_scale = scale.max(1.0);
    let support = filter_scale;
    (0..out_size)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(in_size as usize);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|i| {
                    let t = ((i as f64 - center + 0.5) / filter_scale).abs();
                    if t < 1.0 {
                        1.0 - t
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            }
            (lo, weights)
        })
        .collect()
}

/// Downscales both axes by `alpha` with bilinear (triangle-filter) resampling.
pub fn degrade_resolution(img: &Image, alpha: f64) -> Result<Image, DegradeError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DegradeError::Alpha(alpha));
    }
    if img.pixels.is_empty() {
        return Err(DegradeError::Empty);
    }
    if alpha == 1.0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width, img.height);
    let (ow, oh) = (scaled_dim(w, alpha), scaled_dim(h, alpha));
    let xtaps = triangle_taps(w, ow);
    let ytaps = triangle_taps(h, oh);

    // Horizontal pass kept in f64; only the final result is quantized.
    let mut mid = vec![0.0f64; ow as usize * h as usize * 3];
    for y in 0..h as usize {
        let row = &img.pixels[y * w as usize * 3..(y + 1) * w as usize * 3];
        for (ox, (lo, weights)) in xtaps.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for (k, wgt) in weights.iter().enumerate() {
                let px = &row[(lo + k) * 3..(lo + k) * 3 + 3];
                for c in 0..3 {
                    acc[c] += wgt * px[c] as f64;
                }
            }
            mid[(y * ow as usize + ox) * 3..(y * ow as usize + ox) * 3 + 3].copy_from_slice(&acc);
        }
    }

    let mut out = vec![0u8; ow as usize * oh as usize * 3];
    for (oy, (lo, weights)) in ytaps.iter().enumerate() {
        for ox in 0..ow as usize {
            let mut acc = [0.0f64; 3];
            for (k, wgt) in weights.iter().enumerate() {
                let i = ((lo + k) * ow as usize + ox) * 3;
                for c in 0..3 {
                    acc[c] += wgt * mid[i + c];
                }
            }
            let o = (oy * ow as usize + ox) * 3;
            for (dst, v) in out[o..o + 3].iter_mut().zip(acc) {
                *dst = quantize(v);
            }
        }
    }
    Image::new(ow, oh, out)
}

/// Standard normal sampler: Box–Muller over a ChaCha8 stream.
struct BoxMuller {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl BoxMuller {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in (0, 1] from the top 53 bits.
    fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Adds i.i.d. Gaussian(0, sigma) noise per channel on the [0, 1] scale.
pub fn degrade_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image, DegradeError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DegradeError::Sigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut normal = BoxMuller::new(seed);
    let pixels = img
        .pixels
        .iter()
        .map(|&p| {
            let v = (p as f64 / 255.0 + sigma * normal.next()).clamp(0.0, 1.0);
            quantize(v * 255.0)
        })
        .collect();
    Image::new(img.width, img.height, pixels)
}

/// Offsets and weights of a normalized 1-px line kernel.
pub fn motion_kernel(length_px: u32, angle_deg: f64) -> Vec<((i64, i64), f64)> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let half = (length_px as f64 - 1.0) / 2.0;
    let mut taps: BTreeMap<(i64, i64), u32> = BTreeMap::new();
    for i in 0..length_px {
        let t = i as f64 - half;
        // Image rows grow downwards, so a positive angle points up.
        let dx = round_half_up(t * cos) as i64;
        let dy = round_half_up(-t * sin) as i64;
        *taps.entry((dx, dy)).or_default() += 1;
    }
    taps.into_iter()
        .map(|(off, n)| (off, n as f64 / length_px as f64))
        .collect()
}

/// Convolves with a normalized line kernel; edges clamp.
pub fn degrade_motion_blur(
    img: &Image,
    length_px: u32,
    angle_deg: f64,
) -> Result<Image, DegradeError> {
    if length_px == 0 {
        return Err(DegradeError::BlurLength);
    }
    if length_px == 1 {
        return Ok(img.clone());
    }
    let kernel = motion_kernel(length_px, angle_deg);
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for &((dx, dy), wgt) in &kernel {
                let sx = (x + dx).clamp(0, w - 1);
                let sy = (y + dy).clamp(0, h - 1);
                let i = ((sy * w + sx) * 3) as usize;
                for (a, &p) in acc.iter_mut().zip(&img.pixels[i..i + 3]) {
                    *a += wgt * p as f64;
                }
            }
            let o = ((y * w + x) * 3) as usize;
            for (dst, v) in out[o..o + 3].iter_mut().zip(acc) {
                *dst = quantize(v);
            }
        }
    }
    Image::new(img.width, img.height, out)
}

/// Applies the operator named by `view`.
pub fn apply_view(img: &Image, view: &ViewSpec) -> Result<Image, DegradeError> {
    match *view {
        ViewSpec::Hq => Ok(img.clone()),
        ViewSpec::Resolution { alpha } => degrade_resolution(img, alpha),
        ViewSpec::GaussianNoise { sigma, seed } => degrade_gaussian_noise(img, sigma, seed),
        ViewSpec::MotionBlur {
            length_px,
            angle_deg,
        } => degrade_motion_blur(img, length_px, angle_deg),
    }
}

/// `<stem>__<view_label>.png` next to `out_dir`; HQ maps to the source path.
pub fn degraded_path(source: &Path, out_dir: &Path, view: &ViewSpec) -> PathBuf {
    if view.is_hq() {
        return source.to_path_buf();
    }
    let stem = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out_dir.join(format!("{stem}__{}.png", view.label()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> Image {
        Image::from_fn(w, h, |x, y| {
            [(x * 40 + y * 7) as u8, (y * 50) as u8, ((x + y) * 13) as u8]
        })
        .unwrap()
    }

    #[test]
    fn target_dims() {
        assert_eq!((scaled_dim(1000, 0.1), scaled_dim(800, 0.1)), (100, 80));
        assert_eq!(scaled_dim(3, 0.1), 1);
        assert_eq!(scaled_dim(5, 0.1), 1);
        assert_eq!(scaled_dim(15, 0.1), 2);
        assert_eq!(scaled_dim(25, 0.1), 3);
        let img = Image::filled(1000, 800, [9, 9, 9]).unwrap();
        let out = degrade_resolution(&img, 0.1).unwrap();
        assert_eq!((out.width(), out.height()), (100, 80));
        assert!(out.pixels().iter().all(|&p| p == 9));
    }

    #[test]
    fn resolution_rejects_bad_alpha() {
        let img = gradient(4, 4);
        for a in [0.0, -0.5, 1.01, f64::NAN] {
            assert!(matches!(
                degrade_resolution(&img, a),
                Err(DegradeError::Alpha(_))
            ));
        }
    }

    #[test]
    fn identity_cases() {
        let img = gradient(7, 5);
        assert_eq!(degrade_resolution(&img, 1.0).unwrap(), img);
        assert_eq!(degrade_gaussian_noise(&img, 0.0, 3).unwrap(), img);
        assert_eq!(degrade_motion_blur(&img, 1, 33.0).unwrap(), img);
    }

    #[test]
    fn image_invariants() {
        assert!(matches!(Image::new(0, 3, vec![]), Err(DegradeError::Empty)));
        assert!(matches!(
            Image::new(2, 2, vec![0; 11]),
            Err(DegradeError::BufferSize { .. })
        ));
    }

    #[test]
    fn noise_is_seeded_and_in_range() {
        let img = gradient(16, 16);
        let a = degrade_gaussian_noise(&img, 0.3, 11).unwrap();
        let b = degrade_gaussian_noise(&img, 0.3, 11).unwrap();
        let c = degrade_gaussian_noise(&img, 0.3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(
            degrade_gaussian_noise(&img, -0.1, 0),
            Err(DegradeError::Sigma(_))
        ));
    }

    #[test]
    fn blur_kernel_is_normalized() {
        for (len, angle) in [
            (2, 0.0),
            (3, 0.0),
            (15, 0.0),
            (15, 45.0),
            (9, 90.0),
            (6, 130.0),
        ] {
            let k = motion_kernel(len, angle);
            let total: f64 = k.iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let vertical = motion_kernel(3, 90.0);
        assert!(vertical.iter().all(|((dx, _), _)| *dx == 0));
        assert!(matches!(
            degrade_motion_blur(&gradient(3, 3), 0, 0.0),
            Err(DegradeError::BlurLength)
        ));
    }

    #[test]
    fn constant_image_survives_blur() {
        let img = Image::filled(9, 6, [255, 17, 128]).unwrap();
        for (len, angle) in [(3, 0.0), (15, 0.0), (7, 30.0), (4, 270.0)] {
            assert_eq!(degrade_motion_blur(&img, len, angle).unwrap(), img);
        }
    }

    #[test]
    fn degraded_file_names() {
        let p = degraded_path(
            Path::new("imgs/q1.png"),
            Path::new("out"),
            &ViewSpec::Resolution { alpha: 0.1 },
        );
        assert_eq!(p, PathBuf::from("out/q1__res:0.1.png"));
        assert_eq!(
            degraded_path(Path::new("imgs/q1.png"), Path::new("out"), &ViewSpec::Hq),
            PathBuf::from("imgs/q1.png")
        );
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = gradient(5, 3);
        img.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
    }
}
