//! Synthetic rendered-table corpus with analytically known answerability.
//!
//! Every instance is a grid of integers drawn with a 5×7 bitmap font at a
//! per-instance glyph height. The synthetic policy reads a cell correctly iff
//! the glyph height surviving a view ([`legibility_score`]) reaches the
//! threshold τ, so the effect of any degradation on accuracy is known in
//! closed form.
//!
//! τ and the attenuation constants are invented calibration values.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ConfigError, KeyValues};
use crate::corpus::{self, CorpusError, QaInstance, ViewSpec};
use crate::degrade::{DegradeError, Image};

pub const DEFAULT_TAU: f64 = 6.0;
/// Noise sigma (on the [0, 1] scale) at which glyphs become fully illegible.
pub const NOISE_ATTENUATION_SIGMA: f64 = 0.3;
const SOURCE_PREFIX: &str = "synthbench:glyph_px=";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Image(#[from] DegradeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    /// Inclusive glyph height range in pixels.
    pub glyph_px: (u32, u32),
    pub rows: u32,
    pub cols: u32,
    /// Inclusive range of rendered integers.
    pub values: (i64, i64),
    pub tau: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 0,
            glyph_px: (20, 100),
            rows: 3,
            cols: 3,
            values: (0, 99),
            tau: DEFAULT_TAU,
        }
    }
}

fn parse_range<T: std::str::FromStr>(key: &str, s: &str) -> Result<(T, T), SynthError> {
    let bad = || SynthError::Spec(format!("{key}: expected `min..max`, got `{s}`"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim()
            .trim_start_matches('=')
            .parse()
            .map_err(|_| bad())?,
    ))
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.glyph_px.0 < 1 || self.glyph_px.0 > self.glyph_px.1 {
            return fail("glyph_px range must satisfy 1 <= min <= max");
        }
        if self.rows == 0 || self.cols == 0 {
            return fail("grid must have at least one row and column");
        }
        if self.values.0 > self.values.1 {
            return fail("value range is empty");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        Ok(())
    }

    /// Reads `n`, `seed`, `glyph-px = a..b`, `grid = RxC`, `values = a..b`, `tau`.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, SynthError> {
        let mut spec = SynthSpec::default();
        if let Some(n) = kv.parse_value("n")? {
            spec.n = n;
        }
        if let Some(seed) = kv.parse_value("seed")? {
            spec.seed = seed;
        }
        if let Some(r) = kv.get("glyph-px") {
            spec.glyph_px = parse_range("glyph-px", r)?;
        }
        if let Some(g) = kv.get("grid") {
            let (r, c) = g
                .split_once(['x', 'X'])
                .ok_or_else(|| SynthError::Spec(format!("grid: expected `RxC`, got `{g}`")))?;
            spec.rows = r
                .trim()
                .parse()
                .map_err(|_| SynthError::Spec(format!("grid `{g}`")))?;
            spec.cols = c
                .trim()
                .parse()
                .map_err(|_| SynthError::Spec(format!("grid `{g}`")))?;
        }
        if let Some(v) = kv.get("values") {
            spec.values = parse_range("values", v)?;
        }
        if let Some(tau) = kv.parse_value("tau")? {
            spec.tau = tau;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("n", self.n.to_string());
        kv.set("seed", self.seed.to_string());
        kv.set(
            "glyph-px",
            format!("{}..{}", self.glyph_px.0, self.glyph_px.1),
        );
        kv.set("grid", format!("{}x{}", self.rows, self.cols));
        kv.set("values", format!("{}..{}", self.values.0, self.values.1));
        kv.set("tau", crate::jsonl::format_float(self.tau));
        kv
    }

    fn max_chars(&self) -> usize {
        self.values
            .0
            .to_string()
            .len()
            .max(self.values.1.to_string().len())
    }
}

/// Effective glyph height (px) once `view` is applied.
pub fn legibility_score(glyph_px: u32, view: &ViewSpec) -> f64 {
    let h = glyph_px as f64;
    match *view {
        ViewSpec::Hq => h,
        ViewSpec::Resolution { alpha } => h * alpha,
        ViewSpec::GaussianNoise { sigma, .. } => {
            h * (1.0 - sigma / NOISE_ATTENUATION_SIGMA).max(0.0)
        }
        ViewSpec::MotionBlur { length_px, .. } => h / length_px.max(1) as f64,
    }
}

/// Glyph height tag stored in an instance's `source` field.
pub fn source_tag(glyph_px: u32) -> String {
    format!("{SOURCE_PREFIX}{glyph_px}")
}

pub fn glyph_px_from_source(source: Option<&str>) -> Option<u32> {
    source?.strip_prefix(SOURCE_PREFIX)?.parse().ok()
}

/// Everything needed to render and answer one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceModel {
    pub index: usize,
    pub glyph_px: u32,
    pub grid: Vec<Vec<i64>>,
    /// Zero-based queried cell.
    pub row: usize,
    pub col: usize,
}

impl InstanceModel {
    pub fn id(&self) -> String {
        format!("syn-{:05}", self.index)
    }

    pub fn answer(&self) -> i64 {
        self.grid[self.row][self.col]
    }

    pub fn question(&self) -> String {
        format!(
            "What is the value in row {}, column {}?",
            self.row + 1,
            self.col + 1
        )
    }
}

fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // splitmix64 finalizer to decorrelate neighbouring indices.
    let mut z = seed
        ^ (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// The deterministic render model of instance `index`.
pub fn render_model(spec: &SynthSpec, index: usize) -> InstanceModel {
    let mut rng = instance_rng(spec.seed, index);
    let glyph_px = rng.random_range(spec.glyph_px.0..=spec.glyph_px.1);
    let grid = (0..spec.rows)
        .map(|_| {
            (0..spec.cols)
                .map(|_| rng.random_range(spec.values.0..=spec.values.1))
                .collect()
        })
        .collect();
    let row = rng.random_range(0..spec.rows as usize);
    let col = rng.random_range(0..spec.cols as usize);
    InstanceModel {
        index,
        glyph_px,
        grid,
        row,
        col,
    }
}

/// 5×7 bitmap glyphs; bit 4 is the leftmost column.
pub fn glyph(ch: char) -> Option<[u8; 7]> {
    Some(match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        _ => return None,
    })
}

pub const INK: [u8; 3] = [0, 0, 0];
pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const RULE: [u8; 3] = [160, 160, 160];

/// Pixel geometry of a rendered table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub glyph_h: u32,
    pub glyph_w: u32,
    pub gap: u32,
    pub pad: u32,
    pub cell_w: u32,
    pub cell_h: u32,
    pub rows: u32,
    pub cols: u32,
}

impl Layout {
    pub fn new(glyph_px: u32, max_chars: usize, rows: u32, cols: u32) -> Self {
        let glyph_h = glyph_px;
        let glyph_w = ((glyph_px as f64 * 5.0 / 7.0 + 0.5).floor() as u32).max(1);
        let gap = (glyph_px / 5).max(1);
        let pad = (glyph_px / 4).max(2);
        let n = max_chars as u32;
        Self {
            glyph_h,
            glyph_w,
            gap,
            pad,
            cell_w: n * glyph_w + (n - 1) * gap + 2 * pad,
            cell_h: glyph_h + 2 * pad,
            rows,
            cols,
        }
    }

    pub fn width(&self) -> u32 {
        self.cols * self.cell_w + self.cols + 1
    }

    pub fn height(&self) -> u32 {
        self.rows * self.cell_h + self.rows + 1
    }

    /// Top-left pixel of character `k` in cell (`row`, `col`).
    pub fn glyph_origin(&self, row: u32, col: u32, k: u32) -> (u32, u32) {
        let x = 1 + col * (self.cell_w + 1) + self.pad + k * (self.glyph_w + self.gap);
        let y = 1 + row * (self.cell_h + 1) + self.pad;
        (x, y)
    }

    fn is_rule(&self, x: u32, y: u32) -> bool {
        x.is_multiple_of(self.cell_w + 1) || y.is_multiple_of(self.cell_h + 1)
    }
}

pub fn render(spec: &SynthSpec, model: &InstanceModel) -> Result<Image, DegradeError> {
    let layout = Layout::new(model.glyph_px, spec.max_chars(), spec.rows, spec.cols);
    let mut pixels = Vec::with_capacity(layout.width() as usize * layout.height() as usize * 3);
    for y in 0..layout.height() {
        for x in 0..layout.width() {
            let px = if layout.is_rule(x, y) { RULE } else { BACKGROUND };
            pixels.extend_from_slice(&px);
        }
    }
    let stride = layout.width() as usize * 3;
    for (r, row) in model.grid.iter().enumerate() {
        for (c, value) in row.iter().enumerate() {
            for (k, ch) in value.to_string().chars().enumerate() {
                let bits = glyph(ch).expect("digits and minus are in the font");
                let (ox, oy) = layout.glyph_origin(r as u32, c as u32, k as u32);
                for gy in 0..layout.glyph_h {
                    let font_row = bits[(gy * 7 / layout.glyph_h) as usize];
                    for gx in 0..layout.glyph_w {
                        let font_col = gx * 5 / layout.glyph_w;
                        if font_row & (0x10 >> font_col) != 0 {
                            let i = (oy + gy) as usize * stride + (ox + gx) as usize * 3;
                            pixels[i..i + 3].copy_from_slice(&INK);
                        }
                    }
                }
            }
        }
    }
    Image::new(layout.width(), layout.height(), pixels)
}

pub fn layout_for(spec: &SynthSpec, model: &InstanceModel) -> Layout {
    Layout::new(model.glyph_px, spec.max_chars(), spec.rows, spec.cols)
}

pub fn instance_for(model: &InstanceModel) -> QaInstance {
    QaInstance {
        id: model.id(),
        image_path: format!("images/{}.png", model.id()),
        question: model.question(),
        gold_answer: Some(model.answer().to_string()),
        source: Some(source_tag(model.glyph_px)),
    }
}

/// Writes `instances.jsonl` and `images/*.png` under `out_dir`.
pub fn gen_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<QaInstance>, SynthError> {
    spec.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| SynthError::Io {
        path: images.display().to_string(),
        source,
    })?;
    let instances = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let model = render_model(spec, i);
            let inst = instance_for(&model);
            render(spec, &model)?.save_png(&out_dir.join(&inst.image_path))?;
            Ok(inst)
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    corpus::write_instances(&out_dir.join("instances.jsonl"), &instances)?;
    Ok(instances)
}

/// Closed-form count of instances legible under `view`.
pub fn legible_count(spec: &SynthSpec, view: &ViewSpec) -> usize {
    (0..spec.n)
        .filter(|&i| legibility_score(render_model(spec, i).glyph_px, view) >= spec.tau)
        .count()
}
