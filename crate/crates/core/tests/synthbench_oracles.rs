use vdforge_core::corpus::{self, ViewSpec};
use vdforge_core::degrade::Image;
use vdforge_core::synthbench::{self, Layout, SynthSpec, INK, BACKGROUND};

/// Reads the digits of one cell back off the image by sampling the first pixel
/// of every font block (blocks are uneven under nearest-neighbour scaling) and
/// matching the 5×7 pattern.
fn read_cell(img: &Image, layout: &Layout, row: u32, col: u32) -> String {
    let alphabet: Vec<(char, [u8; 7])> = "0123456789-"
        .chars()
        .map(|c| (c, synthbench::glyph(c).unwrap()))
        .collect();
    let mut out = String::new();
    for k in 0.. {
        let (ox, oy) = layout.glyph_origin(row, col, k);
        if ox + layout.glyph_w > 1 + (col + 1) * (layout.cell_w + 1) {
            break;
        }
        let mut bits = [0u8; 7];
        for (fr, b) in bits.iter_mut().enumerate() {
            for fc in 0..5u32 {
                let y = oy + (fr as u32 * layout.glyph_h).div_ceil(7);
                let x = ox + (fc * layout.glyph_w).div_ceil(5);
                let px = img.pixel(x, y);
                assert!(px == INK || px == BACKGROUND, "unexpected colour {px:?}");
                if px == INK {
                    *b |= 0x10 >> fc;
                }
            }
        }
        if bits == [0; 7] {
            break;
        }
        let Some((c, _)) = alphabet.iter().find(|(_, g)| *g == bits) else {
            panic!("unknown pattern {bits:02x?} at k={k} layout {layout:?}")
        };
        out.push(*c);
    }
    out
}

#[test]
fn rendered_cells_decode_to_the_model() {
    let spec = SynthSpec {
        n: 12,
        seed: 3,
        glyph_px: (7, 40),
        values: (-99, 999),
        rows: 2,
        cols: 4,
        ..SynthSpec::default()
    };
    for i in 0..spec.n {
        let model = synthbench::render_model(&spec, i);
        let layout = synthbench::layout_for(&spec, &model);
        let img = synthbench::render(&spec, &model).unwrap();
        assert_eq!(
            (img.width(), img.height()),
            (layout.width(), layout.height())
        );
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                assert_eq!(
                    read_cell(&img, &layout, r, c),
                    model.grid[r as usize][c as usize].to_string()
                );
            }
        }
        let inst = synthbench::instance_for(&model);
        assert_eq!(
            inst.gold_answer.as_deref(),
            Some(model.answer().to_string().as_str())
        );
        assert_eq!(
            synthbench::glyph_px_from_source(inst.source.as_deref()),
            Some(model.glyph_px)
        );
    }
}

#[test]
fn corpus_generation_is_deterministic() {
    let spec = SynthSpec {
        n: 10,
        seed: 11,
        glyph_px: (8, 30),
        ..SynthSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ia = synthbench::gen_corpus(&spec, a.path()).unwrap();
    let ib = synthbench::gen_corpus(&spec, b.path()).unwrap();
    assert_eq!(ia, ib);
    assert_eq!(ia.len(), 10);
    let manifest = a.path().join("instances.jsonl");
    assert_eq!(corpus::load_instances(&manifest).unwrap(), ia);
    assert_eq!(
        std::fs::read(&manifest).unwrap(),
        std::fs::read(b.path().join("instances.jsonl")).unwrap()
    );
    for inst in &ia {
        let pa = std::fs::read(a.path().join(&inst.image_path)).unwrap();
        let pb = std::fs::read(b.path().join(&inst.image_path)).unwrap();
        assert_eq!(pa, pb, "{}", inst.id);
    }
}

#[test]
fn quality_sensitive_count_has_a_closed_form() {
    let spec = SynthSpec {
        n: 400,
        ..SynthSpec::default()
    };
    let lq = ViewSpec::Resolution { alpha: 0.1 };
    let heights: Vec<u32> = (0..spec.n)
        .map(|i| synthbench::render_model(&spec, i).glyph_px)
        .collect();
    // Every height is legible at HQ (>= 20 px > tau), and legible at alpha 0.1 iff h >= 60.
    let quality_sensitive = heights.iter().filter(|&&h| h < 60).count();
    assert_eq!(synthbench::legible_count(&spec, &ViewSpec::Hq), spec.n);
    assert_eq!(
        synthbench::legible_count(&spec, &lq),
        spec.n - quality_sensitive
    );
    assert!(quality_sensitive > 0 && quality_sensitive < spec.n);
    // Uniform heights on 20..=100: expected share 40/81, checked to 4 standard errors.
    let share = quality_sensitive as f64 / spec.n as f64;
    let p = 40.0 / 81.0;
    assert!(
        (share - p).abs() < 4.0 * (p * (1.0 - p) / spec.n as f64).sqrt(),
        "{share}"
    );
}

#[test]
fn legibility_is_monotone_in_severity() {
    for h in [1u32, 7, 20, 55, 100] {
        let mut last = f64::NEG_INFINITY;
        for a in 1..=100 {
            let s = synthbench::legibility_score(
                h,
                &ViewSpec::Resolution {
                    alpha: a as f64 / 100.0,
                },
            );
            assert!(s >= last);
            last = s;
        }
        let mut last = f64::INFINITY;
        for k in 0..=40 {
            let s = synthbench::legibility_score(
                h,
                &ViewSpec::GaussianNoise {
                    sigma: k as f64 / 100.0,
                    seed: 0,
                },
            );
            assert!(s <= last && s >= 0.0);
            last = s;
        }
        let mut last = f64::INFINITY;
        for len in 1..=30 {
            let s = synthbench::legibility_score(
                h,
                &ViewSpec::MotionBlur {
                    length_px: len,
                    angle_deg: 0.0,
                },
            );
            assert!(s <= last);
            last = s;
        }
    }
}
