use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vdforge_core::degrade::{self, Image};
use vdforge_core::dpocore::{self, DpoBatch, DpoItem, ToyPolicy, Vocab};
use vdforge_core::grade;

fn dpo(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (v, f) = (256, 32);
    let weights = (0..v * f).map(|_| rng.random_range(-0.1..0.1)).collect();
    let policy = ToyPolicy::with_weights(Vocab::synthetic(v), f, weights).unwrap();
    let reference = ToyPolicy::zeros(Vocab::synthetic(v), f);
    let items = (0..64)
        .map(|i| DpoItem {
            context: format!(
                "What is the value in row {}, column {}?",
                i % 3 + 1,
                i % 5 + 1
            ),
            chosen: (0..30).map(|_| rng.random_range(0..v)).collect(),
            rejected: (0..60).map(|_| rng.random_range(0..v)).collect(),
        })
        .collect();
    let batch = DpoBatch::new(items, 0.1);
    c.bench_function("dpo_loss_and_grad/64x256", |b| {
        b.iter(|| dpocore::dpo_loss_and_grad(black_box(&policy), &reference, &batch).unwrap())
    });
}

fn resize(c: &mut Criterion) {
    let img = Image::from_fn(640, 480, |x, y| {
        [(x % 256) as u8, (y % 256) as u8, ((x ^ y) % 256) as u8]
    })
    .unwrap();
    c.bench_function("degrade_resolution/640x480@0.1", |b| {
        b.iter(|| degrade::degrade_resolution(black_box(&img), 0.1).unwrap())
    });
    c.bench_function("degrade_motion_blur/640x480/15", |b| {
        b.iter(|| degrade::degrade_motion_blur(black_box(&img), 15, 30.0).unwrap())
    });
}

fn grading(c: &mut Criterion) {
    let text = format!(
        "<thinking>{}</thinking>\n<answer> 1,234.50% </answer>",
        "The digits are blurry. ".repeat(40)
    );
    c.bench_function("extract_and_match", |b| {
        b.iter(|| {
            let a = grade::extract_answer(black_box(&text)).unwrap();
            grade::tolerance_match(&a, "1234.5", 0.5)
        })
    });
}

criterion_group!(benches, dpo, resize, grading);
criterion_main!(benches);
