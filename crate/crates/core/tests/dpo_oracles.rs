use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vdforge_core::dpocore::{self, DpoBatch, DpoItem, ToyPolicy, Vocab};

// With two feature slots every non-empty context maps to φ = [1, 1] and the
// empty context to [1, 0], so the values below can be computed without the
// hashing featurizer. Expected values come from a 50-digit evaluation of
// mean softplus(−β·m) and numeric differentiation of it.
fn fixture(beta: f64, normalize: bool) -> (ToyPolicy, ToyPolicy, DpoBatch) {
    let policy = ToyPolicy::with_weights(
        Vocab::synthetic(4),
        2,
        vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25, 0.0, 0.6],
    )
    .unwrap();
    let reference = ToyPolicy::with_weights(
        Vocab::synthetic(4),
        2,
        vec![0.1, 0.1, -0.3, 0.2, 0.05, -0.15, 0.2, 0.0],
    )
    .unwrap();
    let mut batch = DpoBatch::new(
        vec![
            DpoItem {
                context: "row value".into(),
                chosen: vec![2, 1, 2],
                rejected: vec![3, 0],
            },
            DpoItem {
                context: String::new(),
                chosen: vec![1],
                rejected: vec![3, 3, 2],
            },
        ],
        beta,
    );
    batch.length_normalize = normalize;
    (policy, reference, batch)
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol * w.abs().max(1.0), "[{i}] {g} vs {w}");
    }
}

#[test]
fn loss_and_gradient_match_extended_precision() {
    let (p, r, b) = fixture(0.5, false);
    let (loss, grad) = dpocore::dpo_loss_and_grad(&p, &r, &b).unwrap();
    assert!((loss - 0.682_503_618_681_840_3).abs() < 1e-14, "{loss}");
    assert_close(
        &grad,
        &[
            0.039_341_736_600_628_15,
            -0.272_467_292_139_458_4,
            -0.125_741_091_892_320_36,
            0.358_866_647_431_150_6,
            0.117_591_665_839_087_27,
            -0.082_330_704_269_327_34,
            -0.172_842_019_161_289_84,
            0.137_581_057_591_529_9,
        ],
        1e-13,
    );
}

#[test]
fn length_normalized_loss_matches_extended_precision() {
    let (p, r, b) = fixture(2.0, true);
    let (loss, grad) = dpocore::dpo_loss_and_grad(&p, &r, &b).unwrap();
    assert!((loss - 0.872_437_816_832_438_4).abs() < 1e-14, "{loss}");
    assert_close(
        &grad,
        &[
            0.175_269_972_574_416_2,
            -0.847_905_227_012_949,
            0.009_992_896_110_780_043,
            0.662_642_358_327_752_8,
            0.175_269_972_574_416_2,
            -0.116_846_648_382_944_12,
            -0.233_693_296_765_888_25,
            0.175_269_972_574_416_2,
        ],
        1e-13,
    );
}

#[test]
fn loss_is_ln2_at_reference_and_gradient_is_half_beta() {
    let (p, _, b) = fixture(0.5, false);
    let (loss, grad) = dpocore::dpo_loss_and_grad(&p, &p.clone(), &b).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    // σ(0) = 1/2, so the gradient is −(β/2)/N · Σ (∇ log π(chosen) − ∇ log π(rejected)).
    let items: Vec<_> = b.items.clone();
    let mut want = vec![0.0; grad.len()];
    for it in &items {
        let phi = p.features(&it.context);
        let probs: Vec<f64> = p.log_probs(&phi).iter().map(|l| l.exp()).collect();
        let v = probs.len();
        for f in 0..phi.len() {
            for j in 0..v {
                let count = |s: &[usize]| s.iter().filter(|&&t| t == j).count() as f64;
                let g_c = phi[f] * (count(&it.chosen) - it.chosen.len() as f64 * probs[j]);
                let g_r = phi[f] * (count(&it.rejected) - it.rejected.len() as f64 * probs[j]);
                want[f * v + j] -= 0.25 / items.len() as f64 * (g_c - g_r);
            }
        }
    }
    assert_close(&grad, &want, 1e-14);
}

fn random_setup(seed: u64) -> (ToyPolicy, ToyPolicy, DpoBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.random_range(2..=12);
    let f = rng.random_range(1..=16);
    let mut w = || {
        (0..v * f)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    let p = ToyPolicy::with_weights(Vocab::synthetic(v), f, w()).unwrap();
    let r = ToyPolicy::with_weights(Vocab::synthetic(v), f, w()).unwrap();
    let words = ["a", "b", "c", "row", "col", "7", "?"];
    let items = (0..rng.random_range(1..5))
        .map(|_| {
            let ctx: Vec<&str> = (0..rng.random_range(0..6))
                .map(|_| words[rng.random_range(0..words.len())])
                .collect();
            let mut seq = || {
                (0..rng.random_range(1..6))
                    .map(|_| rng.random_range(0..v))
                    .collect::<Vec<_>>()
            };
            DpoItem {
                context: ctx.join(" "),
                chosen: seq(),
                rejected: seq(),
            }
        })
        .collect();
    (p, r, DpoBatch::new(items, rng.random_range(0.05..3.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn directional_derivative_matches_gradient(seed in any::<u64>(), dseed in any::<u64>()) {
        let (p, r, b) = random_setup(seed);
        let grad = dpocore::dpo_grad(&p, &r, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(dseed);
        let mut d: Vec<f64> = (0..grad.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= norm);
        let h = 1e-5;
        let shifted = |s: f64| {
            let mut q = p.clone();
            q.weights_mut().iter_mut().zip(&d).for_each(|(w, di)| *w += s * di);
            dpocore::dpo_loss(&q, &r, &b).unwrap()
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic: f64 = grad.iter().zip(&d).map(|(g, di)| g * di).sum();
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        prop_assert!(rel < 1e-4, "numeric {numeric} analytic {analytic}");
    }

    #[test]
    fn loss_strictly_decreases_in_margin(m1 in -30.0f64..30.0, gap in 1e-3f64..10.0, beta in 0.01f64..5.0) {
        let loss = |m: f64| dpocore::softplus(-beta * m);
        prop_assert!(loss(m1 + gap) < loss(m1));
    }

    #[test]
    fn swapping_sides_sums_to_at_least_two_ln2(seed in any::<u64>()) {
        let (p, r, b) = random_setup(seed);
        let swapped = DpoBatch {
            items: b.items.iter().map(|it| DpoItem {
                context: it.context.clone(),
                chosen: it.rejected.clone(),
                rejected: it.chosen.clone(),
            }).collect(),
            ..b.clone()
        };
        let m = dpocore::margins(&p, &r, &b).unwrap();
        let ms = dpocore::margins(&p, &r, &swapped).unwrap();
        for (a, s) in m.iter().zip(&ms) {
            prop_assert!((a + s).abs() < 1e-12);
            let total = dpocore::softplus(-b.beta * a) + dpocore::softplus(-b.beta * s);
            prop_assert!(total >= 2.0 * std::f64::consts::LN_2 - 1e-15);
        }
        // Per item the difference is exactly β·m.
        let l = dpocore::dpo_loss(&p, &r, &b).unwrap();
        let ls = dpocore::dpo_loss(&p, &r, &swapped).unwrap();
        let mean_bm = b.beta * m.iter().sum::<f64>() / m.len() as f64;
        prop_assert!((ls - l - mean_bm).abs() < 1e-9);
    }

    #[test]
    fn shifting_all_logits_changes_nothing(seed in any::<u64>(), c in -5.0f64..5.0) {
        let (p, r, b) = random_setup(seed);
        // Slot 0 is the constant bias, so adding c to its row shifts every logit by c.
        let mut q = p.clone();
        let v = q.vocab_size();
        q.weights_mut()[..v].iter_mut().for_each(|w| *w += c);
        let (l1, g1) = dpocore::dpo_loss_and_grad(&p, &r, &b).unwrap();
        let (l2, g2) = dpocore::dpo_loss_and_grad(&q, &r, &b).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-10);
        for (a, z) in g1.iter().zip(&g2) {
            prop_assert!((a - z).abs() < 1e-10);
        }
    }

    #[test]
    fn small_beta_approaches_ln2(seed in any::<u64>()) {
        let (p, r, mut b) = random_setup(seed);
        b.beta = 1e-9;
        let (l, g) = dpocore::dpo_loss_and_grad(&p, &r, &b).unwrap();
        prop_assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
        prop_assert!(g.iter().all(|x| x.abs() < 1e-6));
    }
}

#[test]
fn gradient_step_reduces_loss() {
    for seed in 0..20 {
        let (p, r, b) = random_setup(seed);
        let (l0, g) = dpocore::dpo_loss_and_grad(&p, &r, &b).unwrap();
        let mut q = p.clone();
        q.weights_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(w, gi)| *w -= 1e-3 * gi);
        let l1 = dpocore::dpo_loss(&q, &r, &b).unwrap();
        assert!(l1 <= l0, "seed {seed}: {l0} -> {l1}");
    }
}
