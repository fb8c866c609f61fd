#[path = "support/oracles.rs"]
mod oracles;

use budgeted_attention::evaluation::spearman;
use budgeted_attention::gating::{head_count, select_top_k, soft_gates, GateParams, BUDGET_EPS};
use budgeted_attention::tensor::Array;
use budgeted_attention::training::{budgeted_loss, distill_kl, distill_loss, sample_budget};
use oracles::{enumerate_best, permutations, rank_difference_spearman};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_4x4() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn floored_top_k_matches_enumeration(scores in grid_4x4(), k in 4usize..=16) {
        let a = Array::from_vec(&[4, 4], scores.clone()).unwrap();
        let got = select_top_k(&a, k, true).unwrap();
        prop_assert_eq!(got.data(), &enumerate_best(&scores, 4, 4, k, true)[..]);
    }

    #[test]
    fn global_top_k_matches_enumeration(scores in grid_4x4(), k in 1usize..=16) {
        let a = Array::from_vec(&[4, 4], scores.clone()).unwrap();
        let got = select_top_k(&a, k, false).unwrap();
        prop_assert_eq!(got.data(), &enumerate_best(&scores, 4, 4, k, false)[..]);
    }

    #[test]
    fn soft_gates_are_monotone_in_budget(
        a in prop::collection::vec(-4.0f64..4.0, 6),
        s in prop::collection::vec(-4.0f64..4.0, 6),
        b1 in 0.01f64..1.0,
        b2 in 0.01f64..1.0,
    ) {
        let gp = GateParams::new(
            Array::from_vec(&[2, 3], a).unwrap(),
            Array::from_vec(&[2, 3], s).unwrap(),
            1.0,
            BUDGET_EPS,
        ).unwrap();
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let zl = soft_gates(&gp, lo).unwrap();
        let zh = soft_gates(&gp, hi).unwrap();
        for (x, y) in zl.values().data().iter().zip(zh.values().data()) {
            prop_assert!(*x <= *y);
            prop_assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn budgeted_loss_decomposes_exactly(
        logits in prop::collection::vec(-6.0f64..6.0, 12),
        labels in prop::collection::vec(0usize..3, 4),
        cost in 0.0f64..=1.0,
        budget in 0.01f64..=1.0,
        lambda in 0.0f64..1.0,
        beta in 0.0f64..10.0,
    ) {
        let l = Array::from_vec(&[4, 3], logits).unwrap();
        let t = budgeted_loss(&l, &labels, cost, budget, lambda, beta).unwrap();
        let over = (cost - budget).max(0.0);
        let rest = t.total - t.ce - lambda * cost - beta * over * over;
        prop_assert!(rest.abs() <= 1e-12, "residual {}", rest);
    }

    #[test]
    fn distillation_kl_is_nonnegative(
        s in prop::collection::vec(-8.0f64..8.0, 8),
        t in prop::collection::vec(-8.0f64..8.0, 8),
        temp in 0.5f64..4.0,
    ) {
        let s = Array::from_vec(&[2, 4], s).unwrap();
        let t = Array::from_vec(&[2, 4], t).unwrap();
        prop_assert!(distill_kl(&s, &t, temp) >= -1e-15);
        prop_assert!(distill_kl(&s, &s, temp).abs() <= 1e-15);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(x in prop::collection::vec(-5.0f64..5.0, 3..12), shift in -3.0f64..3.0) {
        let y: Vec<f64> = x.iter().map(|v| (v * 0.7).exp() + shift).collect();
        match spearman(&x, &y) {
            Ok(r) => prop_assert!((r - 1.0).abs() < 1e-12),
            Err(_) => prop_assert!(x.iter().all(|v| *v == x[0])),
        }
    }
}

#[test]
fn spearman_matches_rank_difference_formula_on_all_permutations_of_five() {
    let perms = permutations(5);
    assert_eq!(perms.len(), 120);
    for p in &perms {
        for q in &perms {
            let x: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = q.iter().map(|&v| v as f64 * 10.0 - 3.0).collect();
            let oracle = rank_difference_spearman(p, q);
            let got = spearman(&x, &y).unwrap();
            assert!((got - oracle).abs() < 1e-12, "{p:?} {q:?}: {got} vs {oracle}");
        }
    }
}

#[test]
fn uniform_scores_break_ties_by_position() {
    let a = Array::full(&[2, 4], 0.5);
    let m = select_top_k(&a, 3, false).unwrap();
    assert_eq!(m.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let m = select_top_k(&a, 3, true).unwrap();
    assert_eq!(m.data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn head_counts_on_four_by_four() {
    assert_eq!(head_count(0.5, 4, 4).unwrap(), 8);
    assert_eq!(head_count(0.75, 4, 4).unwrap(), 12);
    assert_eq!(head_count(0.01, 4, 4).unwrap(), 1);
    assert_eq!(head_count(1.0, 4, 4).unwrap(), 16);
}

#[test]
fn distillation_closed_form() {
    // Teacher (2, 0) against a uniform student at T = 1 with alpha = 1.
    let teacher = Array::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
    let student = Array::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
    let p = 1.0 / (1.0 + (-2.0f64).exp());
    let oracle = p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln();
    let t = distill_loss(&student, &teacher, &[0], 1.0, 1.0).unwrap();
    assert!((t.kl - oracle).abs() < 1e-15);
    assert!((t.total - oracle).abs() < 1e-15);

    // Identical logits leave only the weighted task loss.
    let t = distill_loss(&teacher, &teacher, &[1], 0.5, 2.0).unwrap();
    assert_eq!(t.kl, 0.0);
    assert!((t.total - 0.5 * t.ce).abs() < 1e-15);
    // alpha = 0 is the pure task loss.
    let t = distill_loss(&student, &teacher, &[1], 0.0, 2.0).unwrap();
    assert_eq!(t.total, t.ce);
}

#[test]
fn sampled_budgets_average_to_the_range_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws: Vec<f64> = (0..10_000).map(|_| sample_budget(&mut rng, (0.25, 1.0))).collect();
    assert!(draws.iter().all(|b| (0.25..=1.0).contains(b)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 0.625).abs() < 0.01, "mean {mean}");
}
