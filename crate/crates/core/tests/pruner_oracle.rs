mod common;

use common::{hessian, objective_gram, random, reduced_refit, rng, Mat};
use proptest::prelude::*;
use zipkit::linalg::spd_inverse;
use zipkit::pruner::{greedy_prune, prune_one, saliency_scores, PruneState};
use zipkit::store::{StructureGroup, StructureKind};

fn structures(n: usize, width: usize) -> Vec<Vec<usize>> {
    (0..n).map(|s| (s * width..(s + 1) * width).collect()).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn saliency_is_twice_the_refit_error_increase() {
    for (seed, width) in [(1, 1), (2, 2), (3, 3), (4, 4)] {
        let mut r = rng(seed);
        let d = 12;
        let w = random(5, d, &mut r);
        let x = random(d, 40, &mut r);
        let lambda = 1e-3;
        let hinv = spd_inverse(&hessian(&x, lambda)).unwrap();
        let g = objective_gram(&x, lambda);
        let cands = structures(d / width, width);
        let scores = saliency_scores(&w, &hinv, &cands).unwrap();
        for (s, cols) in cands.iter().enumerate() {
            let (_, inc) = reduced_refit(&w, &g, cols);
            assert!(
                rel(scores[s] / 2.0, inc) < 1e-9,
                "seed {seed} s {s}: {} vs {inc}",
                scores[s] / 2.0
            );
        }
    }
}

#[test]
fn compensation_equals_refit_weights() {
    let mut r = rng(10);
    let d = 10;
    let w = random(4, d, &mut r);
    let x = random(d, 30, &mut r);
    let lambda = 1e-2;
    let hinv = spd_inverse(&hessian(&x, lambda)).unwrap();
    let g = objective_gram(&x, lambda);
    let cols = vec![3, 7];
    let (w2, _) = prune_one(&w, &hinv, &cols).unwrap();
    let (oracle, _) = reduced_refit(&w, &g, &cols);
    assert!((&w2 - &oracle).amax() < 1e-10, "{}", (&w2 - &oracle).amax());
}

#[test]
fn sequential_removals_match_joint_refit() {
    // After several greedy removals, the weights equal a single refit with
    // all removed columns fixed to zero.
    let mut r = rng(11);
    let d = 16;
    let w = random(6, d, &mut r);
    let x = random(d, 50, &mut r);
    let lambda = 1e-2;
    let hinv = spd_inverse(&hessian(&x, lambda)).unwrap();
    let g = objective_gram(&x, lambda);
    let group = StructureGroup::contiguous(StructureKind::Generic, "w", None, 2, 8);
    let run = greedy_prune(&w, &hinv, 5, &group).unwrap();
    let removed_cols: Vec<usize> = run
        .mask
        .removed
        .iter()
        .flat_map(|&s| group.structures[s].clone())
        .collect();
    let (oracle, _) = reduced_refit(&w, &g, &removed_cols);
    assert!((&run.weights - &oracle).amax() < 1e-9);
}

#[test]
fn greedy_step_matches_oracle_argmin() {
    for seed in 20..30 {
        let mut r = rng(seed);
        let d = 12;
        let w = random(4, d, &mut r);
        let x = random(d, 30, &mut r);
        let lambda = 1e-4;
        let hinv = spd_inverse(&hessian(&x, lambda)).unwrap();
        let g = objective_gram(&x, lambda);
        let cands = structures(6, 2);
        let mut state = PruneState::new(w.clone(), hinv, cands.clone()).unwrap();
        // three greedy steps, each checked against a from-scratch refit
        let mut removed: Vec<usize> = Vec::new();
        for _ in 0..3 {
            let (_, base) = reduced_refit(&w, &g, &removed);
            let oracle = (0..cands.len())
                .filter(|s| state.is_remaining(*s))
                .map(|s| {
                    let mut cols = removed.clone();
                    cols.extend(&cands[s]);
                    (s, reduced_refit(&w, &g, &cols).1 - base)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let (s, _) = state.step().unwrap().unwrap();
            assert_eq!(s, oracle.0, "seed {seed}");
            removed.extend(&cands[s]);
        }
    }
}

#[test]
fn downdate_tracks_reinversion_over_twenty_steps() {
    let mut r = rng(40);
    let d = 32;
    let w = random(8, d, &mut r);
    let x = random(d, 128, &mut r);
    let h = hessian(&x, 0.1);
    let mut hinv = spd_inverse(&h).unwrap();
    let mut wk = w.clone();
    let mut alive: Vec<usize> = (0..d).collect();
    for step in 0..20 {
        let c = alive[(step * 7) % alive.len()];
        let (w2, h2) = prune_one(&wk, &hinv, &[c]).unwrap();
        wk = w2;
        hinv = h2;
        alive.retain(|&a| a != c);
        let sub = Mat::from_fn(alive.len(), alive.len(), |i, j| h[(alive[i], alive[j])]);
        let direct = spd_inverse(&sub).unwrap();
        let kept = Mat::from_fn(alive.len(), alive.len(), |i, j| hinv[(alive[i], alive[j])]);
        let dev = (&kept - &direct).norm() / direct.norm();
        assert!(dev < 1e-10, "step {step}: {dev}");
    }
}

#[test]
fn input_scaling_preserves_decisions() {
    let mut r = rng(50);
    let d = 12;
    let w = random(5, d, &mut r);
    let x = random(d, 40, &mut r);
    let c = 7.0;
    let group = StructureGroup::contiguous(StructureKind::Generic, "w", None, 3, 4);
    let a = greedy_prune(&w, &spd_inverse(&hessian(&x, 1e-3)).unwrap(), 3, &group).unwrap();
    let b = greedy_prune(&w, &spd_inverse(&hessian(&(&x * c), 1e-3 * c * c)).unwrap(), 3, &group).unwrap();
    assert_eq!(a.mask, b.mask);
    assert!((&a.weights - &b.weights).amax() < 1e-10);
    for (sa, sb) in a.scores.iter().zip(&b.scores) {
        assert!(rel(*sb, sa * c * c) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruning_invariants(seed in 0u64..10_000, k in 0usize..=6) {
        let mut r = rng(seed);
        let w = random(3, 12, &mut r);
        let x = random(12, 24, &mut r);
        let hinv = spd_inverse(&hessian(&x, 1e-2)).unwrap();
        let group = StructureGroup::contiguous(StructureKind::Generic, "w", None, 2, 6);
        let run = greedy_prune(&w, &hinv, k, &group).unwrap();
        prop_assert!(run.scores.iter().all(|s| *s >= 0.0));
        let mut seen = run.mask.removed.clone();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), k);
        for c in 0..12 {
            if run.mask.columns[c] {
                prop_assert!(run.weights.column(c).iter().all(|v| *v == 0.0));
            }
        }
        prop_assert_eq!(run.mask.pruned_columns(), 2 * k);
    }
}
