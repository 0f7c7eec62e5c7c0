mod common;

use proptest::prelude::*;
use rand::Rng;
use zipkit::distill::{
    combined_loss, logit_kl, token_loss, token_loss_layer, LayerPair, LossWeights, PaddingMask, TokenTensor,
};
use zipkit::Error;

/// Plain nested-loop token distance, indices spelled out by hand.
fn oracle_token(s: &[f64], t: &[f64], pad: &[bool], batch: usize, seq: usize, hidden: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for b in 0..batch {
        for q in 0..seq {
            if pad[b * seq + q] {
                continue;
            }
            let mut acc = 0.0;
            for h in 0..hidden {
                let i = (b * seq + q) * hidden + h;
                acc += (s[i] - t[i]).powi(2);
            }
            sum += acc.sqrt();
            n += 1.0;
        }
    }
    sum / n
}

/// KL through explicit probabilities rather than log-softmax.
fn oracle_kl(s: &[Vec<f64>], t: &[Vec<f64>], temp: f64) -> f64 {
    let probs = |row: &Vec<f64>| {
        let z: Vec<f64> = row.iter().map(|v| (v / temp).exp()).collect();
        let total: f64 = z.iter().sum();
        z.into_iter().map(|v| v / total).collect::<Vec<f64>>()
    };
    let mut sum = 0.0;
    for (a, b) in s.iter().zip(t) {
        let p = probs(b);
        let q = probs(a);
        for k in 0..p.len() {
            sum += p[k] * (p[k] / q[k]).ln();
        }
    }
    sum / s.len() as f64 * temp * temp
}

#[test]
fn token_loss_matches_loop_oracle() {
    let mut r = common::rng(3);
    let (batch, seq, hidden) = (2, 3, 4);
    for _ in 0..50 {
        let s: Vec<f64> = (0..batch * seq * hidden).map(|_| r.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..batch * seq * hidden).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut pad: Vec<bool> = (0..batch * seq).map(|_| r.random_bool(0.3)).collect();
        pad[0] = false;
        let got = token_loss_layer(
            &TokenTensor::new(batch, seq, hidden, s.clone()).unwrap(),
            &TokenTensor::new(batch, seq, hidden, t.clone()).unwrap(),
            &PaddingMask::new(batch, seq, pad.clone()).unwrap(),
        )
        .unwrap();
        let want = oracle_token(&s, &t, &pad, batch, seq, hidden);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn pruned_layers_are_excluded_from_the_mean() {
    let t = |v: f64| TokenTensor::new(1, 1, 2, vec![v, 0.0]).unwrap();
    let zero = t(0.0);
    let layers = vec![
        LayerPair {
            student: t(1.0),
            teacher: zero.clone(),
            pruned: false,
        },
        LayerPair {
            student: t(100.0),
            teacher: zero.clone(),
            pruned: true,
        },
        LayerPair {
            student: t(3.0),
            teacher: zero.clone(),
            pruned: false,
        },
    ];
    assert_eq!(token_loss(&layers, &PaddingMask::none(1, 1)).unwrap(), 2.0);
}

#[test]
fn all_padding_is_an_error() {
    let s = TokenTensor::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
    let mask = PaddingMask::new(1, 2, vec![true, true]).unwrap();
    assert!(matches!(token_loss_layer(&s, &s, &mask), Err(Error::NoTokens)));
}

#[test]
fn kl_matches_probability_oracle() {
    let mut r = common::rng(9);
    for temp in [0.5, 1.0, 2.0, 4.0] {
        let s: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..7).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let t: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..7).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let got = logit_kl(&s, &t, temp).unwrap();
        let want = oracle_kl(&s, &t, temp);
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "T={temp}: {got} vs {want}");
    }
}

#[test]
fn kl_is_stable_for_large_logits() {
    let s = vec![vec![1000.0, 0.0]];
    let t = vec![vec![0.0, 1000.0]];
    let v = logit_kl(&s, &t, 1.0).unwrap();
    assert!((v - 1000.0).abs() < 1e-9, "{v}");
    assert_eq!(logit_kl(&t, &t, 1.0).unwrap(), 0.0);
}

#[test]
fn presets_weight_the_components() {
    let (task, logit, token) = (0.7, 0.3, 0.9);
    let glue = combined_loss(task, logit, token, &LossWeights::glue()).unwrap();
    assert!((glue - 0.6).abs() < 1e-15);
    assert_eq!(combined_loss(task, logit, token, &LossWeights::squad()).unwrap(), logit);
    assert_eq!(combined_loss(task, logit, token, &LossWeights::gpt2()).unwrap(), task);
    assert_eq!(LossWeights::preset("squad"), Some(LossWeights::squad()));
    assert!(LossWeights::preset("imagenet").is_none());
    assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
}

proptest! {
    #[test]
    fn token_loss_is_non_negative_and_zero_on_self(
        vals in proptest::collection::vec(-10.0f64..10.0, 24),
        shift in proptest::collection::vec(-1.0f64..1.0, 24),
    ) {
        let a = TokenTensor::new(2, 3, 4, vals.clone()).unwrap();
        let b = TokenTensor::new(2, 3, 4, vals.iter().zip(&shift).map(|(x, y)| x + y).collect()).unwrap();
        let m = PaddingMask::none(2, 3);
        prop_assert!(token_loss_layer(&a, &b, &m).unwrap() >= 0.0);
        prop_assert_eq!(token_loss_layer(&a, &a, &m).unwrap(), 0.0);
        // symmetric in its arguments
        let ab = token_loss_layer(&a, &b, &m).unwrap();
        let ba = token_loss_layer(&b, &a, &m).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
    }
}
