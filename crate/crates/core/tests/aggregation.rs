use deltamask::aggregation::*;
use deltamask::codec::{sample_mask, BinaryMask};
use deltamask::filters::HashSeed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_masks(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<BinaryMask> {
    (0..k)
        .map(|_| BinaryMask::from_bools(&(0..d).map(|_| rng.random_bool(0.5)).collect::<Vec<_>>()))
        .collect()
}

fn random_theta(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
        .collect()
}

#[test]
fn fresh_prior_equals_empirical_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let k = rng.random_range(1..=20);
        let d = rng.random_range(1..=200);
        let masks = random_masks(&mut rng, k, d);
        let mut state = GlobalState::new(d, 0.5, 1.0, 1.0).unwrap();
        bayes_agg(&masks, &mut state).unwrap();
        assert_eq!(state.theta, estimate_mean(&masks).unwrap());
    }
}

#[test]
fn reset_fires_at_multiples_of_period() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (rho, period) in [(1.0, 1), (0.5, 2), (0.2, 5)] {
        let mut state = GlobalState::new(16, 0.5, 1.0, rho).unwrap();
        for t in 1..=30u64 {
            let masks = random_masks(&mut rng, 3, 16);
            let before = state.prior.clone();
            bayes_agg(&masks, &mut state).unwrap();
            let sums: Vec<f64> = (0..16)
                .map(|i| masks.iter().filter(|m| m.get(i)).count() as f64)
                .collect();
            let base = if t % period == 0 {
                BetaPrior::new(16, 1.0).unwrap()
            } else {
                before
            };
            for i in 0..16 {
                assert_eq!(
                    state.prior.alpha[i],
                    base.alpha[i] + sums[i],
                    "ρ={rho} t={t}"
                );
                assert_eq!(state.prior.beta[i], base.beta[i] + 3.0 - sums[i]);
            }
        }
    }
}

#[test]
fn aggregation_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mut masks = random_masks(&mut rng, 7, 64);
        let mut a = GlobalState::new(64, 0.5, 2.0, 0.5).unwrap();
        let mut b = a.clone();
        bayes_agg(&masks, &mut a).unwrap();
        masks.shuffle(&mut rng);
        bayes_agg(&masks, &mut b).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn estimate_mean_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta = random_theta(&mut rng, 5, 50);
    let target: Vec<f64> = (0..50)
        .map(|i| theta.iter().map(|r| r[i]).sum::<f64>() / 5.0)
        .collect();
    let reps = 4000;
    let mut acc = vec![0.0; 50];
    for r in 0..reps {
        let masks: Vec<BinaryMask> = theta
            .iter()
            .enumerate()
            .map(|(k, t)| sample_mask(t, HashSeed(k as u64), r))
            .collect();
        for (a, m) in acc.iter_mut().zip(estimate_mean(&masks).unwrap()) {
            *a += m;
        }
    }
    for (a, t) in acc.iter().zip(&target) {
        // The mean of 5 Bernoullis has variance at most 1/20.
        let sigma = (0.05 / reps as f64).sqrt();
        assert!((a / reps as f64 - t).abs() < 5.0 * sigma);
    }
}

/// Closed form of `E‖θ̄ - (1/K) Σ m'_k‖²` when `m'_k` is `Bern(θ_k)` passed
/// through a channel flipping each bit with probability `f`.
fn exact_error(theta: &[Vec<f64>], f: f64) -> f64 {
    let k = theta.len() as f64;
    (0..theta[0].len())
        .map(|i| {
            let flipped: Vec<f64> = theta
                .iter()
                .map(|r| r[i] * (1.0 - f) + (1.0 - r[i]) * f)
                .collect();
            let var: f64 = flipped.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (k * k);
            let bias = (flipped.iter().sum::<f64>() - theta.iter().map(|r| r[i]).sum::<f64>()) / k;
            var + bias * bias
        })
        .sum()
}

#[test]
fn error_bound_holds_on_grid_and_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in [100, 1000] {
        for k in [2, 10, 50] {
            let theta = random_theta(&mut rng, k, d);
            for flip in [None, Some(8)] {
                let r =
                    verify_error_bound(&theta, 500, flip, HashSeed(d as u64 + k as u64)).unwrap();
                assert!(r.passed, "d={d} K={k} flip={flip:?}: {r:?}");
                assert_eq!(r.bound, d as f64 / (4.0 * k as f64));
                let exact = exact_error(&theta, flip.map_or(0.0, |b| 0.5f64.powi(b as i32)));
                assert!(
                    (r.empirical - exact).abs() < 0.05 * exact,
                    "d={d} K={k}: {} vs {exact}",
                    r.empirical
                );
            }
        }
    }
}

#[test]
fn error_bound_is_tight_at_one_half() {
    let r = verify_error_bound(&[vec![0.5; 1000]], 1000, None, HashSeed(6)).unwrap();
    assert!((r.empirical - 250.0).abs() <= 0.05 * 250.0);
    assert!(r.passed);
}

#[test]
fn degenerate_probabilities_have_zero_error() {
    let theta = vec![vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]];
    let r = verify_error_bound(&theta, 64, None, HashSeed(7)).unwrap();
    // Coordinate 0 always averages to 0.5, which is exactly θ̄.
    assert_eq!(r.empirical, 0.0);
}

#[test]
fn error_cases() {
    let mut state = GlobalState::new(3, 0.5, 1.0, 1.0).unwrap();
    assert_eq!(
        bayes_agg(&[], &mut state),
        Err(AggregationError::EmptyClientSet)
    );
    assert!(matches!(
        bayes_agg(&[BinaryMask::ones(2)], &mut state),
        Err(AggregationError::LengthMismatch { .. })
    ));
    assert_eq!(state.round, 0);
    assert!(GlobalState::new(3, 0.5, 0.0, 1.0).is_err());
    assert!(GlobalState::new(3, 0.5, 1.0, 0.0).is_err());
    assert_eq!(
        verify_error_bound(&[vec![0.5]], 0, None, HashSeed(0)),
        Err(AggregationError::NoTrials)
    );
    assert!(matches!(
        verify_error_bound(&[vec![0.5], vec![0.5, 0.5]], 4, None, HashSeed(0)),
        Err(AggregationError::LengthMismatch { .. })
    ));
}

proptest! {
    #[test]
    fn checkpoint_roundtrip(
        theta in prop::collection::vec(0.0f64..=1.0, 0..100),
        rounds in 0u64..10,
        lambda0 in 0.1f64..5.0,
        rho in prop::sample::select(vec![1.0, 0.5, 0.2, 0.1]),
    ) {
        let mut state = GlobalState::new(theta.len(), 0.5, lambda0, rho).unwrap();
        state.theta = theta;
        state.round = rounds;
        state.prior.alpha.iter_mut().enumerate().for_each(|(i, a)| *a += i as f64);
        let back = GlobalState::from_bytes(&state.to_bytes()).unwrap();
        prop_assert_eq!(back, state);
    }

    #[test]
    fn corrupt_checkpoints_never_panic(pos in any::<prop::sample::Index>(), byte in 1u8.., cut in any::<prop::sample::Index>()) {
        let state = GlobalState::new(20, 0.3, 1.0, 0.5).unwrap();
        let mut bytes = state.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= byte;
        let _ = GlobalState::from_bytes(&bytes);
        let full = state.to_bytes();
        prop_assert!(GlobalState::from_bytes(&full[..cut.index(full.len())]).is_err());
    }
}
