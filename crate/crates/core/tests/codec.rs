use deltamask::codec::*;
use deltamask::filters::{FilterConfig, HashSeed};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_delta(d: usize, n: usize, seed: u64) -> DeltaSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<u32> = sample(&mut rng, d, n)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    DeltaSet::from_indices(&idx).unwrap()
}

fn mask(bits: &[u8]) -> BinaryMask {
    BinaryMask::from_bools(&bits.iter().map(|&b| b == 1).collect::<Vec<_>>())
}

#[test]
fn degenerate_probabilities_sample_deterministically() {
    assert_eq!(
        sample_mask(&vec![0.0; 1000], HashSeed(1), 0),
        BinaryMask::zeros(1000)
    );
    assert_eq!(
        sample_mask(&vec![1.0; 1000], HashSeed(1), 0),
        BinaryMask::ones(1000)
    );
    // Saturated scores behave the same through the probability view.
    let theta = ProbabilityMask::from_scores(vec![-1e9; 1000]).probabilities();
    assert_eq!(sample_mask(&theta, HashSeed(1), 0).count_ones(), 0);
}

#[test]
fn half_probability_popcount() {
    let m = sample_mask(&vec![0.5; 100_000], HashSeed(9), 3);
    let frac = m.count_ones() as f64 / 1e5;
    assert!((0.494..=0.506).contains(&frac), "{frac}");
}

#[test]
fn sample_mask_is_unbiased_over_seeds() {
    let grid = [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99];
    let seeds = 10_000u64;
    let mut counts = [0u32; 7];
    for s in 0..seeds {
        let m = sample_mask(&grid, HashSeed(s), 0);
        for (i, c) in counts.iter_mut().enumerate() {
            *c += m.get(i) as u32;
        }
    }
    for (p, c) in grid.iter().zip(counts) {
        let mean = c as f64 / seeds as f64;
        let sigma = (p * (1.0 - p) / seeds as f64).sqrt();
        assert!((mean - p).abs() <= 5.0 * sigma, "θ = {p}: mean {mean}");
    }
}

#[test]
fn parties_sample_identical_server_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
    let a = sample_mask(&theta, HashSeed(77), 12);
    let b = sample_mask(&theta.clone(), HashSeed(77), 12);
    assert_eq!(a, b);
    assert_ne!(a, sample_mask(&theta, HashSeed(77), 13));
}

#[test]
fn delta_examples() {
    assert!(delta_indices(&mask(&[0, 1, 1]), &mask(&[0, 1, 1]))
        .unwrap()
        .is_empty());
    assert_eq!(
        delta_indices(&mask(&[0, 1, 0, 1]), &mask(&[1, 1, 0, 0])).unwrap(),
        vec![0, 3]
    );
    let ones = BinaryMask::ones(130);
    assert_eq!(
        delta_indices(&BinaryMask::zeros(130), &ones).unwrap(),
        (0..130).collect::<Vec<u32>>()
    );
    assert!(matches!(
        delta_indices(&mask(&[1]), &mask(&[1, 0])),
        Err(CodecError::LengthMismatch { .. })
    ));
}

#[test]
fn kl_examples() {
    assert_eq!(kl_bernoulli(0.3, 0.3), 0.0);
    let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((kl_bernoulli(0.5, 0.25) - expected).abs() < 1e-12);
    assert!((kl_bernoulli(0.5, 0.25) - 0.14384).abs() < 1e-5);
    assert!((kl_bernoulli(0.9, 0.1) - 1.7578).abs() < 1e-4);
    assert!((kl_bernoulli(0.1, 0.9) - 1.7578).abs() < 1e-4);
    assert!((kl_bernoulli(0.9, 0.5) - kl_bernoulli(0.5, 0.9)).abs() > 0.1);
    assert!(kl_bernoulli(0.0, 1.0).is_finite());
}

#[test]
fn topk_ten_elements() {
    let theta_s = vec![0.5; 10];
    let theta_c: Vec<f64> = (0..10)
        .map(|i| [0.9, 0.625, 0.1, 0.7, 0.375, 0.99, 0.3, 0.52, 0.8, 0.2][i])
        .collect();
    let delta: Vec<u32> = (0..10).collect();
    let kept = rank_topk(&delta, &theta_c, &theta_s, 0.8).unwrap();
    assert_eq!(kept.len(), 8);
    // The smallest divergence from 0.5 is at index 7; indices 1 and 4 tie
    // exactly (0.625 vs 0.375) and the lower index stays.
    assert_eq!(kept.indices(), &[0, 1, 2, 3, 5, 6, 8, 9]);
    assert_eq!(
        rank_topk(&delta, &theta_c, &theta_s, 1.0).unwrap().len(),
        10
    );
    assert!(rank_topk(&[], &theta_c, &theta_s, 0.5).unwrap().is_empty());
    assert!(matches!(
        rank_topk(&delta, &theta_c, &theta_s, 0.0),
        Err(CodecError::InvalidKappa(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    /// Retained positions dominate dropped ones in (KL desc, index asc)
    /// order, and exactly ceil(κ n) are kept.
    #[test]
    fn topk_matches_pairwise_oracle(
        probs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, any::<bool>()), 1..=40),
        quantize in any::<bool>(),
        kappa in 0.01f64..=1.0,
    ) {
        // Quantized probabilities force plenty of exact ties.
        let q = |p: f64| if quantize { (p * 4.0).round() / 4.0 } else { p };
        let theta_c: Vec<f64> = probs.iter().map(|p| q(p.0)).collect();
        let theta_s: Vec<f64> = probs.iter().map(|p| q(p.1)).collect();
        let delta: Vec<u32> = probs.iter().enumerate().filter(|(_, p)| p.2).map(|(i, _)| i as u32).take(20).collect();
        let kept = rank_topk(&delta, &theta_c, &theta_s, kappa).unwrap();
        let expected = ((kappa * delta.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        prop_assert_eq!(kept.len(), expected.min(delta.len()));
        let kl = |i: u32| kl_bernoulli(theta_c[i as usize], theta_s[i as usize]);
        for &r in kept.indices() {
            prop_assert!(delta.contains(&r));
            for &x in delta.iter().filter(|x| !kept.indices().contains(x)) {
                prop_assert!(kl(r) > kl(x) || (kl(r) == kl(x) && r < x), "kept {} dropped {}", r, x);
            }
        }
        prop_assert!(kept.indices().windows(2).all(|w| w[0] < w[1]));
        for (&i, &w) in kept.indices().iter().zip(kept.kl_weights()) {
            prop_assert_eq!(w, kl(i));
        }
    }

    #[test]
    fn roundtrip_has_no_false_negatives(
        d in 1usize..5000,
        frac in 0.0f64..0.5,
        bpe in prop::sample::select(vec![8u8, 16, 32]),
        seed in any::<u64>(),
    ) {
        let n = ((d as f64) * frac) as usize;
        let delta = random_delta(d, n, seed);
        let update = encode_update(&delta, d as u64, 1, FilterConfig::binary_fuse(4, bpe), HashSeed(seed)).unwrap();
        let back = EncodedUpdate::from_bytes(&update.to_bytes()).unwrap();
        prop_assert_eq!(&back, &update);
        let decoded = decode_update(&back).unwrap();
        for i in delta.indices() {
            prop_assert!(decoded.binary_search(i).is_ok());
        }
    }

    #[test]
    fn tampered_updates_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<prop::sample::Index>()) {
        let update = encode_update(&random_delta(2000, 100, 3), 2000, 4, FilterConfig::default(), HashSeed(3)).unwrap();
        let mut bytes = update.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= byte | 1;
        // A receiver checks d against its own model before sweeping.
        if let Ok(u) = EncodedUpdate::from_bytes(&bytes).map(|u| EncodedUpdate { d: u.d.min(4000), ..u }) {
            let _ = decode_update(&u);
        }
        let truncated = &update.to_bytes()[..cut.index(update.encoded_len())];
        prop_assert!(EncodedUpdate::from_bytes(truncated).is_err());
    }

    #[test]
    fn reconstruct_is_an_involution(bits in prop::collection::vec(any::<bool>(), 1..300), flips in prop::collection::btree_set(0u32..300, 0..50)) {
        let m = BinaryMask::from_bools(&bits);
        let flips: Vec<u32> = flips.into_iter().filter(|&i| (i as usize) < bits.len()).collect();
        let once = reconstruct_mask(&m, &flips).unwrap();
        prop_assert_eq!(delta_indices(&m, &once).unwrap(), flips.clone());
        prop_assert_eq!(reconstruct_mask(&once, &flips).unwrap(), m);
    }
}

#[test]
fn reconstruct_examples() {
    let m = mask(&[0, 1, 0, 1]);
    assert_eq!(reconstruct_mask(&m, &[]).unwrap(), m);
    assert_eq!(reconstruct_mask(&m, &[0, 3]).unwrap(), mask(&[1, 1, 0, 0]));
    assert!(matches!(
        reconstruct_mask(&m, &[4]),
        Err(CodecError::IndexOutOfRange { index: 4, d: 4 })
    ));
}

#[test]
fn small_exact_decode() {
    let delta = DeltaSet::from_indices(&[0, 3]).unwrap();
    let update =
        encode_update(&delta, 4, 1, FilterConfig::binary_fuse(4, 32), HashSeed(1)).unwrap();
    assert_eq!(decode_update(&update).unwrap(), vec![0, 3]);
}

#[test]
fn empty_delta_is_minimal() {
    let update = encode_update(
        &DeltaSet::default(),
        100_000,
        1,
        FilterConfig::default(),
        HashSeed(2),
    )
    .unwrap();
    assert!(update.encoded_len() < 100, "{}", update.encoded_len());
    // Only chance matches survive: expect about 100000 / 256.
    assert!(decode_update(&update).unwrap().len() < 600);
}

#[test]
fn header_d_zero_is_rejected() {
    let mut update = encode_update(
        &DeltaSet::from_indices(&[1]).unwrap(),
        4,
        1,
        FilterConfig::default(),
        HashSeed(2),
    )
    .unwrap();
    update.d = 0;
    assert!(matches!(
        decode_update(&update),
        Err(CodecError::MalformedHeader(_))
    ));
    assert!(matches!(
        encode_update(
            &DeltaSet::from_indices(&[7]).unwrap(),
            4,
            1,
            FilterConfig::default(),
            HashSeed(2)
        ),
        Err(CodecError::IndexOutOfRange { .. })
    ));
}

#[test]
fn million_parameter_instance() {
    let d = 1_000_000u64;
    let delta = random_delta(d as usize, 10_000, 42);
    let update = encode_update(&delta, d, 7, FilterConfig::default(), HashSeed(42)).unwrap();
    let bpp = bits_per_parameter(update.encoded_len(), d);
    assert!(bpp <= 0.1, "bpp {bpp}");
    let decoded = decode_update(&update).unwrap();
    let spurious = decoded.len() - delta.len();
    assert!((3000..=4800).contains(&spurious), "spurious {spurious}");
}

#[test]
fn bitrate_is_monotone_in_entry_width() {
    let delta = random_delta(200_000, 5000, 8);
    let sizes: Vec<usize> = [8u8, 16, 32]
        .iter()
        .map(|&b| {
            encode_update(
                &delta,
                200_000,
                1,
                FilterConfig::binary_fuse(4, b),
                HashSeed(8),
            )
            .unwrap()
            .encoded_len()
        })
        .collect();
    assert!(sizes[0] <= sizes[1] && sizes[1] <= sizes[2], "{sizes:?}");
}

#[test]
fn bpp_arithmetic() {
    assert!((bits_per_parameter(1250, 100_000) - 0.1).abs() < 1e-12);
    let dense = DenseUpdate {
        round: 1,
        mask: BinaryMask::ones(80_000),
    };
    let bpp = bits_per_parameter(dense.to_bytes().len(), 80_000);
    assert_eq!(bpp, 1.0 + 8.0 * DENSE_HEADER_LEN as f64 / 80_000.0);
    assert_eq!(DenseUpdate::from_bytes(&dense.to_bytes()).unwrap(), dense);
}

#[test]
fn png_view_is_lossless() {
    let update = encode_update(
        &random_delta(50_000, 8000, 1),
        50_000,
        1,
        FilterConfig::default(),
        HashSeed(1),
    )
    .unwrap();
    let fingerprints = update.fingerprint_bytes().unwrap();
    let png = export_png(&fingerprints).unwrap();
    assert_eq!(import_png(&png).unwrap(), fingerprints);
    assert_eq!(image_dimensions(10_000), (100, 100));
}
