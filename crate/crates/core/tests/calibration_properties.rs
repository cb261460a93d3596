use als_core::calibration::*;
use num_rational::Rational64;
use proptest::prelude::*;

fn exact_pairs() -> impl Strategy<Value = Vec<(Rational64, bool)>> {
    prop::collection::vec((0i64..=1000, any::<bool>()), 1..200)
        .prop_map(|v| v.into_iter().map(|(c, ok)| (Rational64::new(c, 1000), ok)).collect())
}

fn float_pairs() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ece_never_exceeds_mce(pairs in float_pairs(), bins in 1usize..25) {
        let r = calibration_report(&pairs, bins).unwrap();
        prop_assert!(r.ece <= r.mce);
        prop_assert!((0.0..=1.0).contains(&r.ece));
        prop_assert!((0.0..=1.0).contains(&r.mce));
        prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), pairs.len());
        prop_assert_eq!(r.total_count, pairs.len());
    }

    #[test]
    fn exact_ece_never_exceeds_mce(pairs in exact_pairs(), bins in 1usize..25) {
        let r = calibration_report(&pairs, bins).unwrap();
        prop_assert!(r.ece <= r.mce);
        prop_assert!(r.mce <= Rational64::from_integer(1));
    }

    #[test]
    fn duplication_is_invisible(pairs in exact_pairs()) {
        let doubled: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
        let a = calibration_report(&pairs, DEFAULT_BINS).unwrap();
        let b = calibration_report(&doubled, DEFAULT_BINS).unwrap();
        prop_assert_eq!(a.ece, b.ece);
        prop_assert_eq!(a.mce, b.mce);
    }

    #[test]
    fn input_order_is_irrelevant(pairs in exact_pairs(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(
            calibration_report(&pairs, DEFAULT_BINS).unwrap(),
            calibration_report(&shuffled, DEFAULT_BINS).unwrap()
        );
    }

    #[test]
    fn float_order_is_irrelevant(pairs in float_pairs()) {
        let mut reversed = pairs.clone();
        reversed.reverse();
        prop_assert_eq!(
            calibration_report(&pairs, DEFAULT_BINS).unwrap(),
            calibration_report(&reversed, DEFAULT_BINS).unwrap()
        );
    }

    #[test]
    fn csv_round_trip(pairs in float_pairs(), bins in 1usize..20) {
        let r = calibration_report(&pairs, bins).unwrap();
        let mut buf = Vec::new();
        write_reliability_csv(&mut buf, &r).unwrap();
        let back: CalibrationReport<f64> = parse_reliability_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }
}

#[test]
fn every_boundary_lands_in_the_lower_bin() {
    for n in 1..=20i64 {
        for b in 1..=n {
            let edge = Rational64::new(b, n);
            assert_eq!(bin_index(&edge, n as usize), (b - 1) as usize);
        }
        assert_eq!(bin_index(&Rational64::from_integer(0), n as usize), 0);
    }
}
