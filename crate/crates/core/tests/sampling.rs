use mmf_core::episodes::{
    make_meta_test_suite, partition_and_normalize, sample_episode, Normalization, Rating, RatingMatrix,
};
use mmf_core::rng::stream;
use proptest::prelude::*;

fn block(seed: u64, rows: usize, cols: usize, density: f64) -> RatingMatrix {
    use rand::Rng;
    let mut r = stream(seed, 9);
    let mut ratings = Vec::new();
    for u in 0..rows as u64 {
        for i in 0..cols as u64 {
            if r.random_bool(density) {
                ratings.push(Rating::new(u, i, r.random_range(1..=5) as f64));
            }
        }
    }
    let row_ids: Vec<u64> = (0..rows as u64).collect();
    let col_ids: Vec<u64> = (0..cols as u64).collect();
    RatingMatrix::from_ratings(&ratings, &row_ids, &col_ids)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episode_masks_partition_observed_cells(seed in any::<u64>(), n in 1usize..8, m in 1usize..8, ratio in 0.1f64..0.9) {
        let src = block(seed, 12, 14, 0.5);
        let mut r = stream(seed, 1);
        let Ok(ep) = sample_episode(&src, n, m, ratio, &mut r) else { return Ok(()) };
        prop_assert!(ep.n_train() >= 1 && ep.n_test() >= 1);
        for k in 0..n * m {
            prop_assert!(ep.b.data()[k] * ep.b_test.data()[k] == 0.0);
        }
        // Every observed value must exist in the source block.
        let values: Vec<f64> = src.entries().map(|e| e.2).collect();
        for (_, _, v, _) in ep.cells() {
            prop_assert!(values.contains(&v));
        }
        let mut again = stream(seed, 1);
        prop_assert_eq!(sample_episode(&src, n, m, ratio, &mut again).unwrap(), ep);
    }

    #[test]
    fn suite_hides_the_rounded_fraction(seed in any::<u64>(), holdout in 0.1f64..0.9) {
        let src = block(seed, 15, 15, 0.4);
        let suite = make_meta_test_suite(&src, 4, 10, 10, holdout, &mut stream(seed, 2)).unwrap();
        for ep in &suite {
            let total = ep.n_train() + ep.n_test();
            let want = ((holdout * total as f64).round() as usize).clamp(1, total - 1);
            prop_assert_eq!(ep.n_test(), want);
        }
    }

    #[test]
    fn split_blocks_are_disjoint_and_cover_ids(seed in any::<u64>(), users in 10u64..40, items in 10u64..40) {
        let mut ratings = Vec::new();
        for u in 0..users {
            for i in 0..items {
                if (u * 7 + i * 5 + seed % 5) % 3 == 0 {
                    ratings.push(Rating::new(u, i, ((u + i) % 5) as f64 + 1.0));
                }
            }
        }
        let Ok(split) = partition_and_normalize(&ratings, [0.7, 0.1, 0.2], &mut stream(seed, 3)) else { return Ok(()) };
        let mut rows: Vec<u64> = [&split.train, &split.valid, &split.test].iter().flat_map(|b| b.row_ids().to_vec()).collect();
        let mut cols: Vec<u64> = [&split.train, &split.valid, &split.test].iter().flat_map(|b| b.col_ids().to_vec()).collect();
        rows.sort_unstable();
        cols.sort_unstable();
        prop_assert_eq!(rows, (0..users).collect::<Vec<_>>());
        prop_assert_eq!(cols, (0..items).collect::<Vec<_>>());
        let train: Vec<f64> = split.train.entries().map(|e| e.2).collect();
        let mean = train.iter().sum::<f64>() / train.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn normalization_round_trip(mean in -10.0f64..10.0, std in 0.1f64..5.0, v in -100.0f64..100.0) {
        let n = Normalization { mean, std };
        prop_assert!((n.normalize(n.denormalize(v)) - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

#[test]
fn training_fraction_converges() {
    let src = block(3, 40, 40, 0.5);
    let mut r = stream(3, 4);
    let (mut train, mut total) = (0usize, 0usize);
    for _ in 0..10_000 {
        let ep = sample_episode(&src, 5, 5, 0.5, &mut r).unwrap();
        train += ep.n_train();
        total += ep.n_train() + ep.n_test();
    }
    let frac = train as f64 / total as f64;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}
