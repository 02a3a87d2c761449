use proptest::prelude::*;

use attnxl::data::BatchIter;
use attnxl::diffcore::{Tape, Tensor};
use attnxl::eval::{inception_score_from_probs, missing_modes_from_probs};

fn prob_rows(classes: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, classes), 1..24).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn score_is_between_one_and_class_count(rows in prob_rows(5)) {
        let is = inception_score_from_probs(&rows).unwrap().inception_score;
        prop_assert!(is >= 1.0 - 1e-9 && is <= 5.0 + 1e-9, "{is}");
    }

    #[test]
    fn score_ignores_sample_order(rows in prob_rows(4), rot in 0usize..24) {
        let mut shuffled = rows.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let a = inception_score_from_probs(&rows).unwrap().inception_score;
        let b = inception_score_from_probs(&shuffled).unwrap().inception_score;
        prop_assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn adding_samples_never_uncovers_a_mode(rows in prob_rows(6), extra in prob_rows(6), t in 0.0f64..0.9) {
        let before = missing_modes_from_probs(&rows, 6, t).unwrap();
        let mut all = rows.clone();
        all.extend(extra);
        let after = missing_modes_from_probs(&all, 6, t).unwrap();
        prop_assert!(after.missing_count <= before.missing_count);
        for m in &before.covered_modes {
            prop_assert!(after.covered_modes.contains(m));
        }
        prop_assert_eq!(after.per_mode_counts.iter().sum::<usize>(), all.len());
    }

    #[test]
    fn raising_the_threshold_never_covers_more(rows in prob_rows(6), lo in 0.0f64..0.5, gap in 0.0f64..0.49) {
        let a = missing_modes_from_probs(&rows, 6, lo).unwrap();
        let b = missing_modes_from_probs(&rows, 6, lo + gap).unwrap();
        prop_assert!(b.missing_count >= a.missing_count);
    }

    #[test]
    fn every_epoch_is_a_permutation(n in 1usize..60, batch in 1usize..8, seed in any::<u64>()) {
        prop_assume!(batch <= n);
        let mut it = BatchIter::new(n, batch, seed).unwrap();
        let per = it.batches_per_epoch();
        for _ in 0..2 {
            let mut seen: Vec<usize> = (0..per).flat_map(|_| it.next_indices()).collect();
            prop_assert_eq!(seen.len(), per * batch);
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), per * batch);
            prop_assert!(seen.iter().all(|&i| i < n));
        }
    }

    #[test]
    fn l2_distance_is_symmetric_and_zero_on_self(v in prop::collection::vec(-3.0f64..3.0, 12), w in prop::collection::vec(-3.0f64..3.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new([3, 4], v).unwrap());
        let b = tape.constant(Tensor::new([3, 4], w).unwrap());
        let ab = tape.l2_distance(a, b).unwrap();
        let ba = tape.l2_distance(b, a).unwrap();
        let aa = tape.l2_distance(a, a).unwrap();
        prop_assert_eq!(tape.value(ab).item(), tape.value(ba).item());
        prop_assert_eq!(tape.value(aa).item(), 0.0);
        prop_assert!(tape.value(ab).item() >= 0.0);
    }
}
