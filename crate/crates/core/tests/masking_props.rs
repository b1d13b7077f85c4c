use asyncdrop::masking::{
    drop_window, exact_keep_count, hetero_mask, ordered_mask, random_mask, score_ranking, MaskMode,
};
use proptest::prelude::*;

fn rate() -> impl Strategy<Value = f64> {
    prop_oneof![1e-3..1.0f64, Just(1.0), Just(0.5)]
}

proptest! {
    #[test]
    fn same_seed_same_mask(n in 0usize..200, keep in rate(), seed in any::<u64>(), exact in any::<bool>()) {
        let mode = if exact { MaskMode::ExactK } else { MaskMode::Bernoulli };
        let a = random_mask(n, keep, mode, seed).unwrap();
        let b = random_mask(n, keep, mode, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        if exact {
            prop_assert_eq!(a.num_kept(), exact_keep_count(n, keep));
        }
    }

    #[test]
    fn complement_partitions_units(n in 0usize..200, keep in rate(), seed in any::<u64>()) {
        let m = random_mask(n, keep, MaskMode::Bernoulli, seed).unwrap();
        let c = m.complement();
        prop_assert_eq!(m.num_kept() + c.num_kept(), n);
        for i in 0..n {
            prop_assert!(m.kept[i] ^ c.kept[i]);
        }
        prop_assert_eq!(&c.complement().kept, &m.kept);
        prop_assert_eq!(m.dropped().count(), c.num_kept());
    }

    #[test]
    fn windows_span_the_ranking(groups in 1usize..300, levels in 2usize..8, keep in 1e-3..1.0f64) {
        let drop = (((1.0 - keep) * groups as f64).round() as usize).min(groups);
        let (first, _) = drop_window(groups, drop, 1, levels);
        let (last, len) = drop_window(groups, drop, levels, levels);
        prop_assert_eq!(first, 0);
        prop_assert_eq!(last + len, groups);
        let mut prev = 0;
        for level in 1..=levels {
            let (start, len) = drop_window(groups, drop, level, levels);
            prop_assert!(start >= prev && start + len <= groups);
            prev = start;
        }
    }

    #[test]
    fn faster_levels_drop_higher_scores(
        scores in prop::collection::vec(-100.0..100.0f64, 2..120),
        levels in 2usize..6,
        keep in 0.05..0.95f64,
    ) {
        let masks: Vec<_> = (1..=levels).map(|c| hetero_mask(&scores, c, levels, keep).unwrap()).collect();
        let max_dropped = |k: usize| {
            masks[k].dropped().map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max)
        };
        let min_dropped = |k: usize| {
            masks[k].dropped().map(|i| scores[i]).fold(f64::INFINITY, f64::min)
        };
        for k in 1..levels {
            if masks[k].dropped().count() > 0 {
                prop_assert!(max_dropped(k - 1) >= max_dropped(k));
                prop_assert!(min_dropped(k - 1) >= min_dropped(k));
            }
        }
        let expected_drop = (((1.0 - keep) * scores.len() as f64).round() as usize).min(scores.len());
        for m in &masks {
            prop_assert_eq!(m.dropped().count(), expected_drop);
        }
        // the fastest level always drops the top of the ranking
        let ranking = score_ranking(&scores);
        for &g in &ranking[..expected_drop] {
            prop_assert!(!masks[0].kept[g]);
        }
    }

    #[test]
    fn ordered_masks_are_nested(n in 1usize..200, levels in 1usize..8) {
        let masks: Vec<_> = (1..=levels).map(|c| ordered_mask(n, c, levels).unwrap()).collect();
        prop_assert!(masks[0].is_all_kept());
        for w in masks.windows(2) {
            for i in 0..n {
                prop_assert!(!w[1].kept[i] || w[0].kept[i]);
            }
        }
    }
}

#[test]
fn random_modes_reject_bad_rates() {
    for bad in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(random_mask(10, bad, MaskMode::Bernoulli, 1).unwrap_err().is_config());
    }
    assert!(random_mask(10, 0.5, MaskMode::ScoreWindow, 1).is_err());
}
