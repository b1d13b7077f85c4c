use asyncdrop::masking::{DropoutMask, MaskMode};
use asyncdrop::params::{ModelParams, ParamGroup, UnitMap};
use asyncdrop::store::{GlobalStore, UpdateEnvelope};
use proptest::prelude::*;

fn model(values: Vec<f64>) -> (ModelParams, UnitMap) {
    let n = values.len();
    let p = ModelParams::new(vec![ParamGroup::new("w", vec![n, 1], values).unwrap()]);
    let map = UnitMap::rows_of(&p, 0).unwrap();
    (p, map)
}

fn value() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1.0..1.0f64, Just(0.0), Just(-0.0)]
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, f64)> {
    (1usize..24).prop_flat_map(|n| {
        (
            prop::collection::vec(value(), n),
            prop::collection::vec(value(), n),
            prop::collection::vec(any::<bool>(), n),
            prop_oneof![Just(1.0), Just(f64::MIN_POSITIVE), 1e-9..=1.0f64],
        )
    })
}

proptest! {
    #[test]
    fn complement_is_preserved_and_kept_is_convex((w, wi, kept, alpha) in case()) {
        let (p, map) = model(w.clone());
        let mut store = GlobalStore::new(p, map.clone()).unwrap();
        let (local, _) = model(wi.clone());
        let mask = DropoutMask::from_kept(kept.clone(), MaskMode::Bernoulli, 0.5);
        let mut env = UpdateEnvelope::new(0, mask, local, 0, &map).unwrap();
        prop_assert_eq!(store.masked_merge(&mut env, alpha).unwrap(), 1);
        let after = &store.params().groups[0].values;
        for i in 0..w.len() {
            if kept[i] {
                let (lo, hi) = if w[i] <= wi[i] { (w[i], wi[i]) } else { (wi[i], w[i]) };
                prop_assert!(after[i] >= lo && after[i] <= hi, "{} not in [{}, {}]", after[i], lo, hi);
            } else {
                prop_assert_eq!(after[i].to_bits(), w[i].to_bits());
            }
        }
    }

    #[test]
    fn versions_have_no_gaps(n_merges in 1usize..20, seed in any::<u64>()) {
        let (p, map) = model(vec![1.0, 2.0, 3.0]);
        let mut store = GlobalStore::new(p, map.clone()).unwrap();
        let mut versions = vec![store.version()];
        for k in 0..n_merges {
            let base = (seed.rotate_left(k as u32) as usize) % (store.version() as usize + 1);
            let (local, _) = model(vec![k as f64; 3]);
            let mut env = UpdateEnvelope::new(k, DropoutMask::all_kept(3, MaskMode::ExactK), local, base as u64, &map).unwrap();
            versions.push(store.masked_merge(&mut env, 0.5).unwrap());
            prop_assert_eq!(env.staleness, Some(store.version() - 1 - base as u64));
        }
        prop_assert_eq!(versions, (0..=n_merges as u64).collect::<Vec<_>>());
    }

    #[test]
    fn group_average_with_full_masks_is_plain_merge_of_mean(
        rows in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 5), 1..6),
        alpha in 1e-6..=1.0f64,
    ) {
        let (p, map) = model(vec![0.5, -1.0, 2.0, 0.0, 3.0]);
        let mut grouped = GlobalStore::new(p.clone(), map.clone()).unwrap();
        let mut envs: Vec<UpdateEnvelope> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| UpdateEnvelope::new(i, DropoutMask::all_kept(5, MaskMode::ExactK), model(r.clone()).0, 0, &map).unwrap())
            .collect();
        grouped.group_averaged_merge(&mut envs, alpha).unwrap();

        let s = rows.len() as f64;
        let mean: Vec<f64> = (0..5).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / s).collect();
        let mut plain = GlobalStore::new(p, map.clone()).unwrap();
        let mut env = UpdateEnvelope::new(0, DropoutMask::all_kept(5, MaskMode::ExactK), model(mean).0, 0, &map).unwrap();
        plain.plain_merge(&mut env, alpha).unwrap();
        for (a, b) in grouped.params().groups[0].values.iter().zip(&plain.params().groups[0].values) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }
}

#[test]
fn zero_alpha_is_rejected() {
    let (p, map) = model(vec![1.0]);
    let mut store = GlobalStore::new(p, map.clone()).unwrap();
    let mut env = UpdateEnvelope::new(0, DropoutMask::all_kept(1, MaskMode::ExactK), model(vec![2.0]).0, 0, &map).unwrap();
    assert!(store.masked_merge(&mut env, 0.0).unwrap_err().is_config());
    assert_eq!(store.version(), 0);
}
