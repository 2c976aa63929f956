//! Property tests for the cheap invariants: data handling, detectability, penalties,
//! interval arithmetic, group-size combination and the simulator.

mod common;

use std::collections::BTreeMap;

use dsm_core::abundance::{combine_cv, lognormal_interval, percentile};
use dsm_core::data::{assign_counts, truncate_observations, CovariateBinning, Observation, Segment};
use dsm_core::detection::{average_detectability, DetectionForm};
use dsm_core::groupsize::{combine_group_abundance, make_scheme, SizeBin};
use dsm_core::sim::simulate_replicate;
use dsm_core::smooth::{build_basis_1d, build_tensor_2d};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn segments(n: usize) -> Vec<Segment> {
    (0..n)
        .map(|i| Segment {
            segment_id: format!("s{i}"),
            transect_id: "t".into(),
            area: 1.0,
            length: None,
            effort: BTreeMap::new(),
            density: BTreeMap::new(),
            count: 99,
        })
        .collect()
}

fn observations(rows: &[(usize, f64, u32)]) -> Vec<Observation> {
    rows.iter()
        .map(|&(s, d, g)| Observation {
            transect_id: "t".into(),
            segment_id: format!("s{s}"),
            distance: d,
            group_size: g,
            extra: BTreeMap::new(),
        })
        .collect()
}

fn obs_rows() -> impl Strategy<Value = Vec<(usize, f64, u32)>> {
    prop::collection::vec((0usize..12, 0.0f64..3.0, 1u32..8), 0..80)
}

fn psd_ok(s: &DMatrix<f64>, v: &DVector<f64>) -> bool {
    let q = (v.transpose() * s * v)[(0, 0)];
    q >= -1e-10 * s.norm() * v.norm_squared()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_sum_to_retained_observations(rows in obs_rows(), w in 0.2f64..3.0) {
        let mut segs = segments(12);
        let kept = truncate_observations(&observations(&rows), w).unwrap();
        assign_counts(&mut segs, &kept.observations).unwrap();
        let total: u64 = segs.iter().map(|s| s.count).sum();
        prop_assert_eq!(total as usize, kept.observations.len());
        prop_assert_eq!(kept.observations.len() + kept.discarded, rows.len());
    }

    #[test]
    fn truncation_is_idempotent(rows in obs_rows(), w in 0.2f64..3.0) {
        let once = truncate_observations(&observations(&rows), w).unwrap();
        let twice = truncate_observations(&once.observations, w).unwrap();
        prop_assert_eq!(&twice.observations, &once.observations);
        prop_assert_eq!(twice.discarded, 0);
    }

    #[test]
    fn binning_is_total_on_range(
        start in -5.0f64..5.0,
        widths in prop::collection::vec(0.01f64..3.0, 1..6),
        u in 0.0f64..=1.0,
    ) {
        let mut breaks = vec![start];
        for w in &widths {
            breaks.push(breaks.last().unwrap() + w);
        }
        let b = CovariateBinning::new("v", "vb", breaks.clone()).unwrap();
        let lo = breaks[0];
        let hi = *breaks.last().unwrap();
        let value = lo + u * (hi - lo);
        let i = b.interval_of(value).expect("in-range value must bin");
        prop_assert!(value >= breaks[i] && value <= breaks[i + 1]);
        // exactly one interval claims it under the closed-first, open-left convention
        let claims = (0..widths.len())
            .filter(|&k| if k == 0 { value >= breaks[0] && value <= breaks[1] } else { value > breaks[k] && value <= breaks[k + 1] })
            .count();
        prop_assert_eq!(claims, 1);
        prop_assert!(b.interval_of(hi + 1e-9).is_none());
    }

    #[test]
    fn detectability_in_unit_interval_and_monotone(
        sigma in 0.05f64..5.0,
        factor in 1.0f64..3.0,
        shape in 1.0f64..6.0,
        w in 0.1f64..4.0,
    ) {
        for form in [DetectionForm::HalfNormal, DetectionForm::HazardRate] {
            let p1 = average_detectability(form, sigma, shape, w).unwrap();
            let p2 = average_detectability(form, sigma * factor, shape, w).unwrap();
            prop_assert!(p1 > 0.0 && p1 <= 1.0);
            prop_assert!(p2 >= p1 - 1e-12);
        }
    }

    #[test]
    fn penalties_symmetric_psd(
        values in prop::collection::vec(-10.0f64..10.0, 30..60),
        k in 5usize..12,
        seed in any::<u64>(),
    ) {
        let (_, s) = build_basis_1d(&values, k).unwrap();
        let ys: Vec<f64> = values.iter().rev().map(|v| v * 0.5 + 1.0).collect();
        let (_, sx, sy) = build_tensor_2d(&values, &ys, (5, 4)).unwrap();
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        for m in [&s, &sx, &sy] {
            prop_assert!((m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0));
            let v = DVector::from_fn(m.nrows(), |_, _| next());
            prop_assert!(psd_ok(m, &v));
        }
    }

    #[test]
    fn lognormal_interval_brackets_estimate(n in 1.0f64..1e6, cv in 0.0f64..3.0) {
        let (lo, hi) = lognormal_interval(n, cv);
        prop_assert!(lo <= n && n <= hi);
        // multiplicatively symmetric about N̂
        prop_assert!(((lo * hi).sqrt() / n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combined_cv_dominates_components(a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let c = combine_cv(a, b);
        prop_assert!(c >= a.max(b) - 1e-15);
        prop_assert!(c <= a + b + 1e-15);
    }

    #[test]
    fn percentiles_are_ordered(mut xs in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = percentile(&xs, 0.025);
        let hi = percentile(&xs, 0.975);
        prop_assert!(lo <= hi);
        prop_assert!(lo >= xs[0] && hi <= xs[xs.len() - 1]);
    }

    #[test]
    fn group_size_term_nonnegative_and_zero_for_singleton_bins(
        sizes in prop::collection::vec(1u32..7, 3..60),
        n in prop::collection::vec(1.0f64..500.0, 3),
    ) {
        let obs = observations(&sizes.iter().map(|&g| (0, 0.1, g)).collect::<Vec<_>>());
        let wide = [SizeBin { lo: 1, hi: 2 }, SizeBin { lo: 3, hi: 4 }, SizeBin { lo: 5, hi: 6 }];
        let singles: Vec<SizeBin> = (1..=6).map(|g| SizeBin { lo: g, hi: g }).collect();
        let cov3 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 1.0]));
        if let Ok(scheme) = make_scheme(&obs, &wide) {
            let r = combine_group_abundance(&DVector::from_vec(n.clone()), &cov3, &scheme).unwrap();
            prop_assert!(r.size_term >= 0.0);
            prop_assert!(r.model_term >= 0.0);
            prop_assert!((r.variance - r.model_term - r.size_term).abs() <= 1e-9 * r.variance.max(1.0));
        }
        if let Ok(scheme) = make_scheme(&obs, &singles) {
            let m = scheme.m();
            let r = combine_group_abundance(&DVector::from_element(m, 10.0), &DMatrix::identity(m, m), &scheme).unwrap();
            prop_assert_eq!(r.size_term, 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulator_reproducible_per_seed_and_replicate(seed in any::<u64>(), rep in 0u64..1000) {
        let scenario = common::confounded_scenario(seed);
        let a = simulate_replicate(&scenario, rep).unwrap();
        let b = simulate_replicate(&scenario, rep).unwrap();
        prop_assert_eq!(&a.observations, &b.observations);
        prop_assert_eq!(&a.segments, &b.segments);
        let c = simulate_replicate(&scenario, rep + 1).unwrap();
        prop_assert_ne!(&a.observations, &c.observations);
    }
}
