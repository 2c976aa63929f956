//! Invariants that need fitted models on simulated surveys.

mod common;

use dsm_core::abundance::{predict_abundance, var_delta, PredictionGrid};
use dsm_core::data::{assign_counts, Covariates, PredictionCell};
use dsm_core::detection::{detection_data, fit_detection, DetectionForm, DetectionSpec};
use dsm_core::diagnostics::{factor_levels, obs_vs_expected, shift_report, shift_table};
use dsm_core::family::Family;
use dsm_core::gam::{fit_fixed, optimize_lambda, GamOptions};
use dsm_core::groupsize::{
    class_abundances, class_grid, combined_density, group_input, make_scheme, replicate_segments, tag_observations,
    CLASS_FACTOR,
};
use dsm_core::sim::simulate_survey;
use dsm_core::smooth::SmoothSpec;
use dsm_core::varprop::{fit_both, DsmInput, VarpropOptions};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

fn no_covs() -> Covariates {
    Covariates::new()
}

#[test]
fn v_theta_halves_when_sample_doubles() {
    let spec = DetectionSpec::new(DetectionForm::HalfNormal, 1.0).with_numeric("wind");
    let segments = {
        let sc = common::constant_p_scenario(1);
        simulate_survey(&sc).unwrap().segments
    };
    let trace_at = |n: usize, rep: u64| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + rep);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut obs = Vec::new();
        let mut segs = segments.clone();
        for s in segs.iter_mut() {
            let wind: f64 = rng.random_range(-1.0..1.0);
            s.effort.insert("wind".into(), dsm_core::data::CovValue::Num(wind));
        }
        while obs.len() < n {
            let s = &segs[rng.random_range(0..segs.len())];
            let wind = s.effort["wind"].as_num().unwrap();
            let sigma = (0.45f64.ln() + 0.3 * wind).exp();
            let d: f64 = (normal.sample(&mut rng) * sigma).abs();
            if d <= 1.0 {
                obs.push(dsm_core::data::Observation {
                    transect_id: s.transect_id.clone(),
                    segment_id: s.segment_id.clone(),
                    distance: d,
                    group_size: 1,
                    extra: Default::default(),
                });
            }
        }
        let fit = fit_detection(&detection_data(&obs, &segs).unwrap(), &spec).unwrap();
        fit.v_theta.trace()
    };
    let reps = 50u64;
    let small: f64 = (0..reps).map(|r| trace_at(200, r)).sum::<f64>() / reps as f64;
    let large: f64 = (0..reps).map(|r| trace_at(400, r + 1000)).sum::<f64>() / reps as f64;
    let ratio = large / small;
    assert!((ratio - 0.5).abs() <= 0.125, "trace ratio {ratio}");
}

#[test]
fn confounded_survey_shifts_detection() {
    let sc = common::confounded_scenario(2024);
    let survey = simulate_survey(&sc).unwrap();
    let detection = common::fit_survey_detection(&survey, &common::beaufort_spec());
    let input = DsmInput::from_segments(&survey.segments);
    let (_, vp) = fit_both(&input, &detection, &common::tensor_xy(5), Family::Poisson, &VarpropOptions::default()).unwrap();
    assert!(vp.delta_hat.norm() > 0.0);
    let levels = factor_levels(&vp.detection, "beaufort", &no_covs()).unwrap();
    let report = shift_report(&vp, "beaufort", &levels, 1.0).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().any(|r| (r.p_corrected - r.p).abs() > 1e-6));
    for r in &report.rows {
        assert!(r.p > 0.0 && r.p <= 1.0 && r.p_corrected > 0.0 && r.p_corrected <= 1.0);
        assert_eq!(r.flagged, r.shift_in_sd.abs() > 1.0);
    }
    // a frozen δ reproduces the detection stage exactly
    let zero = shift_table(&vp.detection, &DVector::zeros(vp.delta_hat.len()), "beaufort", &levels, 1.0).unwrap();
    for r in &zero.rows {
        assert_eq!(r.p, r.p_corrected);
        assert!(!r.flagged);
    }
    let table = obs_vs_expected(&vp.gam, &input.detection_rows, "beaufort").unwrap();
    let obs: f64 = table.rows.iter().map(|r| r.observed).sum();
    let exp: f64 = table.rows.iter().map(|r| r.expected).sum();
    assert_eq!(obs, vp.gam.y.sum());
    assert!((exp - vp.gam.mu.sum()).abs() <= 1e-9 * exp);
    assert_eq!(table.rows.iter().map(|r| r.segments).sum::<usize>(), input.n());
}

#[test]
fn pure_noise_counts_give_a_flat_surface() {
    let sc = common::constant_p_scenario(31);
    let mut segments = simulate_survey(&sc).unwrap().segments;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let pois = Poisson::new(0.8).unwrap();
    for s in segments.iter_mut() {
        s.count = pois.sample(&mut rng) as u64;
    }
    let input = DsmInput::from_segments(&segments);
    let design = input.design(&common::tensor_xy(6)).unwrap();
    let fit = optimize_lambda(&design, &input.y, &DVector::zeros(input.n()), Family::Poisson, &GamOptions::default()).unwrap();
    let edf = fit.edf_of("s(x,y)").unwrap();
    // the tensor's unpenalized bilinear part has 3 columns after centring
    assert!(edf < 5.0, "edf {edf}");
}

#[test]
fn abundance_is_additive_over_cells() {
    let sc = common::constant_p_scenario(42);
    let survey = simulate_survey(&sc).unwrap();
    let detection = common::fit_survey_detection(&survey, &sc.detection.spec);
    let input = DsmInput::from_segments(&survey.segments);
    let (naive, _) = fit_both(&input, &detection, &common::tensor_xy(5), Family::Poisson, &VarpropOptions::default()).unwrap();
    let total = |cells: &[PredictionCell]| predict_abundance(&naive, &PredictionGrid::from_cells(&naive, cells).unwrap()).unwrap().n_hat;
    let whole = total(&survey.grid);
    let (a, b): (Vec<_>, Vec<_>) = survey.grid.iter().cloned().partition(|c| c.density["x"] < 40.0);
    assert!(((total(&a) + total(&b)) / whole - 1.0).abs() < 1e-12);
    let quarters: Vec<PredictionCell> = survey
        .grid
        .iter()
        .flat_map(|c| {
            (0..4).map(move |k| PredictionCell {
                cell_id: format!("{}-{k}", c.cell_id),
                area: c.area / 4.0,
                density: c.density.clone(),
            })
        })
        .collect();
    assert!((total(&quarters) / whole - 1.0).abs() < 1e-12);
}

#[test]
fn zeroed_delta_block_matches_naive_variance_when_prior_vanishes() {
    let sc = common::constant_p_scenario(77);
    let survey = simulate_survey(&sc).unwrap();
    let mut detection = common::fit_survey_detection(&survey, &sc.detection.spec);
    detection.v_theta *= 1e-12;
    let input = DsmInput::from_segments(&survey.segments);
    let (naive, vp) = fit_both(&input, &detection, &common::tensor_xy(5), Family::Poisson, &VarpropOptions::default()).unwrap();
    let mut padded = vp.gam.clone();
    let p = vp.n_beta();
    let q = vp.delta_hat.len();
    padded.v_beta.view_mut((p, 0), (q, p + q)).fill(0.0);
    padded.v_beta.view_mut((0, p), (p + q, q)).fill(0.0);
    let vn = var_delta(&naive, &PredictionGrid::from_cells(&naive, &survey.grid).unwrap()).unwrap();
    let vz = var_delta(&padded, &PredictionGrid::from_cells(&padded, &survey.grid).unwrap()).unwrap();
    assert!((vn.n_hat / vz.n_hat - 1.0).abs() < 1e-8);
    assert!((vn.variance / vz.variance - 1.0).abs() < 1e-8, "{} vs {}", vn.variance, vz.variance);
}

#[test]
fn class_maps_sum_to_combined_map_and_merge_when_deviations_vanish() {
    let sc = common::group_scenario(99);
    let survey = simulate_survey(&sc).unwrap();
    let scheme = make_scheme(&survey.observations, &common::size_bins()).unwrap();
    let obs = tag_observations(&survey.observations, &scheme).unwrap();
    let detection = fit_detection(&detection_data(&obs, &survey.segments).unwrap(), &sc.detection.spec).unwrap();

    let replicated = replicate_segments(&survey.segments, &obs, &scheme).unwrap();
    let input = group_input(&replicated, &scheme).unwrap();
    let smooths = vec![SmoothSpec::factor_smooth("s(x,y)", &["x", "y"], &[5, 5], CLASS_FACTOR)];
    let design = input.design(&smooths).unwrap();
    let offset = input.offset(&detection).unwrap();
    let free = optimize_lambda(&design, &input.y, &offset, Family::Poisson, &GamOptions::default()).unwrap();

    let maps = combined_density(&free, &survey.grid, &scheme).unwrap();
    let (classes, combined) = maps.split_at(scheme.m());
    for (j, total) in combined[0].iter().enumerate() {
        let sum: f64 = classes.iter().zip(&scheme.g_bar).map(|(m, g)| g * m[j]).sum();
        assert_eq!(sum, *total);
    }
    for (c, map) in classes.iter().enumerate() {
        let grid = class_grid(&free, &survey.grid, &scheme, c).unwrap();
        let direct = predict_abundance(&free, &grid).unwrap();
        for (cell, d) in direct.cells.iter().zip(map) {
            assert!((cell.density / d - 1.0).abs() < 1e-12);
        }
    }

    // deviations penalized away: one shared surface scaled per class
    let mut lambda = free.lambda.clone();
    let dev = free.penalty_names.iter().position(|n| n.contains("dev")).expect("deviation penalty");
    lambda[dev] = 1e10;
    let shared = fit_fixed(&design, &input.y, &offset, Family::Poisson, &lambda, None).unwrap();
    let (n_m, _) = class_abundances(&shared, &survey.grid, &scheme).unwrap();

    let plain_detection = common::fit_survey_detection(&survey, &DetectionSpec::new(DetectionForm::HalfNormal, 1.0));
    let mut segs = survey.segments.clone();
    assign_counts(&mut segs, &survey.observations).unwrap();
    let merged_input = DsmInput::from_segments(&segs);
    let merged = optimize_lambda(
        &merged_input.design(&common::tensor_xy(5)).unwrap(),
        &merged_input.y,
        &merged_input.offset(&plain_detection).unwrap(),
        Family::Poisson,
        &GamOptions::default(),
    )
    .unwrap();
    let merged_n = predict_abundance(&merged, &PredictionGrid::from_cells(&merged, &survey.grid).unwrap()).unwrap().n_hat;
    let rel = (n_m.sum() / merged_n - 1.0).abs();
    assert!(rel <= 0.02, "Σ N_m {} vs merged {merged_n} (rel {rel:.4})", n_m.sum());
}
