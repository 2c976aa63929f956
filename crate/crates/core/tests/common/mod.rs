#![allow(dead_code)]

use dsm_core::data::{truncate_observations, PredictionCell, Segment};
use dsm_core::detection::{detection_data, fit_detection, DetectionFit, DetectionForm, DetectionSpec};
use dsm_core::groupsize::{SizeBin, CLASS_FACTOR};
use dsm_core::sim::{Bump, DetectionTruth, EffortField, Field, GroupSizeDist, Region, SimScenario, SimSurvey, TransectLayout};
use dsm_core::smooth::SmoothSpec;

pub fn beaufort_spec() -> DetectionSpec {
    DetectionSpec::new(DetectionForm::HazardRate, 1.0).with_factor("beaufort", &["0", "1", "2"])
}

/// Sea state rises eastward, as does one of the two density patches.
pub fn confounded_scenario(seed: u64) -> SimScenario {
    SimScenario {
        seed,
        region: Region { width: 100.0, height: 60.0 },
        density: Field::Bumps {
            base: 0.3,
            bumps: vec![
                Bump { x: 30.0, y: 20.0, sd: 12.0, height: 1.2 },
                Bump { x: 75.0, y: 45.0, sd: 10.0, height: 0.9 },
            ],
        },
        effort: Some(EffortField {
            name: "beaufort".into(),
            field: Field::Linear { intercept: 0.4, x: 0.02, y: 0.0 },
            noise_sd: 0.6,
            thresholds: vec![1.0, 2.0],
        }),
        detection: DetectionTruth {
            spec: beaufort_spec(),
            theta: vec![-0.7, -0.3, -0.6, 1.0],
        },
        group_size: None,
        transects: TransectLayout { spacing: 8.0, segment_length: 2.0 },
        grid_cell: 5.0,
    }
}

/// Half-normal detection with no covariates; always 10 lines of 40 segments.
pub fn constant_p_scenario(seed: u64) -> SimScenario {
    SimScenario {
        seed,
        region: Region { width: 82.0, height: 80.0 },
        density: Field::LogLinear { intercept: -0.6, x: 0.012, y: -0.008 },
        effort: None,
        detection: DetectionTruth {
            spec: DetectionSpec::new(DetectionForm::HalfNormal, 1.0),
            theta: vec![(0.45_f64).ln()],
        },
        group_size: None,
        transects: TransectLayout { spacing: 8.0, segment_length: 2.0 },
        grid_cell: 5.0,
    }
}

pub fn size_bins() -> Vec<SizeBin> {
    vec![SizeBin { lo: 1, hi: 1 }, SizeBin { lo: 2, hi: 3 }, SizeBin { lo: 4, hi: 6 }]
}

/// Larger groups are seen further away.
pub fn group_scenario(seed: u64) -> SimScenario {
    let spec = DetectionSpec::new(DetectionForm::HalfNormal, 1.0).with_factor(CLASS_FACTOR, &["1", "2-3", "4-6"]);
    SimScenario {
        seed,
        region: Region { width: 100.0, height: 60.0 },
        density: Field::Bumps {
            base: 0.25,
            bumps: vec![Bump { x: 40.0, y: 30.0, sd: 15.0, height: 0.8 }],
        },
        effort: None,
        detection: DetectionTruth {
            spec,
            theta: vec![(0.35_f64).ln(), 0.3, 0.6],
        },
        group_size: Some(GroupSizeDist {
            sizes: vec![1, 2, 3, 4, 5, 6],
            probs: vec![0.35, 0.25, 0.15, 0.1, 0.1, 0.05],
            classes: size_bins(),
        }),
        transects: TransectLayout { spacing: 8.0, segment_length: 2.0 },
        grid_cell: 5.0,
    }
}

pub fn tensor_xy(k: usize) -> Vec<SmoothSpec> {
    vec![SmoothSpec::tensor("s(x,y)", "x", "y", k, k)]
}

pub fn fit_survey_detection(survey: &SimSurvey, spec: &DetectionSpec) -> DetectionFit {
    let obs = truncate_observations(&survey.observations, spec.truncation).unwrap().observations;
    let data = detection_data(&obs, &survey.segments).unwrap();
    fit_detection(&data, spec).unwrap()
}

/// Adds a third density covariate, a smooth function of position, to segments and grid.
pub fn add_depth(segments: &mut [Segment], grid: &mut [PredictionCell]) {
    let depth = |x: f64, y: f64| (x / 25.0).sin() * 40.0 + y * 0.8 + 100.0;
    for s in segments.iter_mut() {
        let d = depth(s.density["x"], s.density["y"]);
        s.density.insert("depth".into(), d);
    }
    for c in grid.iter_mut() {
        let d = depth(c.density["x"], c.density["y"]);
        c.density.insert("depth".into(), d);
    }
}
