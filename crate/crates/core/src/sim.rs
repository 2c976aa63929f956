//! Synthetic line-transect surveys with known truth, and coverage studies built on them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abundance::{lognormal_interval, var_delta, var_independence, PredictionGrid};
use crate::data::{assign_counts, truncate_observations, CovValue, Covariates, Observation, PredictionCell, Segment};
use crate::detection::{detection_data, eval_pi, fit_detection, DetectionSpec};
use crate::error::{DsmError, Result};
use crate::family::Family;
use crate::groupsize::{SizeBin, CLASS_FACTOR};
use crate::smooth::SmoothSpec;
use crate::varprop::{fit_both, DsmInput, VarpropOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub sd: f64,
    pub height: f64,
}

/// A scalar field over the region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Field {
    Constant { value: f64 },
    Linear { intercept: f64, x: f64, y: f64 },
    LogLinear { intercept: f64, x: f64, y: f64 },
    Bumps { base: f64, bumps: Vec<Bump> },
}

impl Field {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Field::Constant { value } => *value,
            Field::Linear { intercept, x: bx, y: by } => intercept + bx * x + by * y,
            Field::LogLinear { intercept, x: bx, y: by } => (intercept + bx * x + by * y).exp(),
            Field::Bumps { base, bumps } => {
                base + bumps
                    .iter()
                    .map(|b| b.height * (-((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.sd * b.sd)).exp())
                    .sum::<f64>()
            }
        }
    }

    /// Upper bound over the rectangle [0, w] × [0, h].
    pub fn upper_bound(&self, w: f64, h: f64) -> f64 {
        match self {
            Field::Constant { value } => *value,
            Field::Linear { .. } | Field::LogLinear { .. } => [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
                .iter()
                .map(|&(x, y)| self.eval(x, y))
                .fold(f64::NEG_INFINITY, f64::max),
            Field::Bumps { base, bumps } => base + bumps.iter().map(|b| b.height.max(0.0)).sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub width: f64,
    pub height: f64,
}

/// Detectability covariate known along the transects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortField {
    pub name: String,
    pub field: Field,
    /// Per-segment Gaussian noise added before discretization.
    #[serde(default)]
    pub noise_sd: f64,
    /// Cut points turning the field into levels 0, 1, …; empty keeps it numeric.
    #[serde(default)]
    pub thresholds: Vec<f64>,
}

impl EffortField {
    fn value(&self, v: f64) -> CovValue {
        if self.thresholds.is_empty() {
            CovValue::Num(v)
        } else {
            let level = self.thresholds.iter().filter(|&&t| v > t).count();
            CovValue::Level(level.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSizeDist {
    pub sizes: Vec<u32>,
    pub probs: Vec<f64>,
    /// Classes attached to detections when the detection model uses them.
    #[serde(default)]
    pub classes: Vec<SizeBin>,
}

impl GroupSizeDist {
    pub fn mean(&self) -> f64 {
        let total: f64 = self.probs.iter().sum();
        self.sizes.iter().zip(&self.probs).map(|(&s, &p)| s as f64 * p).sum::<f64>() / total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransectLayout {
    pub spacing: f64,
    pub segment_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionTruth {
    pub spec: DetectionSpec,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub seed: u64,
    pub region: Region,
    /// Group intensity per unit area.
    pub density: Field,
    #[serde(default)]
    pub effort: Option<EffortField>,
    pub detection: DetectionTruth,
    #[serde(default)]
    pub group_size: Option<GroupSizeDist>,
    pub transects: TransectLayout,
    /// Side of the square prediction cells.
    pub grid_cell: f64,
}

impl SimScenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SimScenario = toml::from_str(text).map_err(|e| DsmError::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.detection.spec.truncation;
        if !(self.region.width > 0.0 && self.region.height > 0.0) {
            return Err(DsmError::invalid("region must have positive width and height"));
        }
        if !(self.transects.spacing > 2.0 * w) {
            return Err(DsmError::invalid("transect spacing must exceed twice the truncation distance"));
        }
        if self.region.width < 2.0 * w + self.transects.spacing * 0.0 || self.region.width <= 2.0 * w {
            return Err(DsmError::invalid("region is narrower than one covered strip"));
        }
        if !(self.transects.segment_length > 0.0 && self.grid_cell > 0.0) {
            return Err(DsmError::invalid("segment length and grid cell must be positive"));
        }
        if self.detection.theta.len() != self.detection.spec.n_params() {
            return Err(DsmError::invalid(format!(
                "detection truth has {} parameters, the spec needs {}",
                self.detection.theta.len(),
                self.detection.spec.n_params()
            )));
        }
        if let Some(g) = &self.group_size {
            if g.sizes.len() != g.probs.len() || g.sizes.is_empty() || g.probs.iter().any(|&p| p < 0.0) || g.sizes.contains(&0) {
                return Err(DsmError::invalid("group-size distribution needs matching positive sizes and probabilities"));
            }
        }
        Ok(())
    }

    pub fn mean_group_size(&self) -> f64 {
        self.group_size.as_ref().map_or(1.0, GroupSizeDist::mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    /// ∫ intensity over the region.
    pub expected_groups: f64,
    pub expected_individuals: f64,
    pub realized_groups: usize,
    pub realized_individuals: u64,
    /// Expected groups per prediction cell.
    pub cell_groups: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimSurvey {
    pub observations: Vec<Observation>,
    pub segments: Vec<Segment>,
    pub grid: Vec<PredictionCell>,
    pub truth: SimTruth,
}

fn cells(scenario: &SimScenario) -> (Vec<PredictionCell>, Vec<f64>) {
    let c = scenario.grid_cell;
    let (w, h) = (scenario.region.width, scenario.region.height);
    let nx = (w / c).ceil() as usize;
    let ny = (h / c).ceil() as usize;
    let mut out = Vec::with_capacity(nx * ny);
    let mut truth = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let (x0, y0) = (i as f64 * c, j as f64 * c);
            let (x1, y1) = ((x0 + c).min(w), (y0 + c).min(h));
            let area = (x1 - x0) * (y1 - y0);
            // 6 × 6 midpoint rule for the expected count
            let k = 6;
            let mut integral = 0.0;
            for a in 0..k {
                for b in 0..k {
                    let x = x0 + (a as f64 + 0.5) * (x1 - x0) / k as f64;
                    let y = y0 + (b as f64 + 0.5) * (y1 - y0) / k as f64;
                    integral += scenario.density.eval(x, y);
                }
            }
            truth.push(integral * area / (k * k) as f64);
            let mut density = BTreeMap::new();
            density.insert("x".to_string(), 0.5 * (x0 + x1));
            density.insert("y".to_string(), 0.5 * (y0 + y1));
            out.push(PredictionCell {
                cell_id: format!("C{i:03}-{j:03}"),
                area,
                density,
            });
        }
    }
    (out, truth)
}

/// Simulates the survey on stream `replicate` of the scenario seed.
pub fn simulate_replicate(scenario: &SimScenario, replicate: u64) -> Result<SimSurvey> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(replicate);
    let (wid, hgt) = (scenario.region.width, scenario.region.height);
    let w = scenario.detection.spec.truncation;
    let layout = &scenario.transects;

    let start = rng.random::<f64>() * layout.spacing;
    let mut lines = Vec::new();
    let mut x = w + start;
    while x <= wid - w {
        lines.push(x);
        x += layout.spacing;
    }
    if lines.is_empty() {
        lines.push(0.5 * wid);
    }
    let n_seg = (hgt / layout.segment_length).ceil() as usize;
    let mut segments = Vec::with_capacity(lines.len() * n_seg);
    let noise = scenario.effort.as_ref().map(|e| Normal::new(0.0, e.noise_sd.max(0.0)).expect("finite sd"));
    for (k, &lx) in lines.iter().enumerate() {
        for j in 0..n_seg {
            let y0 = j as f64 * layout.segment_length;
            let y1 = (y0 + layout.segment_length).min(hgt);
            let len = y1 - y0;
            let mid = 0.5 * (y0 + y1);
            let mut effort = Covariates::new();
            if let (Some(e), Some(n)) = (&scenario.effort, &noise) {
                let v = e.field.eval(lx, mid) + if e.noise_sd > 0.0 { n.sample(&mut rng) } else { 0.0 };
                effort.insert(e.name.clone(), e.value(v));
            }
            let mut density = BTreeMap::new();
            density.insert("x".to_string(), lx);
            density.insert("y".to_string(), mid);
            segments.push(Segment {
                segment_id: format!("T{k:02}-{j:03}"),
                transect_id: format!("T{k:02}"),
                area: 2.0 * w * len,
                length: Some(len),
                effort,
                density,
                count: 0,
            });
        }
    }

    let bound = scenario.density.upper_bound(wid, hgt);
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(DsmError::invalid("density bound must be finite and non-negative"));
    }
    let total = if bound > 0.0 {
        Poisson::new(bound * wid * hgt)
            .map_err(|e| DsmError::invalid(format!("density bound: {e}")))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let sizes = scenario.group_size.clone();
    let labels: Vec<String> = sizes.as_ref().map(|g| g.classes.iter().map(SizeBin::label).collect()).unwrap_or_default();
    let mut observations = Vec::new();
    let mut realized_groups = 0;
    let mut realized_individuals = 0u64;
    for _ in 0..total {
        let (px, py) = (rng.random::<f64>() * wid, rng.random::<f64>() * hgt);
        let lam = scenario.density.eval(px, py);
        if lam < 0.0 || lam > bound * (1.0 + 1e-12) {
            return Err(DsmError::numerical(format!(
                "density {lam} at ({px:.3}, {py:.3}) violates the thinning bound {bound}"
            )));
        }
        let keep_u = rng.random::<f64>();
        let size = match &sizes {
            Some(g) => {
                let t: f64 = g.probs.iter().sum();
                let mut u = rng.random::<f64>() * t;
                let mut s = g.sizes[g.sizes.len() - 1];
                for (&sz, &p) in g.sizes.iter().zip(&g.probs) {
                    if u < p {
                        s = sz;
                        break;
                    }
                    u -= p;
                }
                s
            }
            None => 1,
        };
        let detect_u = rng.random::<f64>();
        if keep_u * bound >= lam {
            continue;
        }
        realized_groups += 1;
        realized_individuals += size as u64;
        let (k, d) = lines
            .iter()
            .enumerate()
            .map(|(k, &lx)| (k, (px - lx).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one line");
        if d > w {
            continue;
        }
        let j = ((py / layout.segment_length) as usize).min(n_seg - 1);
        let seg = &segments[k * n_seg + j];
        let mut covs = seg.effort.clone();
        covs.insert("size".into(), CovValue::Num(size as f64));
        let mut extra = BTreeMap::new();
        if let Some(g) = &sizes {
            if let Some(m) = g.classes.iter().position(|b| b.contains(size)) {
                covs.insert(CLASS_FACTOR.into(), CovValue::Level(labels[m].clone()));
                extra.insert(CLASS_FACTOR.to_string(), labels[m].clone());
            }
        }
        let p = eval_pi(d, &scenario.detection.theta, &covs, &scenario.detection.spec)?;
        if detect_u < p {
            observations.push(Observation {
                transect_id: seg.transect_id.clone(),
                segment_id: seg.segment_id.clone(),
                distance: d,
                group_size: size,
                extra: BTreeMap::new(),
            });
            let _ = extra;
        }
    }
    assign_counts(&mut segments, &observations)?;
    let (grid, cell_groups) = cells(scenario);
    let expected_groups: f64 = cell_groups.iter().sum();
    Ok(SimSurvey {
        observations,
        segments,
        grid,
        truth: SimTruth {
            expected_groups,
            expected_individuals: expected_groups * scenario.mean_group_size(),
            realized_groups,
            realized_individuals,
            cell_groups,
        },
    })
}

pub fn simulate_survey(scenario: &SimScenario) -> Result<SimSurvey> {
    simulate_replicate(scenario, 0)
}

fn io_err(path: &Path, e: std::io::Error) -> DsmError {
    DsmError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn csv_field(v: f64) -> String {
    format!("{v:.10e}")
}

/// Writes observations.csv, segments.csv and grid.csv; `header` lines are written as `#` comments.
pub fn write_survey(dir: &Path, survey: &SimSurvey, effort_name: Option<&str>, header: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, lines: Vec<String>| -> Result<()> {
        let path = dir.join(name);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| io_err(&path, e))?);
        for h in header {
            writeln!(f, "# {h}").map_err(|e| io_err(&path, e))?;
        }
        for l in lines {
            writeln!(f, "{l}").map_err(|e| io_err(&path, e))?;
        }
        f.flush().map_err(|e| io_err(&path, e))
    };
    let mut obs = vec!["transect_id,segment_id,distance,size".to_string()];
    obs.extend(
        survey
            .observations
            .iter()
            .map(|o| format!("{},{},{},{}", o.transect_id, o.segment_id, csv_field(o.distance), o.group_size)),
    );
    write("observations.csv", obs)?;

    let mut seg = vec![format!(
        "segment_id,transect_id,area,length,x,y{}",
        effort_name.map(|e| format!(",{e}")).unwrap_or_default()
    )];
    for s in &survey.segments {
        let eff = effort_name
            .map(|e| format!(",{}", s.effort.get(e).map(|v| v.to_string()).unwrap_or_else(|| "NA".into())))
            .unwrap_or_default();
        seg.push(format!(
            "{},{},{},{},{},{}{}",
            s.segment_id,
            s.transect_id,
            csv_field(s.area),
            csv_field(s.length.unwrap_or(f64::NAN)),
            csv_field(s.density["x"]),
            csv_field(s.density["y"]),
            eff
        ));
    }
    write("segments.csv", seg)?;

    let mut grid = vec!["cell_id,area,x,y".to_string()];
    grid.extend(survey.grid.iter().map(|c| {
        format!(
            "{},{},{},{}",
            c.cell_id,
            csv_field(c.area),
            csv_field(c.density["x"]),
            csv_field(c.density["y"])
        )
    }));
    write("grid.csv", grid)
}

/// How each replicate is analysed in a coverage study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub detection: DetectionSpec,
    pub smooths: Vec<SmoothSpec>,
    pub family: Family,
    /// Multiplies V_θ before the joint fit; 0 makes the joint fit the naive fit.
    #[serde(default = "one")]
    pub v_theta_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub method: String,
    pub n_hat: f64,
    pub cv: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub n_obs: usize,
    pub truth: f64,
    pub estimates: Vec<MethodEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCoverage {
    pub method: String,
    pub coverage: f64,
    /// Monte Carlo standard error of the coverage.
    pub mc_se: f64,
    pub mean_cv: f64,
    pub mean_n_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub seed: u64,
    pub n_replicates: usize,
    pub n_failed: usize,
    pub failure_rate: f64,
    pub methods: Vec<MethodCoverage>,
    pub replicates: Vec<ReplicateRecord>,
}

pub const COVERAGE_METHODS: [&str; 3] = ["naive", "varprop", "independence"];

/// Fits one survey and returns log-normal 95% intervals for each method.
pub fn analyse_survey(survey: &SimSurvey, cfg: &CoverageConfig, truth: f64) -> Result<Vec<MethodEstimate>> {
    let w = cfg.detection.truncation;
    let obs = truncate_observations(&survey.observations, w)?.observations;
    let mut segments = survey.segments.clone();
    assign_counts(&mut segments, &obs)?;
    let data = detection_data(&obs, &segments)?;
    let mut detection = fit_detection(&data, &cfg.detection)?;
    let input = DsmInput::from_segments(&segments);
    let (naive, vp_gam) = if cfg.v_theta_scale == 0.0 {
        let naive = crate::varprop::naive_fit(&input, &detection, &cfg.smooths, cfg.family, &Default::default())?;
        (naive.clone(), naive)
    } else {
        detection.v_theta *= cfg.v_theta_scale;
        let (naive, vp) = fit_both(&input, &detection, &cfg.smooths, cfg.family, &VarpropOptions::default())?;
        (naive, vp.gam)
    };
    let grid = PredictionGrid::from_cells(&naive, &survey.grid)?;
    let vgrid = PredictionGrid::from_cells(&vp_gam, &survey.grid)?;
    let results = [
        var_delta(&naive, &grid)?,
        var_delta(&vp_gam, &vgrid)?,
        var_independence(&naive, &grid, &detection, &input.detection_rows)?,
    ];
    Ok(COVERAGE_METHODS
        .iter()
        .zip(results.iter())
        .map(|(m, r)| {
            let (lower, upper) = lognormal_interval(r.n_hat, r.cv);
            MethodEstimate {
                method: m.to_string(),
                n_hat: r.n_hat,
                cv: r.cv,
                lower,
                upper,
                covered: lower <= truth && truth <= upper,
            }
        })
        .collect())
}

/// Replicates run in parallel on per-replicate streams; the table does not depend on scheduling.
pub fn coverage_study(scenario: &SimScenario, n_replicates: usize, cfg: &CoverageConfig) -> Result<CoverageTable> {
    if n_replicates < 2 {
        return Err(DsmError::invalid("a coverage study needs at least 2 replicates"));
    }
    scenario.validate()?;
    let replicates: Vec<ReplicateRecord> = (0..n_replicates as u64)
        .into_par_iter()
        .map(|r| {
            let outcome = simulate_replicate(scenario, r + 1).and_then(|s| {
                let truth = s.truth.expected_groups;
                analyse_survey(&s, cfg, truth).map(|e| (s.observations.len(), truth, e))
            });
            match outcome {
                Ok((n_obs, truth, estimates)) => ReplicateRecord {
                    replicate: r + 1,
                    n_obs,
                    truth,
                    estimates,
                    error: None,
                },
                Err(e) => ReplicateRecord {
                    replicate: r + 1,
                    n_obs: 0,
                    truth: f64::NAN,
                    estimates: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.error.is_none()).collect();
    let n_ok = ok.len() as f64;
    let methods = COVERAGE_METHODS
        .iter()
        .enumerate()
        .map(|(k, m)| {
            if ok.is_empty() {
                return MethodCoverage {
                    method: m.to_string(),
                    coverage: f64::NAN,
                    mc_se: f64::NAN,
                    mean_cv: f64::NAN,
                    mean_n_hat: f64::NAN,
                };
            }
            let cov = ok.iter().filter(|r| r.estimates[k].covered).count() as f64 / n_ok;
            MethodCoverage {
                method: m.to_string(),
                coverage: cov,
                mc_se: (cov * (1.0 - cov) / n_ok).sqrt(),
                mean_cv: ok.iter().map(|r| r.estimates[k].cv).sum::<f64>() / n_ok,
                mean_n_hat: ok.iter().map(|r| r.estimates[k].n_hat).sum::<f64>() / n_ok,
            }
        })
        .collect();
    let n_failed = replicates.len() - ok.len();
    Ok(CoverageTable {
        seed: scenario.seed,
        n_replicates,
        n_failed,
        failure_rate: n_failed as f64 / n_replicates as f64,
        methods,
        replicates,
    })
}
