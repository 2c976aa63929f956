//! Command implementations behind the `dsm` binary.
//!
//! Every file written carries the SHA-256 of the config file and the seed: JSON files wrap their
//! payload in [`Stamped`], CSV files start with `#` comment lines and markdown files with HTML comments.
//!
//! Fit bundle layout (directory written by `fit-dsm`):
//!
//! | file | content |
//! |---|---|
//! | `manifest.json` | bundle version, family, file list |
//! | `detection.json` | detection report (θ̂, V_θ, AIC) |
//! | `naive_fit.json`, `varprop_fit.json` | full GAM fits including design metadata |
//! | `varprop.json` | δ̂, φ*, φ search record, warnings |
//! | `detection_rows.json`, `detections.json` | per-segment detection covariates, detected groups |
//! | `groupsize.json` | group-size classes (only with size bins) |
//! | `*_beta.csv`, `*_vcov.csv`, `kappa.csv` | coefficient vectors and matrices |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::abundance::{
    lognormal_interval, var_delta, var_ht_averaged, var_independence, var_sim, AbundanceResult, Detection,
    PredictionGrid, VarianceMethod,
};
use crate::config::{load_run_config, load_scenario, Loaded, RunConfig};
use crate::data::{
    assign_counts, bin_segments, load_grid, load_observations, load_segments, truncate_observations, validate_survey,
    CovValue, Covariates, ModelRequirements, Observation, Segment,
};
use crate::detection::{detection_data, fit_detection, DetectionFit, DetectionReport, ScaleTerm};
use crate::diagnostics::{factor_levels, obs_vs_expected, obs_vs_expected_total, residual_check, shift_report};
use crate::error::{DsmError, Result};
use crate::gam::{GamFit, GamOptions};
use crate::groupsize::{
    class_abundances, combine_group_abundance, fit_groupsize_dsm, make_scheme, tag_observations, GroupAbundance,
    GroupSizeScheme, CLASS_FACTOR,
};
use crate::sim::{coverage_study, simulate_survey, write_survey};
use crate::varprop::{fit_both, DsmInput, PhiSearch, VarpropFit, VarpropOptions};

pub const BUNDLE_VERSION: u32 = 1;

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct CommandOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub methods: Vec<VarianceMethod>,
    pub draws: Option<usize>,
    pub bundle: Option<PathBuf>,
    pub replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_sha256: String,
    pub seed: u64,
    pub data: T,
}

struct Writer {
    dir: PathBuf,
    hash: String,
    seed: u64,
    written: Vec<PathBuf>,
}

fn io_err(path: &Path, e: std::io::Error) -> DsmError {
    DsmError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

impl Writer {
    fn new(dir: PathBuf, hash: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self {
            dir,
            hash: hash.to_string(),
            seed,
            written: Vec::new(),
        })
    }

    fn header(&self) -> Vec<String> {
        vec![format!("config_sha256: {}", self.hash), format!("seed: {}", self.seed)]
    }

    fn put(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let mut s: String = self.header().iter().map(|h| format!("# {h}\n")).collect();
        s.push_str(body);
        self.put(name, &s)
    }

    fn markdown(&mut self, name: &str, body: &str) -> Result<()> {
        let mut s: String = self.header().iter().map(|h| format!("<!-- {h} -->\n")).collect();
        s.push('\n');
        s.push_str(body);
        self.put(name, &s)
    }

    fn json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<()> {
        let stamped = Stamped {
            config_sha256: self.hash.clone(),
            seed: self.seed,
            data,
        };
        let mut s = serde_json::to_string_pretty(&stamped)
            .map_err(|e| DsmError::numerical(format!("serializing {name}: {e}")))?;
        s.push('\n');
        self.put(name, &s)
    }

    fn matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        self.text(name, &matrix_csv(m))
    }
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| DsmError::Config(format!("{}: {e}", path.display())))
}

fn output_dir<T>(opts: &CommandOptions, cfg: &Loaded<T>, configured: Option<&Path>) -> Result<PathBuf> {
    opts.out
        .clone()
        .or_else(|| configured.map(|p| cfg.resolve(p)))
        .ok_or_else(|| DsmError::Config("no output directory: pass --out or set `output`".into()))
}

struct Survey {
    observations: Vec<Observation>,
    segments: Vec<Segment>,
    scheme: Option<GroupSizeScheme>,
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| DsmError::Config(format!("config needs data.{what}")))
}

fn load_survey(cfg: &Loaded<RunConfig>) -> Result<Survey> {
    let c = &cfg.value;
    let obs = load_observations(
        &cfg.resolve(required(&c.data.observations, "observations")?),
        &c.data.observation_schema,
    )?;
    let mut segments = load_segments(&cfg.resolve(required(&c.data.segments, "segments")?), &c.data.segment_schema)?;
    for b in &c.data.binning {
        bin_segments(&mut segments, b)?;
    }
    let w = c.detection.truncation;
    let truncation = truncate_observations(&obs, w)?;
    if truncation.all_removed {
        return Err(DsmError::invalid(format!("truncation at {w} removes every observation")));
    }
    if truncation.discarded > 0 {
        log::info!("truncation at {w} discarded {} observations", truncation.discarded);
    }
    let extras: Vec<&String> = c.data.observation_schema.extra.iter().collect();
    let requirements = ModelRequirements {
        effort_covariates: c
            .detection
            .terms
            .iter()
            .map(|t| t.name().to_string())
            .filter(|n| n != "size" && n != CLASS_FACTOR && !extras.contains(&n))
            .collect(),
        density_covariates: c
            .dsm
            .as_ref()
            .map(|d| d.smooths.iter().flat_map(|s| s.covariates.clone()).collect())
            .unwrap_or_default(),
        truncation: w,
        units: c.data.units,
    };
    validate_survey(&truncation.observations, &segments, None, &requirements).into_result()?;
    let bins = c.dsm.as_ref().map(|d| d.group_size_bins.clone()).unwrap_or_default();
    let (observations, scheme) = if bins.is_empty() {
        (truncation.observations, None)
    } else {
        let scheme = make_scheme(&truncation.observations, &bins)?;
        (tag_observations(&truncation.observations, &scheme)?, Some(scheme))
    };
    assign_counts(&mut segments, &observations)?;
    Ok(Survey {
        observations,
        segments,
        scheme,
    })
}

fn seed_of(opts: &CommandOptions, configured: u64) -> u64 {
    opts.seed.unwrap_or(configured)
}

fn detection_markdown(r: &DetectionReport) -> String {
    let mut s = format!(
        "# Detection function\n\nform: {:?}, truncation: {}, n = {}\n\n| parameter | estimate | se |\n|---|---|---|\n",
        r.form, r.truncation, r.n
    );
    for p in &r.parameters {
        s.push_str(&format!("| {} | {:.5} | {:.5} |\n", p.name, p.estimate, p.se));
    }
    s.push_str(&format!("\nlog-likelihood: {:.4}\n\nAIC: {:.4}\n", r.loglik, r.aic));
    s
}

pub fn cmd_fit_detection(opts: &CommandOptions) -> Result<Vec<PathBuf>> {
    let cfg = load_run_config(&opts.config)?;
    let out = output_dir(opts, &cfg, cfg.value.output.as_deref())?;
    let survey = load_survey(&cfg)?;
    let data = detection_data(&survey.observations, &survey.segments)?;
    let fit = fit_detection(&data, &cfg.value.detection)?;
    let report = fit.report();
    let mut w = Writer::new(out, &cfg.hash, seed_of(opts, cfg.value.seed))?;
    w.json("detection.json", &report)?;
    w.markdown("detection.md", &detection_markdown(&report))?;
    Ok(w.written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub family: String,
    pub group_size_classes: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarpropSummary {
    pub delta_hat: Vec<f64>,
    /// Square roots of the diagonal of the δ prior covariance.
    pub delta_prior_sd: Vec<f64>,
    pub parameter_names: Vec<String>,
    pub phi_star: f64,
    pub phi_search: Option<PhiSearch>,
    pub warnings: Vec<String>,
}

fn fit_summary(naive: &GamFit, vp: &VarpropFit, detection: &DetectionFit) -> String {
    let mut s = String::from("# Density surface model\n\n| | naive | variance propagation |\n|---|---|---|\n");
    let row = |label: &str, a: String, b: String| format!("| {label} | {a} | {b} |\n");
    s.push_str(&row("family", naive.family.name(), vp.gam.family.name()));
    s.push_str(&row("scale", format!("{:.5}", naive.phi), format!("{:.5}", vp.gam.phi)));
    s.push_str(&row("REML", format!("{:.4}", naive.reml), format!("{:.4}", vp.gam.reml)));
    s.push_str(&row("total edf", format!("{:.3}", naive.edf_total), format!("{:.3}", vp.gam.edf_total)));
    s.push_str(&row(
        "deviance explained",
        format!("{:.1}%", 100.0 * naive.deviance_explained()),
        format!("{:.1}%", 100.0 * vp.gam.deviance_explained()),
    ));
    s.push_str("\n## Term edf\n\n| term | naive | variance propagation |\n|---|---|---|\n");
    for t in &naive.term_edf {
        let v = vp.gam.edf_of(&t.name).map_or("-".to_string(), |e| format!("{e:.3}"));
        s.push_str(&row(&t.name, format!("{:.3}", t.edf), v));
    }
    s.push_str(&format!(
        "\n## Detection correction\n\nφ* = {:.5}\n\n| parameter | θ̂ | δ̂ | prior sd |\n|---|---|---|---|\n",
        vp.phi_star
    ));
    for (j, name) in detection.spec.param_names().iter().enumerate() {
        s.push_str(&format!(
            "| {name} | {:.5} | {:.5} | {:.5} |\n",
            detection.theta[j],
            vp.delta_hat[j],
            detection.v_theta[(j, j)].sqrt()
        ));
    }
    if !vp.warnings.is_empty() {
        s.push_str("\n## Warnings\n\n");
        for w in &vp.warnings {
            s.push_str(&format!("- {w}\n"));
        }
    }
    s
}

/// Values for numeric detection covariates when tabulating by a factor: means over detections.
fn base_covariates(detection: &DetectionFit, detections: &[Detection]) -> Covariates {
    let mut base = Covariates::new();
    for t in &detection.spec.terms {
        if let ScaleTerm::Numeric { name } = t {
            let vals: Vec<f64> = detections
                .iter()
                .filter_map(|d| d.covariates.get(name).and_then(CovValue::as_num))
                .collect();
            if !vals.is_empty() {
                base.insert(name.clone(), CovValue::Num(vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
    }
    base
}

fn factor_names(detection: &DetectionFit) -> Vec<String> {
    detection
        .spec
        .terms
        .iter()
        .filter_map(|t| match t {
            ScaleTerm::Factor { name, .. } => Some(name.clone()),
            _ => None,
        })
        .collect()
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

pub fn cmd_fit_dsm(opts: &CommandOptions) -> Result<Vec<PathBuf>> {
    let cfg = load_run_config(&opts.config)?;
    let c = &cfg.value;
    let dsm = c.dsm.as_ref().ok_or_else(|| DsmError::Config("config has no [dsm] section".into()))?;
    let det_path = dsm
        .detection_fit
        .as_ref()
        .ok_or_else(|| DsmError::Config("[dsm] needs detection_fit, the report written by fit-detection".into()))?;
    let report: Stamped<DetectionReport> = read_json(&cfg.resolve(det_path))?;
    let detection = DetectionFit::from_report(&report.data)?;
    if (detection.spec.truncation - c.detection.truncation).abs() > 0.0 {
        return Err(DsmError::Config(format!(
            "detection fit used truncation {}, config says {}",
            detection.spec.truncation, c.detection.truncation
        )));
    }
    let out = output_dir(opts, &cfg, c.output.as_deref())?;
    let survey = load_survey(&cfg)?;
    let vopts = VarpropOptions {
        gam: GamOptions {
            search_power: dsm.search_power,
            ..GamOptions::default()
        },
        ..VarpropOptions::default()
    };
    let (naive, vp, input, scheme) = match &survey.scheme {
        Some(scheme) => {
            let g = fit_groupsize_dsm(
                &survey.segments,
                &survey.observations,
                scheme,
                &detection,
                &dsm.smooths,
                dsm.family,
                &vopts,
            )?;
            (g.naive, g.varprop, g.input, Some(g.scheme))
        }
        None => {
            let input = DsmInput::from_segments(&survey.segments);
            let (naive, vp) = fit_both(&input, &detection, &dsm.smooths, dsm.family, &vopts)?;
            (naive, vp, input, None)
        }
    };
    for warning in &vp.warnings {
        log::warn!("{warning}");
    }
    let data = detection_data(&survey.observations, &survey.segments)?;
    let detections: Vec<Detection> = data
        .iter()
        .map(|d| Detection {
            size: d.covariates.get("size").and_then(CovValue::as_num).unwrap_or(1.0),
            covariates: d.covariates.clone(),
        })
        .collect();

    let mut w = Writer::new(out, &cfg.hash, seed_of(opts, c.seed))?;
    w.json("detection.json", &report.data)?;
    w.json("naive_fit.json", &naive)?;
    w.json("varprop_fit.json", &vp.gam)?;
    w.json(
        "varprop.json",
        &VarpropSummary {
            delta_hat: vp.delta_hat.iter().copied().collect(),
            delta_prior_sd: (0..detection.theta.len()).map(|j| detection.v_theta[(j, j)].sqrt()).collect(),
            parameter_names: detection.spec.param_names(),
            phi_star: vp.phi_star,
            phi_search: vp.phi_search.clone(),
            warnings: vp.warnings.clone(),
        },
    )?;
    w.json("detection_rows.json", &input.detection_rows)?;
    w.json("detections.json", &detections)?;
    if let Some(s) = &scheme {
        w.json("groupsize.json", s)?;
    }
    w.matrix("naive_beta.csv", &DMatrix::from_column_slice(naive.beta.len(), 1, naive.beta.as_slice()))?;
    w.matrix("naive_vcov.csv", &naive.v_beta)?;
    w.matrix("varprop_beta.csv", &DMatrix::from_column_slice(vp.gam.beta.len(), 1, vp.gam.beta.as_slice()))?;
    w.matrix("varprop_vcov.csv", &vp.gam.v_beta)?;
    w.matrix("kappa.csv", &vp.kappa.values)?;
    w.markdown("summary.md", &fit_summary(&naive, &vp, &detection))?;

    let base = base_covariates(&detection, &detections);
    for f in factor_names(&detection) {
        let levels = factor_levels(&detection, &f, &base)?;
        let shift = shift_report(&vp, &f, &levels, c.diagnostics.shift_threshold)?;
        w.text(&format!("shift_{}.csv", file_safe(&f)), &shift.to_csv())?;
        w.markdown(&format!("shift_{}.md", file_safe(&f)), &shift.to_markdown())?;
    }
    let group_by = if c.diagnostics.group_by.is_empty() {
        factor_names(&detection)
            .into_iter()
            .filter(|f| input.detection_rows.iter().any(|r| r.contains_key(f)))
            .collect()
    } else {
        c.diagnostics.group_by.clone()
    };
    for g in &group_by {
        let t = obs_vs_expected(&vp.gam, &input.detection_rows, g)?;
        w.text(&format!("obs_vs_expected_{}.csv", file_safe(g)), &t.to_csv())?;
        w.markdown(&format!("obs_vs_expected_{}.md", file_safe(g)), &t.to_markdown())?;
    }
    let mut files: Vec<String> = w
        .written
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect();
    files.sort();
    w.json(
        "manifest.json",
        &Manifest {
            version: BUNDLE_VERSION,
            family: naive.family.name(),
            group_size_classes: scheme.as_ref().map_or(0, GroupSizeScheme::m),
            files,
        },
    )?;
    Ok(w.written)
}

/// A fit bundle read back from disk.
pub struct Bundle {
    pub manifest: Manifest,
    pub detection: DetectionFit,
    pub naive: GamFit,
    pub varprop: GamFit,
    pub detection_rows: Vec<Covariates>,
    pub detections: Vec<Detection>,
    pub scheme: Option<GroupSizeScheme>,
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?.data;
    if manifest.version != BUNDLE_VERSION {
        return Err(DsmError::Config(format!(
            "bundle version {} is not supported (expected {BUNDLE_VERSION})",
            manifest.version
        )));
    }
    let report: DetectionReport = read_json(&dir.join("detection.json"))?.data;
    let scheme = if manifest.group_size_classes > 0 {
        Some(read_json(&dir.join("groupsize.json"))?.data)
    } else {
        None
    };
    Ok(Bundle {
        detection: DetectionFit::from_report(&report)?,
        naive: read_json(&dir.join("naive_fit.json"))?.data,
        varprop: read_json(&dir.join("varprop_fit.json"))?.data,
        detection_rows: read_json(&dir.join("detection_rows.json"))?.data,
        detections: read_json(&dir.join("detections.json"))?.data,
        scheme,
        manifest,
    })
}

fn bundle_dir(opts: &CommandOptions, cfg: &Loaded<RunConfig>) -> Result<PathBuf> {
    opts.bundle
        .clone()
        .or_else(|| cfg.value.predict.bundle.as_ref().map(|p| cfg.resolve(p)))
        .ok_or_else(|| DsmError::Config("no fit bundle: pass --bundle or set predict.bundle".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub model: String,
    pub result: AbundanceResult,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupPrediction {
    pub model: String,
    pub result: GroupAbundance,
    pub lower: f64,
    pub upper: f64,
}

fn summary_csv(rows: &[PredictionSummary]) -> String {
    let mut s = String::from("model,method,n_hat,se,cv,lower,upper,draws,percentile_2.5,percentile_97.5\n");
    for r in rows {
        let (p_lo, p_hi) = r
            .result
            .percentiles
            .map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.model,
            r.result.method.name(),
            r.result.n_hat,
            r.result.se(),
            r.result.cv,
            r.lower,
            r.upper,
            r.result.draws.map_or(String::new(), |d| d.to_string()),
            p_lo,
            p_hi
        ));
    }
    s
}

pub fn cmd_predict(opts: &CommandOptions) -> Result<Vec<PathBuf>> {
    let cfg = load_run_config(&opts.config)?;
    let c = &cfg.value;
    let bundle = load_bundle(&bundle_dir(opts, &cfg)?)?;
    let cells = load_grid(&cfg.resolve(required(&c.data.grid, "grid")?), &c.data.grid_schema)?;
    let methods = if opts.methods.is_empty() {
        c.predict.methods.clone()
    } else {
        opts.methods.clone()
    };
    let draws = opts.draws.unwrap_or(c.predict.draws);
    let seed = seed_of(opts, c.seed);
    let out = output_dir(opts, &cfg, c.output.as_deref())?;
    let mut w = Writer::new(out, &cfg.hash, seed)?;

    if let Some(scheme) = &bundle.scheme {
        if methods.iter().any(|m| *m != VarianceMethod::Delta) {
            return Err(DsmError::Config("group-size predictions support the delta method only".into()));
        }
        let mut rows = Vec::new();
        let mut csv = String::from("model,n_hat,se,cv,lower,upper,model_term,size_term\n");
        for (label, fit) in [("naive", &bundle.naive), ("varprop", &bundle.varprop)] {
            let (n_m, cov) = class_abundances(fit, &cells, scheme)?;
            let g = combine_group_abundance(&n_m, &cov, scheme)?;
            let (lower, upper) = lognormal_interval(g.n_hat, g.cv);
            csv.push_str(&format!(
                "{label},{},{},{},{lower},{upper},{},{}\n",
                g.n_hat,
                g.variance.sqrt(),
                g.cv,
                g.model_term,
                g.size_term
            ));
            rows.push(GroupPrediction {
                model: label.into(),
                result: g,
                lower,
                upper,
            });
        }
        w.json("abundance.json", &rows)?;
        w.text("summary.csv", &csv)?;
        return Ok(w.written);
    }

    let naive_grid = PredictionGrid::from_cells(&bundle.naive, &cells)?;
    let vp_grid = PredictionGrid::from_cells(&bundle.varprop, &cells)?;
    let mut rows = Vec::new();
    for m in &methods {
        let results: Vec<(&str, AbundanceResult)> = match m {
            VarianceMethod::Delta => vec![
                ("naive", var_delta(&bundle.naive, &naive_grid)?),
                ("varprop", var_delta(&bundle.varprop, &vp_grid)?),
            ],
            VarianceMethod::PosteriorSim => vec![
                ("naive", var_sim(&bundle.naive, &naive_grid, draws, seed)?),
                ("varprop", var_sim(&bundle.varprop, &vp_grid, draws, seed)?),
            ],
            VarianceMethod::Independence => vec![(
                "naive",
                var_independence(&bundle.naive, &naive_grid, &bundle.detection, &bundle.detection_rows)?,
            )],
            VarianceMethod::HtAveraged => vec![(
                "naive",
                var_ht_averaged(&bundle.naive, &naive_grid, &bundle.detections, &bundle.detection)?,
            )],
        };
        for (model, r) in results {
            let mut cells_csv = String::from("cell_id,area,density,abundance\n");
            for e in &r.cells {
                cells_csv.push_str(&format!("{},{},{},{}\n", e.cell_id, e.area, e.density, e.abundance));
            }
            w.text(&format!("cells_{model}_{}.csv", m.name()), &cells_csv)?;
            let (lower, upper) = r.interval();
            rows.push(PredictionSummary {
                model: model.into(),
                result: r,
                lower,
                upper,
            });
        }
    }
    w.text("summary.csv", &summary_csv(&rows))?;
    w.json("abundance.json", &rows)?;
    Ok(w.written)
}

pub fn cmd_diagnose(opts: &CommandOptions) -> Result<Vec<PathBuf>> {
    let cfg = load_run_config(&opts.config)?;
    let bundle = load_bundle(&bundle_dir(opts, &cfg)?)?;
    let seed = seed_of(opts, cfg.value.seed);
    let out = output_dir(opts, &cfg, cfg.value.output.as_deref())?;
    let mut w = Writer::new(out, &cfg.hash, seed)?;
    let (r_naive, check_naive) = residual_check(&bundle.naive, seed)?;
    let (r_vp, check_vp) = residual_check(&bundle.varprop, seed)?;
    let mut csv = String::from("row,naive,varprop\n");
    for (i, (a, b)) in r_naive.iter().zip(&r_vp).enumerate() {
        csv.push_str(&format!("{},{a},{b}\n", i + 1));
    }
    w.text("residuals.csv", &csv)?;
    let mut checks = BTreeMap::new();
    checks.insert("naive", &check_naive);
    checks.insert("varprop", &check_vp);
    w.json("normality.json", &checks)?;
    let mut md = String::from(
        "# Randomized quantile residuals\n\n| model | n | Shapiro-Francia W' | p-value | flag |\n|---|---|---|---|---|\n",
    );
    for (m, ch) in &checks {
        md.push_str(&format!(
            "| {m} | {} | {:.5} | {:.4} | {} |\n",
            ch.n,
            ch.statistic,
            ch.p_value,
            if ch.flagged { "*" } else { "" }
        ));
    }
    let totals = [("naive", &bundle.naive), ("varprop", &bundle.varprop)];
    md.push_str("\n# Observed and expected totals\n\n| model | observed | expected |\n|---|---|---|\n");
    let mut tot_csv = String::from("model,observed,expected\n");
    for (m, fit) in totals {
        let t = obs_vs_expected_total(fit);
        md.push_str(&format!("| {m} | {:.0} | {:.4} |\n", t.total_observed(), t.total_expected()));
        tot_csv.push_str(&format!("{m},{},{}\n", t.total_observed(), t.total_expected()));
    }
    w.markdown("diagnostics.md", &md)?;
    w.text("obs_vs_expected_total.csv", &tot_csv)?;
    for g in &cfg.value.diagnostics.group_by {
        let t = obs_vs_expected(&bundle.varprop, &bundle.detection_rows, g)?;
        w.text(&format!("obs_vs_expected_{}.csv", file_safe(g)), &t.to_csv())?;
    }
    Ok(w.written)
}

pub fn cmd_simulate(opts: &CommandOptions) -> Result<Vec<PathBuf>> {
    let cfg = load_scenario(&opts.config)?;
    let mut scenario = cfg.value.0.clone();
    scenario.seed = seed_of(opts, scenario.seed);
    let out = output_dir(opts, &cfg, None)?;
    let survey = simulate_survey(&scenario)?;
    let mut w = Writer::new(out.clone(), &cfg.hash, scenario.seed)?;
    write_survey(&out, &survey, scenario.effort.as_ref().map(|e| e.name.as_str()), &w.header())?;
    for f in ["observations.csv", "segments.csv", "grid.csv"] {
        w.written.push(out.join(f));
    }
    w.json("truth.json", &survey.truth)?;
    Ok(w.written)
}

pub fn cmd_coverage(opts: &CommandOptions) -> Result<Vec<PathBuf>> {
    let cfg = load_scenario(&opts.config)?;
    let (scenario, extra) = &cfg.value;
    let mut scenario = scenario.clone();
    scenario.seed = seed_of(opts, scenario.seed);
    let analysis = extra
        .analysis
        .as_ref()
        .ok_or_else(|| DsmError::Config("coverage needs an [analysis] table".into()))?;
    let n = opts
        .replicates
        .or(extra.replicates)
        .ok_or_else(|| DsmError::Config("number of replicates not given (-n or `replicates`)".into()))?;
    let out = output_dir(opts, &cfg, None)?;
    let table = coverage_study(&scenario, n, analysis)?;
    let mut w = Writer::new(out, &cfg.hash, scenario.seed)?;
    let mut csv = String::from("method,coverage,mc_se,mean_cv,mean_n_hat,replicates,failed\n");
    for m in &table.methods {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.method, m.coverage, m.mc_se, m.mean_cv, m.mean_n_hat, table.n_replicates, table.n_failed
        ));
    }
    w.text("coverage.csv", &csv)?;
    let mut reps = String::from("replicate,n_obs,truth,method,n_hat,cv,lower,upper,covered,error\n");
    for r in &table.replicates {
        if let Some(e) = &r.error {
            reps.push_str(&format!("{},,,,,,,,,\"{}\"\n", r.replicate, e.replace('"', "'")));
        }
        for e in &r.estimates {
            reps.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},\n",
                r.replicate, r.n_obs, r.truth, e.method, e.n_hat, e.cv, e.lower, e.upper, e.covered
            ));
        }
    }
    w.text("replicates.csv", &reps)?;
    w.json("coverage.json", &table)?;
    Ok(w.written)
}

/// Reads a single-column matrix file written by the bundle writer.
pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let vals = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| DsmError::Config(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DVector::from_vec(vals))
}
