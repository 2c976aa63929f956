//! Abundance prediction over a grid and its variance by several methods.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, PredictionCell};
use crate::detection::{fd_step, DetectionFit};
use crate::error::{DsmError, Result};
use crate::gam::GamFit;
use crate::linalg;
use crate::smooth::Frame;

/// Default number of posterior draws.
pub const DEFAULT_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    Delta,
    PosteriorSim,
    Independence,
    HtAveraged,
}

impl VarianceMethod {
    pub fn name(&self) -> &'static str {
        match self {
            VarianceMethod::Delta => "delta",
            VarianceMethod::PosteriorSim => "posterior-sim",
            VarianceMethod::Independence => "independence",
            VarianceMethod::HtAveraged => "ht-averaged",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(VarianceMethod::Delta),
            "posterior-sim" | "sim" => Ok(VarianceMethod::PosteriorSim),
            "independence" => Ok(VarianceMethod::Independence),
            "ht-averaged" => Ok(VarianceMethod::HtAveraged),
            other => Err(DsmError::invalid(format!(
                "unknown variance method '{other}' (expected delta, posterior-sim, independence or ht-averaged)"
            ))),
        }
    }
}

/// Prediction matrix (zero-padded over non-predictive columns) with cell areas.
#[derive(Debug, Clone)]
pub struct PredictionGrid {
    pub cell_ids: Vec<String>,
    pub area: DVector<f64>,
    pub xp: DMatrix<f64>,
    pub n_extrapolated: usize,
}

impl PredictionGrid {
    pub fn from_frame(fit: &GamFit, frame: &Frame, cell_ids: Vec<String>, area: Vec<f64>) -> Result<Self> {
        if cell_ids.len() != frame.n || area.len() != frame.n {
            return Err(DsmError::invalid("grid ids, areas and covariates differ in length"));
        }
        if let Some(i) = area.iter().position(|a| !(*a >= 0.0)) {
            return Err(DsmError::invalid(format!("grid cell {}: area must be non-negative", i + 1)));
        }
        let (xp, n_extrapolated) = fit.design.predict_matrix(frame)?;
        if n_extrapolated > 0 {
            warn!("{n_extrapolated} prediction rows lie outside the covariate range of the fit");
        }
        Ok(Self {
            cell_ids,
            area: DVector::from_vec(area),
            xp,
            n_extrapolated,
        })
    }

    pub fn from_cells(fit: &GamFit, cells: &[PredictionCell]) -> Result<Self> {
        Self::from_frame(
            fit,
            &Frame::from_grid(cells),
            cells.iter().map(|c| c.cell_id.clone()).collect(),
            cells.iter().map(|c| c.area).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.area.len()
    }

    pub fn is_empty(&self) -> bool {
        self.area.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub cell_id: String,
    pub area: f64,
    pub density: f64,
    pub abundance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbundanceResult {
    pub n_hat: f64,
    pub variance: f64,
    pub cv: f64,
    pub method: VarianceMethod,
    pub draws: Option<usize>,
    /// 2.5% and 97.5% points of the simulated abundances.
    pub percentiles: Option<(f64, f64)>,
    pub note: Option<String>,
    #[serde(skip)]
    pub cells: Vec<CellEstimate>,
}

impl AbundanceResult {
    pub fn se(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }

    /// Log-normal 95% interval.
    pub fn interval(&self) -> (f64, f64) {
        lognormal_interval(self.n_hat, self.cv)
    }
}

/// N̂ · exp(∓1.96 √log(1 + CV²)).
pub fn lognormal_interval(n_hat: f64, cv: f64) -> (f64, f64) {
    let s = (1.0 + cv * cv).ln().sqrt();
    let c = (1.96 * s).exp();
    (n_hat / c, n_hat * c)
}

/// Point estimate: per-cell density exp(X_p β̂) and N̂ = Σ a_j density_j.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub n_hat: f64,
    pub cells: Vec<CellEstimate>,
}

fn densities(grid: &PredictionGrid, beta: &DVector<f64>) -> Result<DVector<f64>> {
    if grid.xp.ncols() != beta.len() {
        return Err(DsmError::invalid(format!(
            "prediction matrix has {} columns, coefficients {}",
            grid.xp.ncols(),
            beta.len()
        )));
    }
    Ok((&grid.xp * beta).map(f64::exp))
}

pub fn predict_abundance(fit: &GamFit, grid: &PredictionGrid) -> Result<PointEstimate> {
    let d = densities(grid, &fit.beta)?;
    let cells: Vec<CellEstimate> = (0..grid.len())
        .map(|j| CellEstimate {
            cell_id: grid.cell_ids[j].clone(),
            area: grid.area[j],
            density: d[j],
            abundance: grid.area[j] * d[j],
        })
        .collect();
    Ok(PointEstimate {
        n_hat: cells.iter().map(|c| c.abundance).sum(),
        cells,
    })
}

/// N̂ and its gradient X_pᵀ(a ∘ exp(X_p β̂)).
pub fn abundance_gradient(fit: &GamFit, grid: &PredictionGrid) -> Result<(f64, DVector<f64>)> {
    let d = densities(grid, &fit.beta)?;
    let ad = grid.area.component_mul(&d);
    Ok((ad.sum(), grid.xp.transpose() * ad))
}

fn result(point: PointEstimate, variance: f64, method: VarianceMethod) -> AbundanceResult {
    AbundanceResult {
        n_hat: point.n_hat,
        variance,
        cv: if point.n_hat > 0.0 { variance.max(0.0).sqrt() / point.n_hat } else { 0.0 },
        method,
        draws: None,
        percentiles: None,
        note: None,
        cells: point.cells,
    }
}

/// Delta-method variance gᵀ V g with the fit's full (possibly joint) covariance.
pub fn var_delta(fit: &GamFit, grid: &PredictionGrid) -> Result<AbundanceResult> {
    let (_, g) = abundance_gradient(fit, grid)?;
    let variance = linalg::quad_form(&fit.v_beta, &g).max(0.0);
    Ok(result(predict_abundance(fit, grid)?, variance, VarianceMethod::Delta))
}

/// Draws β_b ~ N(β̂, V) with one counter-indexed stream per draw.
pub fn posterior_abundances(fit: &GamFit, grid: &PredictionGrid, draws: usize, seed: u64) -> Result<Vec<f64>> {
    if draws < 2 {
        return Err(DsmError::invalid("posterior simulation needs at least 2 draws"));
    }
    let factor = linalg::psd_factor(&fit.v_beta)?;
    let eta = &grid.xp * &fit.beta;
    let m = &grid.xp * &factor;
    let p = fit.beta.len();
    let out: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            let e = &eta + &m * z;
            e.iter().zip(grid.area.iter()).map(|(v, a)| a * v.exp()).sum::<f64>()
        })
        .collect();
    Ok(out)
}

/// Empirical percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

pub fn var_sim(fit: &GamFit, grid: &PredictionGrid, draws: usize, seed: u64) -> Result<AbundanceResult> {
    let sims = posterior_abundances(fit, grid, draws, seed)?;
    let mut sorted = sims.clone();
    sorted.sort_by(f64::total_cmp);
    let mut r = result(predict_abundance(fit, grid)?, sample_variance(&sims), VarianceMethod::PosteriorSim);
    r.draws = Some(draws);
    r.percentiles = Some((percentile(&sorted, 0.025), percentile(&sorted, 0.975)));
    Ok(r)
}

/// √(CV²_GAM + CV²_p).
pub fn combine_cv(cv_gam: f64, cv_p: f64) -> f64 {
    (cv_gam * cv_gam + cv_p * cv_p).sqrt()
}

/// CV of the mean detectability over `rows` by the delta method in θ. With no detection
/// covariates this is simply CV(p̂).
pub fn detectability_cv(detection: &DetectionFit, rows: &[Covariates]) -> Result<f64> {
    let single = [Covariates::new()];
    let rows = if detection.spec.has_covariates() { rows } else { &single[..] };
    if rows.is_empty() {
        return Err(DsmError::invalid("no rows to average detectability over"));
    }
    let mean_p = |theta: &[f64]| -> Result<f64> {
        let mut s = 0.0;
        for r in rows {
            s += detection.p_at_theta(theta, r)?;
        }
        Ok(s / rows.len() as f64)
    };
    let (p, g) = value_and_gradient(&detection.theta, mean_p)?;
    Ok(linalg::quad_form(&detection.v_theta, &g).max(0.0).sqrt() / p)
}

fn value_and_gradient<F>(theta: &DVector<f64>, f: F) -> Result<(f64, DVector<f64>)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let value = f(theta.as_slice())?;
    let mut th = theta.clone();
    let mut g = DVector::zeros(theta.len());
    for j in 0..theta.len() {
        let h = fd_step(theta[j]);
        th[j] = theta[j] + h;
        let up = f(th.as_slice())?;
        th[j] = theta[j] - h;
        let dn = f(th.as_slice())?;
        th[j] = theta[j];
        g[j] = (up - dn) / (2.0 * h);
    }
    Ok((value, g))
}

/// CV² summation of the naive GAM's CV and the detectability CV.
pub fn var_independence(
    naive: &GamFit,
    grid: &PredictionGrid,
    detection: &DetectionFit,
    rows: &[Covariates],
) -> Result<AbundanceResult> {
    let base = var_delta(naive, grid)?;
    let cv_p = detectability_cv(detection, rows)?;
    let cv = combine_cv(base.cv, cv_p);
    let mut r = base;
    r.method = VarianceMethod::Independence;
    r.cv = cv;
    r.variance = (cv * r.n_hat).powi(2);
    if detection.spec.has_covariates() {
        let msg = "detection depends on covariates; independence of the two stages is hard to justify";
        warn!("{msg}");
        r.note = Some(msg.into());
    }
    Ok(r)
}

/// One detected group for the Horvitz–Thompson average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub size: f64,
    pub covariates: Covariates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HtAverage {
    /// Horvitz–Thompson abundance of individuals in the covered strip, Σ g_i / p̂_i.
    pub n_ht: f64,
    /// Implied average detectability Σ g_i / N̂_HT.
    pub p_tilde: f64,
    pub var_p_tilde: f64,
    pub note: String,
}

pub const HT_NOTE: &str = "not recommended: averaged detectability ignores the spatial pattern of detectability";

pub fn ht_averaged_detectability(obs: &[Detection], detection: &DetectionFit) -> Result<HtAverage> {
    if obs.is_empty() {
        return Err(DsmError::invalid("Horvitz-Thompson average needs at least one observation"));
    }
    let total: f64 = obs.iter().map(|o| o.size).sum();
    let ht = |theta: &[f64]| -> Result<f64> {
        let mut s = 0.0;
        for (i, o) in obs.iter().enumerate() {
            let p = detection.p_at_theta(theta, &o.covariates)?;
            if p < 1e-6 {
                return Err(DsmError::numerical(format!("observation {}: detectability {p:e} below 1e-6", i + 1)));
            }
            s += o.size / p;
        }
        Ok(s)
    };
    let n_ht = ht(detection.theta.as_slice())?;
    let (p_tilde, g) = value_and_gradient(&detection.theta, |th| Ok(total / ht(th)?))?;
    Ok(HtAverage {
        n_ht,
        p_tilde,
        var_p_tilde: linalg::quad_form(&detection.v_theta, &g).max(0.0),
        note: HT_NOTE.into(),
    })
}

/// CV² combination of the naive GAM CV with the CV of the HT-averaged detectability.
pub fn var_ht_averaged(naive: &GamFit, grid: &PredictionGrid, obs: &[Detection], detection: &DetectionFit) -> Result<AbundanceResult> {
    let base = var_delta(naive, grid)?;
    let ht = ht_averaged_detectability(obs, detection)?;
    let cv = combine_cv(base.cv, ht.var_p_tilde.sqrt() / ht.p_tilde);
    let mut r = base;
    r.method = VarianceMethod::HtAveraged;
    r.cv = cv;
    r.variance = (cv * r.n_hat).powi(2);
    r.note = Some(HT_NOTE.into());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovValue;
    use crate::detection::{DetectionForm, DetectionSpec};
    use crate::family::Family;
    use crate::smooth::{DesignBundle, TermInfo};

    fn intercept_fit(beta0: f64, var0: f64) -> GamFit {
        let design = DesignBundle {
            x: DMatrix::from_element(1, 1, 1.0),
            penalties: vec![],
            terms: vec![TermInfo {
                name: "(Intercept)".into(),
                start: 0,
                width: 1,
                penalized: false,
            }],
            prepared: vec![],
            extra_columns: 0,
        };
        GamFit {
            design,
            family: Family::Poisson,
            y: DVector::from_element(1, 1.0),
            offset: DVector::zeros(1),
            beta: DVector::from_element(1, beta0),
            v_beta: DMatrix::from_element(1, 1, var0),
            lambda: vec![],
            penalty_names: vec![],
            phi: 1.0,
            term_edf: vec![],
            edf_total: 1.0,
            reml: 0.0,
            eta: DVector::zeros(1),
            mu: DVector::zeros(1),
            deviance: 0.0,
            null_deviance: 0.0,
            outer_iterations: 0,
        }
    }

    fn grid_of(areas: &[f64]) -> PredictionGrid {
        PredictionGrid {
            cell_ids: (0..areas.len()).map(|i| format!("c{i}")).collect(),
            area: DVector::from_vec(areas.to_vec()),
            xp: DMatrix::from_element(areas.len(), 1, 1.0),
            n_extrapolated: 0,
        }
    }

    #[test]
    fn intercept_only_point_and_delta() {
        let fit = intercept_fit(0.4, 0.09);
        let r = var_delta(&fit, &grid_of(&[3.0])).unwrap();
        let n = 3.0 * 0.4_f64.exp();
        assert!((r.n_hat - n).abs() < 1e-12);
        assert!((r.variance - n * n * 0.09).abs() < 1e-12);
        let halves = predict_abundance(&fit, &grid_of(&[1.5, 1.5])).unwrap();
        assert!((halves.n_hat - n).abs() < 1e-12);
    }

    #[test]
    fn zero_covariance_gives_zero_variance() {
        let fit = intercept_fit(1.0, 0.0);
        assert_eq!(var_delta(&fit, &grid_of(&[2.0])).unwrap().variance, 0.0);
        let r = var_sim(&fit, &grid_of(&[2.0]), 50, 1).unwrap();
        assert!(r.variance.abs() < 1e-20);
    }

    #[test]
    fn lognormal_closed_form_variance() {
        let (b0, v, a) = (0.3, 0.04, 2.0);
        let fit = intercept_fit(b0, v);
        let r = var_sim(&fit, &grid_of(&[a]), 1_000_000, 99).unwrap();
        let exact = (a * f64::exp(b0)).powi(2) * (v.exp() - 1.0) * v.exp();
        assert!((r.variance / exact - 1.0).abs() < 0.02, "{} vs {exact}", r.variance);
        let (lo, hi) = r.percentiles.unwrap();
        assert!(lo < hi);
    }

    #[test]
    fn simulation_is_reproducible_across_thread_counts() {
        let fit = intercept_fit(0.3, 0.1);
        let a = var_sim(&fit, &grid_of(&[1.0]), 500, 7).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| var_sim(&fit, &grid_of(&[1.0]), 500, 7).unwrap());
        assert_eq!(a.variance.to_bits(), b.variance.to_bits());
    }

    #[test]
    fn cv_combination() {
        assert!((combine_cv(0.3, 0.4) - 0.5).abs() < 1e-15);
        assert_eq!(combine_cv(0.3, 0.0), 0.3);
    }

    fn level_fit() -> DetectionFit {
        DetectionFit {
            spec: DetectionSpec::new(DetectionForm::HalfNormal, 1.0).with_factor("sea", &["a", "b"]),
            theta: DVector::from_vec(vec![-0.5, -0.3]),
            v_theta: DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.03]),
            loglik: 0.0,
            n_obs: 10,
            iterations: 0,
        }
    }

    fn obs(level: &str, size: f64) -> Detection {
        let mut c = Covariates::new();
        c.insert("sea".into(), CovValue::Level(level.into()));
        Detection { size, covariates: c }
    }

    #[test]
    fn ht_average_arithmetic() {
        let fit = level_fit();
        let pa = fit.p_at(&obs("a", 1.0).covariates).unwrap();
        let all_a = [obs("a", 2.0), obs("a", 3.0), obs("a", 1.0)];
        let r = ht_averaged_detectability(&all_a, &fit).unwrap();
        assert!((r.p_tilde - pa).abs() < 1e-12);
        assert!((r.n_ht - 6.0 / pa).abs() < 1e-9);
        assert!(r.note.contains("not recommended"));
    }

    #[test]
    fn ht_variance_matches_composition_fd() {
        let fit = level_fit();
        let data = [obs("a", 1.0), obs("b", 2.0), obs("b", 1.0)];
        let r = ht_averaged_detectability(&data, &fit).unwrap();
        // brute force: p̃(θ) assembled directly, Richardson-extrapolated differences
        let p_tilde = |th: &[f64]| {
            let n: f64 = data.iter().map(|o| o.size / fit.p_at_theta(th, &o.covariates).unwrap()).sum();
            4.0 / n
        };
        let mut g = DVector::zeros(2);
        for j in 0..2 {
            let d = |h: f64| {
                let mut up = fit.theta.clone();
                let mut dn = fit.theta.clone();
                up[j] += h;
                dn[j] -= h;
                (p_tilde(up.as_slice()) - p_tilde(dn.as_slice())) / (2.0 * h)
            };
            g[j] = (4.0 * d(1e-3) - d(2e-3)) / 3.0;
        }
        let brute = linalg::quad_form(&fit.v_theta, &g);
        assert!((r.var_p_tilde - brute).abs() < 1e-6 * brute.max(1e-12) + 1e-12, "{} vs {brute}", r.var_p_tilde);
    }

    #[test]
    fn ht_rejects_tiny_detectability() {
        let mut fit = level_fit();
        fit.theta[0] = -12.0;
        assert!(ht_averaged_detectability(&[obs("a", 1.0)], &fit).is_err());
    }
}
