//! Detection functions: half-normal and hazard-rate keys with a log-linear scale,
//! maximum-likelihood fitting, detection probabilities and their θ-derivatives.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CovValue, Covariates, Observation, Segment};
use crate::error::{DsmError, Result};
use crate::linalg;
use crate::optim::{fd_gradient, minimize_bfgs, BfgsOptions};
use crate::quadrature::GaussLegendre;

/// Probabilities below this are treated as underflow.
pub const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectionForm {
    #[serde(rename = "half-normal", alias = "hn")]
    HalfNormal,
    #[serde(rename = "hazard-rate", alias = "hr")]
    HazardRate,
}

/// A term entering log σ linearly. Factors use reference-level coding:
/// the first level is absorbed into the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScaleTerm {
    Numeric { name: String },
    Factor {
        name: String,
        /// Filled from the data when left empty.
        #[serde(default)]
        levels: Vec<String>,
    },
}

impl ScaleTerm {
    pub fn name(&self) -> &str {
        match self {
            ScaleTerm::Numeric { name } | ScaleTerm::Factor { name, .. } => name,
        }
    }

    fn width(&self) -> usize {
        match self {
            ScaleTerm::Numeric { .. } => 1,
            ScaleTerm::Factor { levels, .. } => levels.len().saturating_sub(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSpec {
    pub form: DetectionForm,
    #[serde(default)]
    pub terms: Vec<ScaleTerm>,
    pub truncation: f64,
}

impl DetectionSpec {
    pub fn new(form: DetectionForm, truncation: f64) -> Self {
        Self {
            form,
            terms: Vec::new(),
            truncation,
        }
    }

    pub fn with_factor(mut self, name: &str, levels: &[&str]) -> Self {
        self.terms.push(ScaleTerm::Factor {
            name: name.to_string(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    pub fn with_numeric(mut self, name: &str) -> Self {
        self.terms.push(ScaleTerm::Numeric { name: name.to_string() });
        self
    }

    pub fn scale_dim(&self) -> usize {
        1 + self.terms.iter().map(ScaleTerm::width).sum::<usize>()
    }

    pub fn n_params(&self) -> usize {
        self.scale_dim() + usize::from(self.form == DetectionForm::HazardRate)
    }

    pub fn has_covariates(&self) -> bool {
        !self.terms.is_empty()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["log_sigma:(Intercept)".to_string()];
        for t in &self.terms {
            match t {
                ScaleTerm::Numeric { name } => names.push(format!("log_sigma:{name}")),
                ScaleTerm::Factor { name, levels } => {
                    for l in levels.iter().skip(1) {
                        names.push(format!("log_sigma:{name}{l}"));
                    }
                }
            }
        }
        if self.form == DetectionForm::HazardRate {
            names.push("log_shape".to_string());
        }
        names
    }

    /// Row of the log-scale design: intercept, numeric values, level indicators.
    pub fn scale_row(&self, covs: &Covariates) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(self.scale_dim());
        row.push(1.0);
        for t in &self.terms {
            let v = covs
                .get(t.name())
                .ok_or_else(|| DsmError::invalid(format!("detection covariate '{}' missing", t.name())))?;
            match t {
                ScaleTerm::Numeric { name } => row.push(v.as_num().ok_or_else(|| {
                    DsmError::invalid(format!("detection covariate '{name}' must be numeric"))
                })?),
                ScaleTerm::Factor { name, levels } => {
                    let label = v.to_string();
                    let idx = levels.iter().position(|l| *l == label).ok_or_else(|| {
                        DsmError::invalid(format!("level '{label}' of '{name}' is not in the detection model"))
                    })?;
                    row.extend((1..levels.len()).map(|k| if k == idx { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(row)
    }

    /// Fills empty factor level lists from the data (sorted order).
    pub fn resolve_levels(&mut self, data: &[DetectionDatum]) {
        for t in &mut self.terms {
            if let ScaleTerm::Factor { name, levels } = t {
                if levels.is_empty() {
                    let mut seen: Vec<String> = data
                        .iter()
                        .filter_map(|d| d.covariates.get(name.as_str()).map(|v| v.to_string()))
                        .collect();
                    seen.sort();
                    seen.dedup();
                    *levels = seen;
                }
            }
        }
    }

    fn params(&self, theta: &[f64], row: &[f64]) -> (f64, f64) {
        let k = self.scale_dim();
        let log_sigma: f64 = row.iter().zip(&theta[..k]).map(|(a, b)| a * b).sum();
        let shape = if self.form == DetectionForm::HazardRate {
            theta[k].exp()
        } else {
            0.0
        };
        (log_sigma.exp(), shape)
    }

    fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(DsmError::invalid(format!(
                "parameter vector has length {}, model expects {}",
                theta.len(),
                self.n_params()
            )));
        }
        Ok(())
    }
}

/// One detection: distance plus the covariates visible to the detection model.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDatum {
    pub distance: f64,
    pub covariates: Covariates,
}

/// Joins observations to their segment's effort covariates. Group size is exposed as
/// numeric covariate `size`, declared extra columns as factor levels.
pub fn detection_data(obs: &[Observation], segments: &[Segment]) -> Result<Vec<DetectionDatum>> {
    let index: HashMap<&str, &Segment> = segments.iter().map(|s| (s.segment_id.as_str(), s)).collect();
    obs.iter()
        .enumerate()
        .map(|(row, o)| {
            let seg = index.get(o.segment_id.as_str()).ok_or_else(|| {
                DsmError::invalid(format!("observation {}: unknown segment '{}'", row + 1, o.segment_id))
            })?;
            let mut covariates = seg.effort.clone();
            covariates.insert("size".into(), CovValue::Num(o.group_size as f64));
            for (k, v) in &o.extra {
                covariates.insert(k.clone(), CovValue::Level(v.clone()));
            }
            Ok(DetectionDatum {
                distance: o.distance,
                covariates,
            })
        })
        .collect()
}

fn pi_value(form: DetectionForm, y: f64, sigma: f64, shape: f64) -> f64 {
    match form {
        DetectionForm::HalfNormal => (-(y * y) / (2.0 * sigma * sigma)).exp(),
        DetectionForm::HazardRate => {
            if y <= 0.0 {
                1.0
            } else {
                -(-(y / sigma).powf(-shape)).exp_m1()
            }
        }
    }
}

fn log_pi_value(form: DetectionForm, y: f64, sigma: f64, shape: f64) -> f64 {
    match form {
        DetectionForm::HalfNormal => -(y * y) / (2.0 * sigma * sigma),
        DetectionForm::HazardRate => {
            if y <= 0.0 {
                0.0
            } else {
                (-(-(y / sigma).powf(-shape)).exp_m1()).ln()
            }
        }
    }
}

/// `(1/w) ∫₀^w π(y) dy` with the shared 64-node Gauss–Legendre rule.
pub fn average_detectability(form: DetectionForm, sigma: f64, shape: f64, w: f64) -> Result<f64> {
    average_detectability_with(GaussLegendre::order64(), form, sigma, shape, w)
}

pub fn average_detectability_with(
    rule: &GaussLegendre,
    form: DetectionForm,
    sigma: f64,
    shape: f64,
    w: f64,
) -> Result<f64> {
    if !(w > 0.0) {
        return Err(DsmError::invalid(format!("truncation must be positive, got {w}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() || !shape.is_finite() {
        return Err(DsmError::numerical(format!(
            "detection integrand not finite (sigma = {sigma}, shape = {shape})"
        )));
    }
    let p = rule.integrate(0.0, w, |y| pi_value(form, y, sigma, shape)) / w;
    if !p.is_finite() {
        return Err(DsmError::numerical("detection probability not finite"));
    }
    Ok(p.clamp(0.0, 1.0))
}

/// π(y | θ, z, g).
pub fn eval_pi(y: f64, theta: &[f64], covs: &Covariates, spec: &DetectionSpec) -> Result<f64> {
    spec.check_dim(theta)?;
    if !(0.0..=spec.truncation).contains(&y) {
        return Err(DsmError::invalid(format!(
            "distance {y} outside [0, {}]",
            spec.truncation
        )));
    }
    let (sigma, shape) = spec.params(theta, &spec.scale_row(covs)?);
    Ok(pi_value(spec.form, y, sigma, shape))
}

/// Average detection probability p(θ; z, g) within the truncation distance.
pub fn detection_probability(theta: &[f64], covs: &Covariates, spec: &DetectionSpec) -> Result<f64> {
    spec.check_dim(theta)?;
    let (sigma, shape) = spec.params(theta, &spec.scale_row(covs)?);
    average_detectability(spec.form, sigma, shape, spec.truncation)
}

/// Observations grouped by identical scale-design rows so p is computed once per group.
struct PreparedData {
    rows: Vec<Vec<f64>>,
    members: Vec<Vec<f64>>,
}

fn prepare(data: &[DetectionDatum], spec: &DetectionSpec) -> Result<PreparedData> {
    let mut key_index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows = Vec::new();
    let mut members: Vec<Vec<f64>> = Vec::new();
    for (i, d) in data.iter().enumerate() {
        if !(0.0..=spec.truncation).contains(&d.distance) {
            return Err(DsmError::invalid(format!(
                "observation {}: distance {} outside [0, {}] (truncate first)",
                i + 1,
                d.distance,
                spec.truncation
            )));
        }
        let row = spec.scale_row(&d.covariates)?;
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let g = *key_index.entry(key).or_insert_with(|| {
            rows.push(row);
            members.push(Vec::new());
            rows.len() - 1
        });
        members[g].push(d.distance);
    }
    Ok(PreparedData { rows, members })
}

fn loglik_prepared(prep: &PreparedData, theta: &[f64], spec: &DetectionSpec) -> Result<f64> {
    let mut ll = 0.0;
    for (row, ys) in prep.rows.iter().zip(&prep.members) {
        let (sigma, shape) = spec.params(theta, row);
        let p = average_detectability(spec.form, sigma, shape, spec.truncation)?;
        if p < P_FLOOR {
            return Err(DsmError::numerical(format!("detection probability underflow (p = {p:e})")));
        }
        let lp = p.ln();
        for &y in ys {
            ll += log_pi_value(spec.form, y, sigma, shape) - lp;
        }
    }
    if !ll.is_finite() {
        return Err(DsmError::numerical("detection log-likelihood not finite"));
    }
    Ok(ll)
}

/// Σ log[π(y_s) / p_s]; the constant −n log w is excluded.
pub fn detection_loglik(data: &[DetectionDatum], theta: &[f64], spec: &DetectionSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(DsmError::invalid("detection likelihood needs at least one observation"));
    }
    spec.check_dim(theta)?;
    loglik_prepared(&prepare(data, spec)?, theta, spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFit {
    pub spec: DetectionSpec,
    pub theta: DVector<f64>,
    pub v_theta: DMatrix<f64>,
    pub loglik: f64,
    pub n_obs: usize,
    pub iterations: usize,
}

/// Relative finite-difference step used for κ and gradients of p.
pub fn fd_step(theta_j: f64) -> f64 {
    (1e-4 * theta_j.abs()).max(1e-4)
}

impl DetectionFit {
    pub fn aic(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * self.theta.len() as f64
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.theta.len()).map(|i| self.v_theta[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn p_at(&self, covs: &Covariates) -> Result<f64> {
        detection_probability(self.theta.as_slice(), covs, &self.spec)
    }

    pub fn p_at_theta(&self, theta: &[f64], covs: &Covariates) -> Result<f64> {
        detection_probability(theta, covs, &self.spec)
    }

    /// Central-difference gradient of p in θ at θ̂.
    pub fn grad_p(&self, covs: &Covariates) -> Result<DVector<f64>> {
        let mut th = self.theta.clone();
        let mut g = DVector::zeros(th.len());
        for j in 0..th.len() {
            let h = fd_step(self.theta[j]);
            th[j] = self.theta[j] + h;
            let up = self.p_at_theta(th.as_slice(), covs)?;
            th[j] = self.theta[j] - h;
            let dn = self.p_at_theta(th.as_slice(), covs)?;
            th[j] = self.theta[j];
            g[j] = (up - dn) / (2.0 * h);
        }
        Ok(g)
    }

    /// Delta-method standard error of p at θ̂.
    pub fn se_p(&self, covs: &Covariates) -> Result<f64> {
        let g = self.grad_p(covs)?;
        Ok(linalg::quad_form(&self.v_theta, &g).max(0.0).sqrt())
    }

    pub fn report(&self) -> DetectionReport {
        DetectionReport {
            form: self.spec.form,
            truncation: self.spec.truncation,
            spec: self.spec.clone(),
            parameters: self
                .spec
                .param_names()
                .into_iter()
                .zip(self.theta.iter())
                .zip(self.std_errors())
                .map(|((name, &estimate), se)| ParameterEstimate { name, estimate, se })
                .collect(),
            v_theta: (0..self.v_theta.nrows())
                .map(|i| self.v_theta.row(i).iter().copied().collect())
                .collect(),
            loglik: self.loglik,
            aic: self.aic(),
            n: self.n_obs,
        }
    }

    pub fn from_report(report: &DetectionReport) -> Result<Self> {
        let k = report.parameters.len();
        if k != report.spec.n_params() || report.v_theta.len() != k || report.v_theta.iter().any(|r| r.len() != k) {
            return Err(DsmError::invalid("detection report dimensions are inconsistent"));
        }
        Ok(Self {
            spec: report.spec.clone(),
            theta: DVector::from_iterator(k, report.parameters.iter().map(|p| p.estimate)),
            v_theta: DMatrix::from_fn(k, k, |i, j| report.v_theta[i][j]),
            loglik: report.loglik,
            n_obs: report.n,
            iterations: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

/// Serialized form of a fitted detection function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub form: DetectionForm,
    pub truncation: f64,
    pub parameters: Vec<ParameterEstimate>,
    pub v_theta: Vec<Vec<f64>>,
    pub loglik: f64,
    pub aic: f64,
    pub n: usize,
    pub spec: DetectionSpec,
}

/// Maximum-likelihood fit by BFGS with finite-difference gradients; V_θ is the inverse
/// of the negative central-difference Hessian.
pub fn fit_detection(data: &[DetectionDatum], spec: &DetectionSpec) -> Result<DetectionFit> {
    if data.is_empty() {
        return Err(DsmError::invalid("cannot fit a detection function to zero observations"));
    }
    let mut spec = spec.clone();
    spec.resolve_levels(data);
    for t in &spec.terms {
        if let ScaleTerm::Factor { name, levels } = t {
            if levels.is_empty() {
                return Err(DsmError::invalid(format!("factor '{name}' has no levels")));
            }
            let mut counts: BTreeMap<&str, usize> = levels.iter().map(|l| (l.as_str(), 0)).collect();
            for d in data {
                if let Some(v) = d.covariates.get(name.as_str()) {
                    if let Some(c) = counts.get_mut(v.to_string().as_str()) {
                        *c += 1;
                    }
                }
            }
            if let Some((l, _)) = counts.iter().find(|(_, &c)| c == 0) {
                return Err(DsmError::invalid(format!("factor '{name}' level '{l}' has no observations")));
            }
        }
    }
    let prep = prepare(data, &spec)?;

    let mean_y = data.iter().map(|d| d.distance).sum::<f64>() / data.len() as f64;
    let mut theta0 = DVector::zeros(spec.n_params());
    theta0[0] = (mean_y.max(spec.truncation * 1e-3) / 0.6).ln();
    if spec.form == DetectionForm::HazardRate {
        theta0[spec.scale_dim()] = 2.0_f64.ln();
    }

    let objective = |th: &DVector<f64>| -> Result<f64> {
        match loglik_prepared(&prep, th.as_slice(), &spec) {
            Ok(ll) => Ok(-ll),
            Err(DsmError::Numerical(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };
    let ll0 = loglik_prepared(&prep, theta0.as_slice(), &spec)?;
    let opts = BfgsOptions {
        max_iter: 500,
        grad_tol: 1e-7 * ll0.abs().max(1.0),
        fd_step: 1e-6,
        max_step: 2.0,
        ..Default::default()
    };
    let res = minimize_bfgs(objective, theta0, &opts, "detection function fit")?;
    let theta = res.x;
    let loglik = -res.value;

    // Post-hoc check of the gradient criterion.
    let mut f = |th: &DVector<f64>| objective(th);
    let g = fd_gradient(&mut f, &theta, 1e-6)?;
    if g.amax() > 1e-6 * loglik.abs().max(1.0) {
        return Err(DsmError::NonConvergence {
            what: format!("detection function fit (gradient {:.3e})", g.amax()),
            iterations: res.iterations,
            trace: res.trace,
        });
    }

    let hess = numerical_hessian(&prep, &spec, &theta)?;
    let neg = -hess;
    let v_theta = linalg::spd_inverse(&neg, "detection Hessian")?;
    Ok(DetectionFit {
        spec,
        theta,
        v_theta,
        loglik,
        n_obs: data.len(),
        iterations: res.iterations,
    })
}

fn numerical_hessian(prep: &PreparedData, spec: &DetectionSpec, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = theta.len();
    let ll = |t: &DVector<f64>| loglik_prepared(prep, t.as_slice(), spec);
    let h: Vec<f64> = theta.iter().map(|&t| 1e-4 * t.abs().max(1.0)).collect();
    let f0 = ll(theta)?;
    let mut hess = DMatrix::zeros(k, k);
    let mut t = theta.clone();
    for i in 0..k {
        t[i] = theta[i] + h[i];
        let fp = ll(&t)?;
        t[i] = theta[i] - h[i];
        let fm = ll(&t)?;
        t[i] = theta[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let eval = |si: f64, sj: f64| -> Result<f64> {
                let mut tt = theta.clone();
                tt[i] += si * h[i];
                tt[j] += sj * h[j];
                ll(&tt)
            };
            let v = (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)? + eval(-1.0, -1.0)?) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// ∂ log p / ∂θ at θ̂, one row per covariate row.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaMatrix {
    pub values: DMatrix<f64>,
}

impl KappaMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            values: DMatrix::zeros(rows, cols),
        }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// Three-point central differences of log p in each θ_j, step `max(1e-4, 1e-4 |θ̂_j|)`.
pub fn detection_kappa(fit: &DetectionFit, rows: &[Covariates]) -> Result<KappaMatrix> {
    let k = fit.theta.len();
    let mut cache: HashMap<Vec<u64>, Vec<f64>> = HashMap::new();
    let mut values = DMatrix::zeros(rows.len(), k);
    for (i, covs) in rows.iter().enumerate() {
        let srow = fit.spec.scale_row(covs)?;
        let key: Vec<u64> = srow.iter().map(|v| v.to_bits()).collect();
        if !cache.contains_key(&key) {
            let mut kappa = Vec::with_capacity(k);
            let mut th = fit.theta.clone();
            for j in 0..k {
                let h = fd_step(fit.theta[j]);
                th[j] = fit.theta[j] + h;
                let up = fit.p_at_theta(th.as_slice(), covs)?.ln();
                th[j] = fit.theta[j] - h;
                let dn = fit.p_at_theta(th.as_slice(), covs)?.ln();
                th[j] = fit.theta[j];
                let d = (up - dn) / (2.0 * h);
                if !d.is_finite() {
                    return Err(DsmError::numerical(format!(
                        "non-finite kappa at row {} parameter {}",
                        i + 1,
                        fit.spec.param_names()[j]
                    )));
                }
                kappa.push(d);
            }
            cache.insert(key.clone(), kappa);
        }
        for (j, v) in cache[&key].iter().enumerate() {
            values[(i, j)] = *v;
        }
    }
    Ok(KappaMatrix { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::function::erf::erf;

    fn no_covs() -> Covariates {
        Covariates::new()
    }

    fn hn_p_closed_form(sigma: f64, w: f64) -> f64 {
        sigma / w * (std::f64::consts::PI / 2.0).sqrt() * erf(w / (sigma * 2.0_f64.sqrt()))
    }

    #[test]
    fn half_normal_pi_values() {
        let spec = DetectionSpec::new(DetectionForm::HalfNormal, 870.0);
        let theta = [300.0_f64.ln()];
        assert_eq!(eval_pi(0.0, &theta, &no_covs(), &spec).unwrap(), 1.0);
        let v = eval_pi(300.0, &theta, &no_covs(), &spec).unwrap();
        assert!((v - (-0.5_f64).exp()).abs() < 1e-14);
        assert!(eval_pi(871.0, &theta, &no_covs(), &spec).is_err());
        assert!(eval_pi(-1.0, &theta, &no_covs(), &spec).is_err());
    }

    #[test]
    fn hazard_rate_limits() {
        let spec = DetectionSpec::new(DetectionForm::HazardRate, 1.0);
        let theta = [0.5_f64.ln(), 60.0_f64.ln()];
        let v = eval_pi(0.4, &theta, &no_covs(), &spec).unwrap();
        assert!(v > 1.0 - 1e-12);
        assert_eq!(eval_pi(0.0, &theta, &no_covs(), &spec).unwrap(), 1.0);
        let p = detection_probability(&theta, &no_covs(), &spec).unwrap();
        assert!((p - 0.5).abs() < 0.02, "p = {p}");
    }

    #[test]
    fn half_normal_p_matches_erf_expression() {
        // σ = w: √(π/2)·erf(1/√2).
        let expected = (std::f64::consts::PI / 2.0).sqrt() * erf(1.0 / 2.0_f64.sqrt());
        assert!((expected - 0.85562).abs() < 1e-5);
        let spec = DetectionSpec::new(DetectionForm::HalfNormal, 870.0);
        let p = detection_probability(&[870.0_f64.ln()], &no_covs(), &spec).unwrap();
        assert!((p - expected).abs() < 1e-9, "{p} {expected}");
        let p = detection_probability(&[1e6_f64.ln()], &no_covs(), &spec).unwrap();
        assert!((p - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadrature_order_doubling_is_stable() {
        let r128 = GaussLegendre::new(128);
        for &(form, sigma, shape) in &[
            (DetectionForm::HalfNormal, 0.2, 0.0),
            (DetectionForm::HalfNormal, 3.0, 0.0),
            (DetectionForm::HazardRate, 0.3, 2.0),
            (DetectionForm::HazardRate, 0.6, 4.0),
        ] {
            let a = average_detectability(form, sigma, shape, 1.0).unwrap();
            let b = average_detectability_with(&r128, form, sigma, shape, 1.0).unwrap();
            assert!((a - b).abs() < 1e-9, "{form:?} {sigma} {shape}: {a} vs {b}");
        }
    }

    #[test]
    fn p_monotone_in_sigma() {
        for form in [DetectionForm::HalfNormal, DetectionForm::HazardRate] {
            let mut last = 0.0;
            for i in 1..60 {
                let sigma = 0.05 * i as f64;
                let p = average_detectability(form, sigma, 3.0, 1.0).unwrap();
                assert!(p >= last - 1e-15 && p > 0.0 && p <= 1.0);
                last = p;
            }
        }
    }

    #[test]
    fn loglik_single_point_and_additivity() {
        let spec = DetectionSpec::new(DetectionForm::HalfNormal, 1.0);
        let theta = [0.4_f64.ln()];
        let one = vec![DetectionDatum {
            distance: 0.0,
            covariates: no_covs(),
        }];
        let p = detection_probability(&theta, &no_covs(), &spec).unwrap();
        let ll = detection_loglik(&one, &theta, &spec).unwrap();
        assert!((ll - (1.0 / p).ln()).abs() < 1e-12);
        let two = vec![one[0].clone(), one[0].clone()];
        assert!((detection_loglik(&two, &theta, &spec).unwrap() - 2.0 * ll).abs() < 1e-12);
        assert!(detection_loglik(&[], &theta, &spec).is_err());
    }

    fn simulate_hn(n: usize, sigma: f64, w: f64, seed: u64) -> Vec<DetectionDatum> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let y: f64 = rng.random::<f64>() * w;
            if rng.random::<f64>() < (-(y * y) / (2.0 * sigma * sigma)).exp() {
                out.push(DetectionDatum {
                    distance: y,
                    covariates: no_covs(),
                });
            }
        }
        out
    }

    #[test]
    fn fit_recovers_half_normal_scale() {
        let data = simulate_hn(1000, 300.0, 870.0, 7);
        let spec = DetectionSpec::new(DetectionForm::HalfNormal, 870.0);
        let fit = fit_detection(&data, &spec).unwrap();
        let se = fit.std_errors()[0];
        assert!(((fit.theta[0] - 300.0_f64.ln()) / se).abs() < 3.0);
        assert!(se > 0.0 && se < 0.1);
        assert!(fit.aic() > 0.0 || fit.aic() < 0.0);
    }

    #[test]
    fn fit_rejects_empty_and_missing_level() {
        let spec = DetectionSpec::new(DetectionForm::HalfNormal, 1.0);
        assert!(fit_detection(&[], &spec).is_err());
        let spec = spec.with_factor("b", &["a", "z"]);
        let data = vec![DetectionDatum {
            distance: 0.1,
            covariates: Covariates::from([("b".to_string(), CovValue::Level("a".into()))]),
        }];
        assert!(fit_detection(&data, &spec).is_err());
    }

    #[test]
    fn kappa_matches_analytic_half_normal_derivative() {
        let w = 1.0;
        for &sigma in &[0.2, 0.5, 1.0, 3.0] {
            let fit = DetectionFit {
                spec: DetectionSpec::new(DetectionForm::HalfNormal, w),
                theta: DVector::from_vec(vec![f64::ln(sigma)]),
                v_theta: DMatrix::identity(1, 1),
                loglik: 0.0,
                n_obs: 1,
                iterations: 0,
            };
            let k = detection_kappa(&fit, &[no_covs()]).unwrap();
            let x = w / (sigma * 2.0_f64.sqrt());
            let analytic = 1.0 - x * 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp() / erf(x);
            let rel = (k.values[(0, 0)] - analytic).abs() / analytic.abs();
            assert!(rel < 1e-5, "sigma {sigma}: {} vs {analytic}", k.values[(0, 0)]);
            assert!((hn_p_closed_form(sigma, w) - fit.p_at(&no_covs()).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn kappa_zero_for_absent_level_and_identical_rows() {
        let spec = DetectionSpec::new(DetectionForm::HalfNormal, 1.0).with_factor("b", &["0", "1", "2"]);
        let fit = DetectionFit {
            spec,
            theta: DVector::from_vec(vec![-0.7, -0.2, -0.4]),
            v_theta: DMatrix::identity(3, 3) * 0.01,
            loglik: 0.0,
            n_obs: 1,
            iterations: 0,
        };
        let lvl = |s: &str| Covariates::from([("b".to_string(), CovValue::Level(s.into()))]);
        let k = detection_kappa(&fit, &[lvl("1"), lvl("1"), lvl("0")]).unwrap();
        assert_eq!(k.values[(0, 2)], 0.0);
        assert_eq!(k.values.row(0), k.values.row(1));
        assert_eq!(k.values[(2, 1)], 0.0);
        assert_eq!(k.values[(2, 2)], 0.0);
        assert!(k.values[(0, 1)] != 0.0);
    }

    #[test]
    fn report_round_trip() {
        let data = simulate_hn(200, 0.5, 1.0, 3);
        let fit = fit_detection(&data, &DetectionSpec::new(DetectionForm::HalfNormal, 1.0)).unwrap();
        let json = serde_json::to_string(&fit.report()).unwrap();
        let back: DetectionReport = serde_json::from_str(&json).unwrap();
        let refit = DetectionFit::from_report(&back).unwrap();
        assert_eq!(refit.theta, fit.theta);
        assert_eq!(refit.v_theta, fit.v_theta);
    }
}
