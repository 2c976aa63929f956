//! Penalized GAM fitting: PIRLS inner loop, Laplace REML and smoothing parameter selection.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::family::{Family, TWEEDIE_POWER_GRID};
use crate::linalg;
use crate::optim::{golden_section, minimize_bfgs, BfgsOptions};
use crate::smooth::{DesignBundle, LambdaRule};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;
const MAX_ETA: f64 = 700.0;

#[derive(Debug, Clone, Copy)]
pub struct PirlsOptions {
    /// Relative change in penalized deviance that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for PirlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            max_halvings: 30,
        }
    }
}

impl PirlsOptions {
    /// Tight settings used inside smoothing parameter optimization, where the criterion is
    /// differenced numerically.
    pub fn tight() -> Self {
        Self {
            tol: 1e-13,
            ..Self::default()
        }
    }
}

/// Converged state of one penalized fit at fixed smoothing and scale parameters.
#[derive(Debug, Clone)]
pub struct PirlsFit {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    pub weights: DVector<f64>,
    pub xtwx: DMatrix<f64>,
    /// XᵀWX + S_λ.
    pub hessian: DMatrix<f64>,
    pub hessian_inv: DMatrix<f64>,
    pub log_det_hessian: f64,
    pub deviance: f64,
    /// βᵀ S_λ β.
    pub penalty: f64,
    pub iterations: usize,
}

impl PirlsFit {
    pub fn v_beta(&self, phi: f64) -> DMatrix<f64> {
        &self.hessian_inv * phi
    }

    /// Diagonal of the influence matrix H⁻¹XᵀWX.
    pub fn edf_diag(&self) -> Vec<f64> {
        let f = &self.hessian_inv * &self.xtwx;
        (0..f.nrows()).map(|i| f[(i, i)]).collect()
    }
}

/// Scale-dependent part of the log-likelihood: Σ log f(y; μ, φ).
pub fn log_likelihood(family: Family, y: &DVector<f64>, mu: &DVector<f64>, phi: f64) -> f64 {
    y.iter().zip(mu.iter()).map(|(&yi, &mi)| family.log_density(yi, mi, phi)).sum()
}

pub fn deviance(family: Family, y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    y.iter().zip(mu.iter()).map(|(&yi, &mi)| family.unit_deviance(yi, mi)).sum()
}

/// Pearson estimate Σ (y − μ)² / V(μ) / (n − edf).
pub fn pearson_scale(family: Family, y: &DVector<f64>, mu: &DVector<f64>, edf: f64) -> f64 {
    let chi2: f64 = y
        .iter()
        .zip(mu.iter())
        .map(|(&yi, &mi)| (yi - mi).powi(2) / family.variance(mi))
        .sum();
    chi2 / (y.len() as f64 - edf).max(1.0)
}

fn check_response(family: Family, y: &DVector<f64>, offset: &DVector<f64>, n: usize) -> Result<()> {
    if y.len() != n || offset.len() != n {
        return Err(DsmError::invalid(format!(
            "response ({}) and offset ({}) must match the design rows ({n})",
            y.len(),
            offset.len()
        )));
    }
    if y.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
        return Err(DsmError::invalid("response and offset must be finite"));
    }
    if family.is_log_link() {
        if y.iter().any(|&v| v < 0.0) {
            return Err(DsmError::invalid("negative response under a log-link family"));
        }
        if y.iter().all(|&v| v == 0.0) {
            return Err(DsmError::invalid("response is zero everywhere"));
        }
    }
    Ok(())
}

/// Penalized IRLS on a raw design with a full p × p penalty matrix (deviance scale).
pub fn pirls_raw(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    family: Family,
    opts: &PirlsOptions,
) -> Result<PirlsFit> {
    family.validate()?;
    let n = x.nrows();
    check_response(family, y, offset, n)?;

    let ybar = y.mean();
    let mut mu = if family.is_log_link() {
        y.map(|v| ((v + ybar) / 2.0).max(1e-3 * ybar))
    } else {
        y.clone()
    };
    let mut eta = mu.map(|m| family.link(m));
    let mut beta: Option<DVector<f64>> = None;
    let mut pd_old = f64::INFINITY;
    let mut iterations = 0;

    let penalized_dev = |b: &DVector<f64>, mu: &DVector<f64>| -> f64 {
        deviance(family, y, mu) + linalg::quad_form(s, b)
    };
    let eval = |b: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>)> {
        let e = x * b + offset;
        if e.iter().any(|v| !v.is_finite() || (family.is_log_link() && *v > MAX_ETA)) {
            return None;
        }
        let m = e.map(|v| family.linkinv(v));
        Some((e, m))
    };

    loop {
        if iterations >= opts.max_iter {
            return Err(DsmError::NonConvergence {
                what: "PIRLS".into(),
                iterations,
                trace: Vec::new(),
            });
        }
        iterations += 1;
        let w = mu.map(|m| family.working_weight(m));
        if w.iter().any(|v| !v.is_finite()) {
            return Err(DsmError::numerical("PIRLS: non-finite working weights"));
        }
        let z = DVector::from_fn(n, |i, _| eta[i] - offset[i] + (y[i] - mu[i]) / family.mu_eta(mu[i]));
        let h = linalg::weighted_gram(x, &w) + s;
        let rhs = x.transpose() * w.component_mul(&z);
        let chol = linalg::symmetrized(&h).cholesky().ok_or_else(|| DsmError::Singular {
            what: "PIRLS penalized Hessian".into(),
            condition: linalg::condition_number(&h),
        })?;
        let proposal = chol.solve(&rhs);

        let mut candidate = proposal.clone();
        let mut accepted = None;
        let mut best_seen = f64::INFINITY;
        let slack = 1e-12 * pd_old.abs().max(1.0);
        for _ in 0..=opts.max_halvings {
            if let Some((e, m)) = eval(&candidate) {
                let pd = penalized_dev(&candidate, &m);
                best_seen = best_seen.min(pd);
                if pd.is_finite() && (pd <= pd_old + slack || beta.is_none()) {
                    accepted = Some((e, m, pd));
                    break;
                }
            }
            match &beta {
                Some(old) => candidate = (old + &candidate) * 0.5,
                None => candidate *= 0.5,
            }
        }
        let Some((e, m, pd)) = accepted else {
            // Round-off can stall the last step; a stationary iterate is still a solution.
            if beta.is_some() && (best_seen - pd_old).abs() <= 1e-6 * pd_old.abs().max(1.0) {
                break;
            }
            return Err(DsmError::numerical(format!(
                "PIRLS diverged: step halving exhausted after {} halvings",
                opts.max_halvings
            )));
        };
        let change = (pd_old - pd).abs();
        let step = beta.as_ref().map_or(f64::INFINITY, |b| (&candidate - b).amax());
        beta = Some(candidate);
        eta = e;
        mu = m;
        let converged = change <= opts.tol * (pd.abs() + 0.1) || step < 1e-12;
        pd_old = pd;
        if converged && iterations > 1 {
            break;
        }
    }

    let beta = beta.expect("at least one PIRLS step");
    let weights = mu.map(|m| family.working_weight(m));
    let xtwx = linalg::symmetrized(&linalg::weighted_gram(x, &weights));
    let hessian = linalg::symmetrized(&(&xtwx + s));
    let (hessian_inv, log_det_hessian) = linalg::spd_inverse_logdet(&hessian, "penalized Hessian")?;
    Ok(PirlsFit {
        deviance: deviance(family, y, &mu),
        penalty: linalg::quad_form(s, &beta),
        beta,
        eta,
        mu,
        weights,
        xtwx,
        hessian,
        hessian_inv,
        log_det_hessian,
        iterations,
    })
}

/// Penalty multipliers in deviance scale: free terms use `lambda`, scale-tied terms use φ so
/// their prior precision S/φ stays fixed.
pub fn penalty_multipliers(design: &DesignBundle, lambda: &[f64], phi: f64) -> Result<Vec<f64>> {
    let free = design.free_penalties();
    if lambda.len() != free {
        return Err(DsmError::invalid(format!(
            "expected {free} smoothing parameters, got {}",
            lambda.len()
        )));
    }
    let mut it = lambda.iter();
    Ok(design
        .penalties
        .iter()
        .map(|p| match p.rule {
            LambdaRule::Free => *it.next().unwrap(),
            LambdaRule::ScaleTied => phi,
        })
        .collect())
}

pub fn total_penalty(design: &DesignBundle, mult: &[f64]) -> DMatrix<f64> {
    let p = design.ncols();
    let mut s = DMatrix::zeros(p, p);
    for (pen, &m) in design.penalties.iter().zip(mult) {
        let w = pen.width();
        let mut v = s.view_mut((pen.start, pen.start), (w, w));
        v += &pen.block * m;
    }
    s
}

/// Penalties sharing columns, handled together for the pseudo-determinant.
#[derive(Debug, Clone)]
struct PenaltyGroup {
    start: usize,
    width: usize,
    members: Vec<usize>,
    rank: usize,
    /// Orthonormal basis of the range of the summed penalty (multi-member groups).
    range: DMatrix<f64>,
    /// log |S_k|₊ for single-member groups.
    single_log_det: f64,
}

#[derive(Debug, Clone)]
pub struct PenaltyStructure {
    groups: Vec<PenaltyGroup>,
    pub rank: usize,
}

impl PenaltyStructure {
    pub fn new(design: &DesignBundle) -> Result<Self> {
        let mut spans: Vec<(usize, usize, Vec<usize>)> = Vec::new();
        for (k, p) in design.penalties.iter().enumerate() {
            let (a, b) = (p.start, p.start + p.width());
            if let Some(g) = spans.iter_mut().find(|g| a < g.1 && g.0 < b) {
                g.0 = g.0.min(a);
                g.1 = g.1.max(b);
                g.2.push(k);
            } else {
                spans.push((a, b, vec![k]));
            }
        }
        let mut groups = Vec::new();
        for (a, b, members) in spans {
            let width = b - a;
            let mut total = DMatrix::zeros(width, width);
            for &k in &members {
                let p = &design.penalties[k];
                let w = p.width();
                let scale = p.block.norm().max(f64::MIN_POSITIVE);
                let mut v = total.view_mut((p.start - a, p.start - a), (w, w));
                v += &p.block / scale;
            }
            let rank = linalg::numerical_rank(&total, 1e-9);
            let (range, single_log_det) = if members.len() == 1 {
                let p = &design.penalties[members[0]];
                (DMatrix::zeros(0, 0), linalg::log_pseudo_det(&p.block, rank)?)
            } else {
                let eig = nalgebra::SymmetricEigen::new(linalg::symmetrized(&total));
                let mut idx: Vec<usize> = (0..width).collect();
                idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
                let cols: Vec<DVector<f64>> = idx[..rank].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
                (DMatrix::from_columns(&cols), 0.0)
            };
            groups.push(PenaltyGroup {
                start: a,
                width,
                members,
                rank,
                range,
                single_log_det,
            });
        }
        let rank = groups.iter().map(|g| g.rank).sum();
        Ok(Self { groups, rank })
    }

    /// log |Σ_k m_k S_k|₊ (deviance scale multipliers).
    pub fn log_pseudo_det(&self, design: &DesignBundle, mult: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for g in &self.groups {
            if g.rank == 0 {
                continue;
            }
            if g.members.len() == 1 {
                let m = mult[g.members[0]];
                if m <= 0.0 {
                    return Err(DsmError::numerical("non-positive smoothing parameter"));
                }
                total += g.rank as f64 * m.ln() + g.single_log_det;
                continue;
            }
            let mut s = DMatrix::zeros(g.width, g.width);
            for &k in &g.members {
                let p = &design.penalties[k];
                let w = p.width();
                let mut v = s.view_mut((p.start - g.start, p.start - g.start), (w, w));
                v += &p.block * mult[k];
            }
            let reduced = linalg::symmetrized(&(g.range.transpose() * &s * &g.range));
            total += match reduced.clone().cholesky() {
                Some(ch) => {
                    let l = ch.l();
                    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
                }
                None => linalg::log_pseudo_det(&reduced, g.rank)?,
            };
        }
        Ok(total)
    }
}

/// Laplace REML pieces that do not depend on φ, evaluated at a PIRLS solution.
#[derive(Debug, Clone)]
pub struct RemlPieces {
    pub log_det_s: f64,
    pub rank: usize,
    pub p: usize,
}

/// Laplace-approximate restricted log marginal likelihood (to be maximized).
pub fn reml_value(family: Family, y: &DVector<f64>, fit: &PirlsFit, pieces: &RemlPieces, phi: f64) -> f64 {
    let ll = log_likelihood(family, y, &fit.mu, phi);
    let (r, p) = (pieces.rank as f64, pieces.p as f64);
    ll - fit.penalty / (2.0 * phi) + 0.5 * (pieces.log_det_s - r * phi.ln()) - 0.5 * (fit.log_det_hessian - p * phi.ln())
        + 0.5 * (p - r) * LOG_2PI
}

/// Fits at fixed (λ, φ). Returns the converged state and the φ-free REML pieces.
pub fn pirls_fit(
    design: &DesignBundle,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    family: Family,
    lambda: &[f64],
    phi: f64,
    opts: &PirlsOptions,
) -> Result<(PirlsFit, RemlPieces)> {
    let structure = PenaltyStructure::new(design)?;
    pirls_with_structure(design, &structure, y, offset, family, lambda, phi, opts)
}

#[allow(clippy::too_many_arguments)]
fn pirls_with_structure(
    design: &DesignBundle,
    structure: &PenaltyStructure,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    family: Family,
    lambda: &[f64],
    phi: f64,
    opts: &PirlsOptions,
) -> Result<(PirlsFit, RemlPieces)> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(DsmError::invalid(format!("scale parameter must be positive, got {phi}")));
    }
    let mult = penalty_multipliers(design, lambda, phi)?;
    let s = total_penalty(design, &mult);
    let fit = pirls_raw(&design.x, &s, y, offset, family, opts)?;
    let pieces = RemlPieces {
        log_det_s: structure.log_pseudo_det(design, &mult)?,
        rank: structure.rank,
        p: design.ncols(),
    };
    Ok((fit, pieces))
}

/// REML criterion at fixed (λ, φ).
pub fn reml_criterion(
    design: &DesignBundle,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    family: Family,
    lambda: &[f64],
    phi: f64,
) -> Result<f64> {
    let (fit, pieces) = pirls_fit(design, y, offset, family, lambda, phi, &PirlsOptions::tight())?;
    Ok(reml_value(family, y, &fit, &pieces, phi))
}

#[derive(Debug, Clone)]
pub struct GamOptions {
    /// Hold φ fixed instead of estimating it.
    pub fixed_phi: Option<f64>,
    /// For Tweedie, choose the power from the grid by REML.
    pub search_power: bool,
    pub max_outer: usize,
    /// Starting log λ; defaults are derived from the design.
    pub start_rho: Option<Vec<f64>>,
}

impl Default for GamOptions {
    fn default() -> Self {
        Self {
            fixed_phi: None,
            search_power: false,
            max_outer: 200,
            start_rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEdf {
    pub name: String,
    pub edf: f64,
    pub width: usize,
    pub penalized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GamFit {
    pub design: DesignBundle,
    pub family: Family,
    pub y: DVector<f64>,
    pub offset: DVector<f64>,
    pub beta: DVector<f64>,
    pub v_beta: DMatrix<f64>,
    /// Free smoothing parameters, in penalty order.
    pub lambda: Vec<f64>,
    pub penalty_names: Vec<String>,
    pub phi: f64,
    pub term_edf: Vec<TermEdf>,
    pub edf_total: f64,
    pub reml: f64,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    pub deviance: f64,
    pub null_deviance: f64,
    pub outer_iterations: usize,
}

impl GamFit {
    pub fn deviance_explained(&self) -> f64 {
        if self.null_deviance > 0.0 {
            1.0 - self.deviance / self.null_deviance
        } else {
            0.0
        }
    }

    pub fn edf_of(&self, term: &str) -> Option<f64> {
        self.term_edf.iter().find(|t| t.name == term).map(|t| t.edf)
    }

    pub fn report(&self) -> GamReport {
        GamReport {
            family: self.family.name(),
            phi: self.phi,
            tweedie_power: match self.family {
                Family::Tweedie { power } => Some(power),
                _ => None,
            },
            reml: self.reml,
            deviance_explained: self.deviance_explained(),
            edf_total: self.edf_total,
            terms: self.term_edf.clone(),
            smoothing_parameters: self
                .penalty_names
                .iter()
                .cloned()
                .zip(self.lambda.iter().copied())
                .collect(),
            n: self.y.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GamReport {
    pub family: String,
    pub phi: f64,
    pub tweedie_power: Option<f64>,
    pub reml: f64,
    pub deviance_explained: f64,
    pub edf_total: f64,
    pub terms: Vec<TermEdf>,
    pub smoothing_parameters: Vec<(String, f64)>,
    pub n: usize,
}

/// φ maximizing REML for a fixed PIRLS solution (β̂ does not depend on φ unless some
/// penalty is scale-tied, in which case φ must be fixed by the caller).
fn profile_phi(family: Family, y: &DVector<f64>, fit: &PirlsFit, pieces: &RemlPieces, edf: f64) -> Result<f64> {
    match family {
        Family::Poisson => Ok(1.0),
        Family::QuasiPoisson => Ok(pearson_scale(family, y, &fit.mu, edf).max(1e-8)),
        Family::Gaussian => {
            let dof = (y.len() as f64 - (pieces.p - pieces.rank) as f64).max(1.0);
            Ok(((fit.deviance + fit.penalty) / dof).max(1e-12))
        }
        Family::Tweedie { .. } => {
            let centre = pearson_scale(family, y, &fit.mu, edf).max(1e-6).ln();
            let mut half = 1.5;
            for _ in 0..6 {
                let r = golden_section(
                    |lp| Ok(-reml_value(family, y, fit, pieces, lp.exp())),
                    centre - half,
                    centre + half,
                    1e-7,
                )?;
                if !(r.at_lower || r.at_upper) {
                    return Ok(r.x.exp());
                }
                half *= 2.0;
            }
            Err(DsmError::numerical("Tweedie scale estimate failed to bracket"))
        }
    }
}

fn null_deviance(family: Family, y: &DVector<f64>, offset: &DVector<f64>) -> Result<f64> {
    let x = DMatrix::from_element(y.len(), 1, 1.0);
    let s = DMatrix::zeros(1, 1);
    let fit = pirls_raw(&x, &s, y, offset, family, &PirlsOptions::default())?;
    Ok(fit.deviance)
}

/// Starting log λ: penalty scaled to match the data information in its block.
fn default_rho(design: &DesignBundle, family: Family, y: &DVector<f64>) -> Vec<f64> {
    let ybar = y.mean().abs().max(1e-3);
    let w = family.working_weight(if family.is_log_link() { ybar } else { 1.0 });
    design
        .penalties
        .iter()
        .filter(|p| p.rule == LambdaRule::Free)
        .map(|p| {
            let block = design.x.columns(p.start, p.width());
            let info = block.iter().map(|v| v * v).sum::<f64>() * w;
            let pen = (0..p.width()).map(|i| p.block[(i, i)]).sum::<f64>().max(1e-12);
            (info / pen).max(1e-12).ln()
        })
        .collect()
}

struct Evaluation {
    fit: PirlsFit,
    phi: f64,
    reml: f64,
}

fn evaluate(
    design: &DesignBundle,
    structure: &PenaltyStructure,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    family: Family,
    rho: &[f64],
    fixed_phi: Option<f64>,
) -> Result<Evaluation> {
    let lambda: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
    let phi0 = fixed_phi.unwrap_or(1.0);
    let (fit, pieces) = pirls_with_structure(design, structure, y, offset, family, &lambda, phi0, &PirlsOptions::tight())?;
    let phi = match fixed_phi {
        Some(p) => p,
        None => {
            let edf: f64 = fit.edf_diag().iter().sum();
            profile_phi(family, y, &fit, &pieces, edf)?
        }
    };
    let reml = reml_value(family, y, &fit, &pieces, phi);
    Ok(Evaluation { fit, phi, reml })
}

/// Chooses log λ (and φ, and the Tweedie power when requested) by maximizing REML.
pub fn optimize_lambda(
    design: &DesignBundle,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    family: Family,
    opts: &GamOptions,
) -> Result<GamFit> {
    family.validate()?;
    if design.penalties.iter().any(|p| p.rule == LambdaRule::ScaleTied) && opts.fixed_phi.is_none() && !family.scale_is_fixed() {
        return Err(DsmError::invalid(
            "scale-tied penalties need a fixed scale parameter; profile it in an outer search",
        ));
    }
    if let (Family::Tweedie { .. }, true) = (family, opts.search_power) {
        let fits: Vec<Result<GamFit>> = TWEEDIE_POWER_GRID
            .par_iter()
            .map(|&q| {
                let o = GamOptions {
                    search_power: false,
                    ..opts.clone()
                };
                optimize_lambda(design, y, offset, Family::Tweedie { power: q }, &o)
            })
            .collect();
        let mut best: Option<GamFit> = None;
        let mut last_err = None;
        for f in fits {
            match f {
                Ok(f) => {
                    if best.as_ref().is_none_or(|b| f.reml > b.reml) {
                        best = Some(f);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        return best.ok_or_else(|| last_err.expect("grid is non-empty"));
    }

    let fixed_phi = if family.scale_is_fixed() { Some(1.0) } else { opts.fixed_phi };
    let structure = PenaltyStructure::new(design)?;
    let n_free = design.free_penalties();
    let rho0 = match &opts.start_rho {
        Some(r) if r.len() == n_free => r.clone(),
        Some(r) => {
            return Err(DsmError::invalid(format!("expected {n_free} starting log λ, got {}", r.len())));
        }
        None => default_rho(design, family, y),
    };

    let (rho, outer_iterations) = if n_free == 0 {
        (Vec::new(), 0)
    } else {
        let bfgs = BfgsOptions {
            max_iter: opts.max_outer,
            grad_tol: 1e-4,
            fd_step: 1e-4,
            lower: Some(rho0.iter().map(|r| r - 15.0).collect()),
            upper: Some(rho0.iter().map(|r| r + 18.0).collect()),
            max_step: 4.0,
        };
        let objective = |r: &DVector<f64>| -> Result<f64> {
            match evaluate(design, &structure, y, offset, family, r.as_slice(), fixed_phi) {
                Ok(e) => Ok(-e.reml),
                Err(DsmError::NonConvergence { .. }) | Err(DsmError::Singular { .. }) | Err(DsmError::Numerical(_)) => {
                    Ok(f64::INFINITY)
                }
                Err(e) => Err(e),
            }
        };
        let res = minimize_bfgs(objective, DVector::from_vec(rho0), &bfgs, "smoothing parameter selection")?;
        (res.x.as_slice().to_vec(), res.iterations)
    };

    let ev = evaluate(design, &structure, y, offset, family, &rho, fixed_phi)?;
    assemble(design, y, offset, family, rho, ev, outer_iterations)
}

fn assemble(
    design: &DesignBundle,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    family: Family,
    rho: Vec<f64>,
    ev: Evaluation,
    outer_iterations: usize,
) -> Result<GamFit> {
    let diag = ev.fit.edf_diag();
    let mut term_edf: Vec<TermEdf> = design
        .terms
        .iter()
        .map(|t| TermEdf {
            name: t.name.clone(),
            edf: diag[t.start..t.start + t.width].iter().sum(),
            width: t.width,
            penalized: t.penalized,
        })
        .collect();
    let covered: usize = design.terms.iter().map(|t| t.width).sum();
    if covered < design.ncols() {
        term_edf.push(TermEdf {
            name: "(extra)".into(),
            edf: diag[covered..].iter().sum(),
            width: design.ncols() - covered,
            penalized: true,
        });
    }
    let mut v_beta = ev.fit.v_beta(ev.phi);
    linalg::symmetrize(&mut v_beta);
    Ok(GamFit {
        design: design.clone(),
        family,
        y: y.clone(),
        offset: offset.clone(),
        beta: ev.fit.beta.clone(),
        v_beta,
        lambda: rho.iter().map(|r| r.exp()).collect(),
        penalty_names: design
            .penalties
            .iter()
            .filter(|p| p.rule == LambdaRule::Free)
            .map(|p| p.name.clone())
            .collect(),
        phi: ev.phi,
        edf_total: diag.iter().sum(),
        term_edf,
        reml: ev.reml,
        eta: ev.fit.eta.clone(),
        mu: ev.fit.mu.clone(),
        deviance: ev.fit.deviance,
        null_deviance: null_deviance(family, y, offset)?,
        outer_iterations,
    })
}

/// Full fit at given λ and φ (no optimization); φ is profiled when `phi` is `None`.
pub fn fit_fixed(
    design: &DesignBundle,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    family: Family,
    lambda: &[f64],
    phi: Option<f64>,
) -> Result<GamFit> {
    let structure = PenaltyStructure::new(design)?;
    let rho: Vec<f64> = lambda.iter().map(|l| l.ln()).collect();
    let fixed = if family.scale_is_fixed() { Some(1.0) } else { phi };
    let ev = evaluate(design, &structure, y, offset, family, &rho, fixed)?;
    assemble(design, y, offset, family, rho, ev, 0)
}
