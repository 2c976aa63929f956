//! Detection uncertainty carried into the GAM as a random effect δ with design κ.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Segment};
use crate::detection::{detection_kappa, DetectionFit, KappaMatrix};
use crate::error::{DsmError, Result};
use crate::family::Family;
use crate::gam::{optimize_lambda, GamFit, GamOptions};
use crate::linalg;
use crate::optim::golden_section;
use crate::smooth::{build_design, DesignBundle, Frame, LambdaRule, Penalty, SmoothSpec, TermInfo};

/// Name of the δ term in augmented designs.
pub const DELTA_TERM: &str = "detection:delta";

/// Rows entering the density model: counts, areas, density covariates and the covariates
/// that set each row's detectability.
#[derive(Debug, Clone)]
pub struct DsmInput {
    pub frame: Frame,
    pub detection_rows: Vec<Covariates>,
    pub area: Vec<f64>,
    pub y: DVector<f64>,
    /// Parametric factor main effects (name, levels).
    pub factors: Vec<(String, Vec<String>)>,
}

impl DsmInput {
    pub fn from_segments(segments: &[Segment]) -> Self {
        Self {
            frame: Frame::from_segments(segments),
            detection_rows: segments.iter().map(|s| s.effort.clone()).collect(),
            area: segments.iter().map(|s| s.area).collect(),
            y: DVector::from_iterator(segments.len(), segments.iter().map(|s| s.count as f64)),
            factors: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.area.len()
    }

    /// p̂ per row at θ̂.
    pub fn detectability(&self, detection: &DetectionFit) -> Result<Vec<f64>> {
        self.detection_rows.iter().map(|c| detection.p_at(c)).collect()
    }

    /// log(a_i p̂_i).
    pub fn offset(&self, detection: &DetectionFit) -> Result<DVector<f64>> {
        let p = self.detectability(detection)?;
        let mut off = DVector::zeros(self.n());
        for i in 0..self.n() {
            if !(self.area[i] > 0.0) {
                return Err(DsmError::invalid(format!("row {}: area must be positive", i + 1)));
            }
            off[i] = (self.area[i] * p[i]).ln();
        }
        Ok(off)
    }

    pub fn design(&self, smooths: &[SmoothSpec]) -> Result<DesignBundle> {
        build_design(smooths, &self.factors, &self.frame)
    }
}

/// Appends κ columns and a δ penalty V_θ⁻¹ whose multiplier is tied to φ, so the δ prior is
/// N(0, V_θ) whatever the scale.
pub fn augment_design(design: &DesignBundle, kappa: &KappaMatrix, v_theta: &DMatrix<f64>) -> Result<DesignBundle> {
    let (n, p, k) = (design.nrows(), design.ncols(), kappa.ncols());
    if kappa.nrows() != n {
        return Err(DsmError::invalid(format!(
            "kappa has {} rows, design has {n}",
            kappa.nrows()
        )));
    }
    if v_theta.nrows() != k || v_theta.ncols() != k {
        return Err(DsmError::invalid("V_theta does not match the kappa columns"));
    }
    let precision = match linalg::spd_inverse(v_theta, "V_theta") {
        Ok(m) => m,
        Err(_) => {
            let ridge = 1e-8 * v_theta.trace().abs().max(f64::MIN_POSITIVE) / k as f64;
            warn!("V_theta is singular; adding ridge {ridge:.3e}");
            let reg = v_theta + DMatrix::<f64>::identity(k, k) * ridge;
            linalg::spd_inverse(&reg, "regularized V_theta")?
        }
    };
    let mut x = DMatrix::zeros(n, p + k);
    x.view_mut((0, 0), (n, p)).copy_from(&design.x);
    x.view_mut((0, p), (n, k)).copy_from(&kappa.values);
    let mut out = design.clone();
    out.x = x;
    out.penalties.push(Penalty::new(DELTA_TERM, p, precision, LambdaRule::ScaleTied));
    out.terms.push(TermInfo {
        name: DELTA_TERM.into(),
        start: p,
        width: k,
        penalized: true,
    });
    out.extra_columns += k;
    Ok(out)
}

/// Prior covariance φ (m S_δ)⁻¹ of the δ block at scale φ, with m the tied multiplier.
pub fn delta_prior_covariance(design: &DesignBundle, phi: f64) -> Result<DMatrix<f64>> {
    let pen = design
        .penalties
        .iter()
        .find(|p| p.rule == LambdaRule::ScaleTied)
        .ok_or_else(|| DsmError::invalid("design has no scale-tied block"))?;
    let mult = phi;
    Ok(linalg::spd_inverse(&(&pen.block * mult), "delta precision")? * phi)
}

#[derive(Debug, Clone)]
pub struct VarpropOptions {
    pub phi_lower: f64,
    pub phi_upper: f64,
    /// Golden-section tolerance in log φ.
    pub phi_tol: f64,
    pub max_doublings: usize,
    pub gam: GamOptions,
}

impl Default for VarpropOptions {
    fn default() -> Self {
        Self {
            phi_lower: 0.05,
            phi_upper: 50.0,
            phi_tol: 1e-3,
            max_doublings: 3,
            gam: GamOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiSearch {
    pub phi_star: f64,
    pub log_range: (f64, f64),
    pub evaluations: usize,
    pub at_boundary: bool,
}

#[derive(Debug, Clone)]
pub struct VarpropFit {
    /// Fit over the augmented design [X | κ]; its `v_beta` is the joint covariance of (β, δ).
    pub gam: GamFit,
    pub delta_hat: DVector<f64>,
    pub phi_star: f64,
    pub detection: DetectionFit,
    pub kappa: KappaMatrix,
    pub phi_search: Option<PhiSearch>,
    pub warnings: Vec<String>,
}

impl VarpropFit {
    pub fn v_joint(&self) -> &DMatrix<f64> {
        &self.gam.v_beta
    }

    pub fn n_beta(&self) -> usize {
        self.gam.design.n_predictive()
    }

    pub fn beta_hat(&self) -> DVector<f64> {
        self.gam.beta.rows(0, self.n_beta()).into_owned()
    }

    /// θ̂ + δ̂.
    pub fn theta_corrected(&self) -> DVector<f64> {
        &self.detection.theta + &self.delta_hat
    }

    /// Exact p(θ̂ + δ̂, z).
    pub fn corrected_p(&self, covs: &Covariates) -> Result<f64> {
        self.detection.p_at_theta(self.theta_corrected().as_slice(), covs)
    }
}

/// Resolves the Tweedie power when it is to be searched; other families pass through.
fn resolve_family(naive: &GamFit) -> Family {
    naive.family
}

/// Standard GAM with offset log(a_i p̂_i), detection treated as known.
pub fn naive_fit(
    input: &DsmInput,
    detection: &DetectionFit,
    smooths: &[SmoothSpec],
    family: Family,
    opts: &GamOptions,
) -> Result<GamFit> {
    let design = input.design(smooths)?;
    let offset = input.offset(detection)?;
    optimize_lambda(&design, &input.y, &offset, family, opts)
}

/// Joint fit with the δ random effect. `family` should already carry its final Tweedie power
/// (for instance from a naive fit); φ is profiled by golden-section search on log φ.
pub fn fit_varprop(
    input: &DsmInput,
    detection: &DetectionFit,
    smooths: &[SmoothSpec],
    family: Family,
    opts: &VarpropOptions,
) -> Result<VarpropFit> {
    let base = input.design(smooths)?;
    let offset = input.offset(detection)?;
    let kappa = detection_kappa(detection, &input.detection_rows)?;
    fit_varprop_with(&base, &input.y, &offset, detection, kappa, family, opts)
}

/// As [`fit_varprop`], from an already built base design, offset and κ.
pub fn fit_varprop_with(
    base: &DesignBundle,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    detection: &DetectionFit,
    kappa: KappaMatrix,
    family: Family,
    opts: &VarpropOptions,
) -> Result<VarpropFit> {
    let design = augment_design(base, &kappa, &detection.v_theta)?;
    let mut warnings = Vec::new();
    let gam_opts = GamOptions {
        fixed_phi: None,
        search_power: false,
        ..opts.gam.clone()
    };

    let (gam, phi_search) = if family.scale_is_fixed() {
        (optimize_lambda(&design, y, offset, family, &gam_opts)?, None)
    } else {
        let fit_at = |log_phi: f64| -> Result<GamFit> {
            let o = GamOptions {
                fixed_phi: Some(log_phi.exp()),
                ..gam_opts.clone()
            };
            optimize_lambda(&design, y, offset, family, &o)
        };
        let (mut lo, mut hi) = (opts.phi_lower.ln(), opts.phi_upper.ln());
        let mut evaluations = 0;
        let mut doublings = 0;
        let result = loop {
            let r = golden_section(
                |lp| match fit_at(lp) {
                    Ok(f) => Ok(-f.reml),
                    Err(DsmError::NonConvergence { .. }) | Err(DsmError::Numerical(_)) | Err(DsmError::Singular { .. }) => {
                        Ok(f64::INFINITY)
                    }
                    Err(e) => Err(e),
                },
                lo,
                hi,
                opts.phi_tol,
            )?;
            evaluations += r.evaluations;
            if !(r.at_lower || r.at_upper) || doublings >= opts.max_doublings {
                break r;
            }
            doublings += 1;
            let width = hi - lo;
            if r.at_lower {
                lo -= width;
            } else {
                hi += width;
            }
        };
        let at_boundary = result.at_lower || result.at_upper;
        if at_boundary {
            let msg = format!(
                "phi search ended at the boundary of [{:.4}, {:.4}]; widen the range",
                lo.exp(),
                hi.exp()
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        let gam = fit_at(result.x)?;
        (
            gam,
            Some(PhiSearch {
                phi_star: result.x.exp(),
                log_range: (lo, hi),
                evaluations,
                at_boundary,
            }),
        )
    };

    let p = design.n_predictive();
    let delta_hat = gam.beta.rows(p, kappa.ncols()).into_owned();
    Ok(VarpropFit {
        phi_star: gam.phi,
        gam,
        delta_hat,
        detection: detection.clone(),
        kappa,
        phi_search,
        warnings,
    })
}

/// Naive fit followed by the joint fit at the naive fit's family (fixing any searched
/// Tweedie power). Returns both.
pub fn fit_both(
    input: &DsmInput,
    detection: &DetectionFit,
    smooths: &[SmoothSpec],
    family: Family,
    opts: &VarpropOptions,
) -> Result<(GamFit, VarpropFit)> {
    let naive = naive_fit(input, detection, smooths, family, &opts.gam)?;
    let mut vopts = opts.clone();
    vopts.gam.start_rho = Some(naive.lambda.iter().map(|l| l.ln()).collect());
    vopts.gam.search_power = false;
    let vp = fit_varprop(input, detection, smooths, resolve_family(&naive), &vopts)?;
    Ok((naive, vp))
}
