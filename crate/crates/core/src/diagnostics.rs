//! Model-tension diagnostics: detectability shifts, observed vs expected counts, residual checks.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Discrete, DiscreteCDF, NegativeBinomial, Normal, Poisson};

use crate::data::{CovValue, Covariates};
use crate::detection::{DetectionFit, ScaleTerm};
use crate::error::{DsmError, Result};
use crate::family::{tweedie_cdf, Family};
use crate::gam::GamFit;
use crate::varprop::VarpropFit;

pub const DEFAULT_SHIFT_THRESHOLD: f64 = 1.0;
/// Residual normality is flagged below this p-value.
pub const NORMALITY_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub level: String,
    pub p: f64,
    pub se: f64,
    pub p_corrected: f64,
    pub shift_in_sd: f64,
    pub flagged: bool,
}

impl ShiftRow {
    pub fn new(level: &str, p: f64, se: f64, p_corrected: f64, threshold: f64) -> Self {
        let diff = (p_corrected - p).abs();
        let shift_in_sd = if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        ShiftRow {
            level: level.to_string(),
            p,
            se,
            p_corrected,
            shift_in_sd,
            flagged: shift_in_sd > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub covariate: String,
    pub threshold: f64,
    pub rows: Vec<ShiftRow>,
}

impl ShiftReport {
    pub fn any_flagged(&self) -> bool {
        self.rows.iter().any(|r| r.flagged)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| {} | p(θ̂) | se | p(θ̂+δ̂) | shift (sd) | flag |\n|---|---|---|---|---|---|\n",
            self.covariate
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.2} | {} |\n",
                r.level,
                r.p,
                r.se,
                r.p_corrected,
                r.shift_in_sd,
                if r.flagged { "*" } else { "" }
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,p,se,p_corrected,shift_in_sd,flagged\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.10e},{:.10e},{:.10e},{:.10e},{}\n",
                r.level, r.p, r.se, r.p_corrected, r.shift_in_sd, r.flagged
            ));
        }
        s
    }
}

/// One covariate setting per level of `factor`, other covariates taken from `base`.
pub fn factor_levels(detection: &DetectionFit, factor: &str, base: &Covariates) -> Result<Vec<(String, Covariates)>> {
    let levels = detection
        .spec
        .terms
        .iter()
        .find_map(|t| match t {
            ScaleTerm::Factor { name, levels } if name == factor => Some(levels.clone()),
            _ => None,
        })
        .ok_or_else(|| DsmError::invalid(format!("'{factor}' is not a factor in the detection model")))?;
    Ok(levels
        .into_iter()
        .map(|l| {
            let mut c = base.clone();
            c.insert(factor.to_string(), CovValue::Level(l.clone()));
            (l, c)
        })
        .collect())
}

/// p at θ̂ and at θ̂ + δ for each labelled covariate setting.
pub fn shift_table(
    detection: &DetectionFit,
    delta: &DVector<f64>,
    covariate: &str,
    levels: &[(String, Covariates)],
    threshold: f64,
) -> Result<ShiftReport> {
    if delta.len() != detection.theta.len() {
        return Err(DsmError::invalid("δ̂ length does not match the detection parameters"));
    }
    let corrected = &detection.theta + delta;
    let rows = levels
        .iter()
        .map(|(label, covs)| {
            let p = detection.p_at(covs)?;
            let se = detection.se_p(covs)?;
            let pc = detection.p_at_theta(corrected.as_slice(), covs)?;
            Ok(ShiftRow::new(label, p, se, pc, threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShiftReport {
        covariate: covariate.to_string(),
        threshold,
        rows,
    })
}

pub fn shift_report(fit: &VarpropFit, covariate: &str, levels: &[(String, Covariates)], threshold: f64) -> Result<ShiftReport> {
    shift_table(&fit.detection, &fit.delta_hat, covariate, levels, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsExpRow {
    pub level: String,
    pub segments: usize,
    pub observed: f64,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsExpTable {
    pub covariate: String,
    pub rows: Vec<ObsExpRow>,
}

impl ObsExpTable {
    pub fn total_observed(&self) -> f64 {
        self.rows.iter().map(|r| r.observed).sum()
    }

    pub fn total_expected(&self) -> f64 {
        self.rows.iter().map(|r| r.expected).sum()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | segments | observed | expected |\n|---|---|---|---|\n", self.covariate);
        for r in &self.rows {
            s.push_str(&format!("| {} | {} | {:.0} | {:.2} |\n", r.level, r.segments, r.observed, r.expected));
        }
        s.push_str(&format!(
            "| total | {} | {:.0} | {:.2} |\n",
            self.rows.iter().map(|r| r.segments).sum::<usize>(),
            self.total_observed(),
            self.total_expected()
        ));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,segments,observed,expected\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.10e},{:.10e}\n", r.level, r.segments, r.observed, r.expected));
        }
        s
    }
}

/// Observed counts and fitted means summed by the level of `group_by` in each segment's covariates.
pub fn obs_vs_expected(fit: &GamFit, rows: &[Covariates], group_by: &str) -> Result<ObsExpTable> {
    if rows.len() != fit.y.len() {
        return Err(DsmError::invalid(format!(
            "{} covariate rows for {} fitted segments",
            rows.len(),
            fit.y.len()
        )));
    }
    if !rows.iter().any(|r| r.contains_key(group_by)) {
        return Err(DsmError::invalid(format!("unknown covariate '{group_by}'")));
    }
    let mut table: BTreeMap<String, ObsExpRow> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let level = r.get(group_by).map_or_else(|| "NA".to_string(), |v| v.to_string());
        let e = table.entry(level.clone()).or_insert(ObsExpRow {
            level,
            segments: 0,
            observed: 0.0,
            expected: 0.0,
        });
        e.segments += 1;
        e.observed += fit.y[i];
        e.expected += fit.mu[i];
    }
    Ok(ObsExpTable {
        covariate: group_by.to_string(),
        rows: table.into_values().collect(),
    })
}

/// Table with one row holding every segment.
pub fn obs_vs_expected_total(fit: &GamFit) -> ObsExpTable {
    ObsExpTable {
        covariate: "all".into(),
        rows: vec![ObsExpRow {
            level: "all".into(),
            segments: fit.y.len(),
            observed: fit.y.sum(),
            expected: fit.mu.sum(),
        }],
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Randomized quantile residuals; quasi-Poisson uses a negative binomial with variance φμ.
pub fn quantile_residuals(fit: &GamFit, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = std_normal();
    let clamp = |u: f64| u.clamp(1e-300, 1.0 - 1e-16);
    let mut out = Vec::with_capacity(fit.y.len());
    for (&y, &mu) in fit.y.iter().zip(fit.mu.iter()) {
        let u_draw: f64 = rng.random();
        let u = match fit.family {
            Family::Gaussian => std_normal().cdf((y - mu) / fit.phi.sqrt()),
            Family::Poisson => discrete_u(y, u_draw, |k| poisson_cdf(k, mu), |k| poisson_pmf(k, mu))?,
            Family::QuasiPoisson if fit.phi > 1.0 => {
                let r = mu / (fit.phi - 1.0);
                let nb = NegativeBinomial::new(r, 1.0 / fit.phi)
                    .map_err(|e| DsmError::numerical(format!("negative binomial residual: {e}")))?;
                discrete_u(y, u_draw, |k| nb.cdf(k), |k| nb.pmf(k))?
            }
            Family::QuasiPoisson => discrete_u(y, u_draw, |k| poisson_cdf(k, mu), |k| poisson_pmf(k, mu))?,
            Family::Tweedie { power } => {
                let f = tweedie_cdf(y, mu, fit.phi, power);
                if y == 0.0 {
                    u_draw * f
                } else {
                    f
                }
            }
        };
        out.push(z.inverse_cdf(clamp(u)));
    }
    Ok(out)
}

fn poisson_cdf(k: u64, mu: f64) -> f64 {
    Poisson::new(mu).map_or(1.0, |p| p.cdf(k))
}

fn poisson_pmf(k: u64, mu: f64) -> f64 {
    Poisson::new(mu).map_or(if k == 0 { 1.0 } else { 0.0 }, |p| p.pmf(k))
}

/// Uniform draw on [F(y−1), F(y)].
fn discrete_u(y: f64, u: f64, cdf: impl Fn(u64) -> f64, pmf: impl Fn(u64) -> f64) -> Result<f64> {
    if y < 0.0 || y.fract() != 0.0 {
        return Err(DsmError::invalid(format!("count residuals need integer responses, got {y}")));
    }
    let k = y as u64;
    let hi = cdf(k);
    let lo = (hi - pmf(k)).max(0.0);
    Ok(lo + u * (hi - lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityCheck {
    pub n: usize,
    /// Shapiro–Francia W′.
    pub statistic: f64,
    pub p_value: f64,
    pub flagged: bool,
}

/// Shapiro–Francia test with Royston's normal approximation to log(1 − W′).
pub fn shapiro_francia(values: &[f64]) -> Result<NormalityCheck> {
    let n = values.len();
    if n < 5 {
        return Err(DsmError::invalid("Shapiro-Francia needs at least 5 values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DsmError::numerical("non-finite residual"));
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let z = std_normal();
    let nf = n as f64;
    let m: Vec<f64> = (1..=n).map(|i| z.inverse_cdf((i as f64 - 0.375) / (nf + 0.25))).collect();
    let mx = x.iter().sum::<f64>() / nf;
    let mm = m.iter().sum::<f64>() / nf;
    let (mut sxm, mut sxx, mut smm) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(&m) {
        sxm += (a - mx) * (b - mm);
        sxx += (a - mx).powi(2);
        smm += (b - mm).powi(2);
    }
    if sxx == 0.0 {
        return Err(DsmError::numerical("residuals have zero variance"));
    }
    let w = sxm * sxm / (sxx * smm);
    let u = nf.ln();
    let v = u.ln();
    let mu = -1.2725 + 1.0521 * (v - u);
    let sigma = 1.0308 - 0.26758 * (v + 2.0 / u);
    let stat = ((1.0 - w).max(1e-300).ln() - mu) / sigma;
    let p = 1.0 - z.cdf(stat);
    Ok(NormalityCheck {
        n,
        statistic: w,
        p_value: p,
        flagged: p < NORMALITY_ALPHA,
    })
}

pub fn residual_check(fit: &GamFit, seed: u64) -> Result<(Vec<f64>, NormalityCheck)> {
    let r = quantile_residuals(fit, seed)?;
    let check = shapiro_francia(&r)?;
    Ok((r, check))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{DetectionForm, DetectionSpec};
    use crate::gam::{optimize_lambda, GamOptions};
    use crate::smooth::{build_design, Frame};
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, Gamma as GammaDist, Poisson as PoissonDist};

    fn level_fit() -> DetectionFit {
        DetectionFit {
            spec: DetectionSpec::new(DetectionForm::HalfNormal, 1.0).with_factor("sea", &["0", "1", "2"]),
            theta: DVector::from_vec(vec![-0.4, -0.5, -0.6]),
            v_theta: DMatrix::from_row_slice(3, 3, &[0.02, 0.0, 0.0, 0.0, 0.03, 0.0, 0.0, 0.0, 0.04]),
            loglik: 0.0,
            n_obs: 50,
            iterations: 0,
        }
    }

    #[test]
    fn zero_delta_reproduces_detection_stage() {
        let det = level_fit();
        let levels = factor_levels(&det, "sea", &Covariates::new()).unwrap();
        let r = shift_table(&det, &DVector::zeros(3), "sea", &levels, 1.0).unwrap();
        for (row, (_, covs)) in r.rows.iter().zip(&levels) {
            assert_eq!(row.p, row.p_corrected);
            assert_eq!(row.p, det.p_at(covs).unwrap());
            assert_eq!(row.shift_in_sd, 0.0);
            assert!(!row.flagged);
        }
    }

    #[test]
    fn unknown_level_factor_is_rejected() {
        assert!(factor_levels(&level_fit(), "weather", &Covariates::new()).is_err());
    }

    #[test]
    fn minke_table_shifts() {
        let p = [0.508, 0.216, 0.247];
        let pc = [0.482, 0.203, 0.304];
        let se = [0.115, 0.078, 0.088];
        let rows: Vec<ShiftRow> = (0..3).map(|i| ShiftRow::new(&i.to_string(), p[i], se[i], pc[i], 1.0)).collect();
        assert!((rows[2].shift_in_sd - 0.65).abs() < 0.01);
        assert!(rows.iter().all(|r| !r.flagged));
        assert!(ShiftRow::new("x", 0.5, 0.1, 0.62, 1.0).flagged);
    }

    fn intercept_fit(y: Vec<f64>, family: Family) -> GamFit {
        let n = y.len();
        let frame = Frame {
            n,
            numeric: Default::default(),
            factor: Default::default(),
        };
        let d = build_design(&[], &[], &frame).unwrap();
        optimize_lambda(&d, &DVector::from_vec(y), &DVector::zeros(n), family, &GamOptions::default()).unwrap()
    }

    #[test]
    fn obs_expected_partition_and_score_identity() {
        let y: Vec<f64> = (0..30).map(|i| (i % 5) as f64).collect();
        let fit = intercept_fit(y, Family::Poisson);
        let rows: Vec<Covariates> = (0..30)
            .map(|i| {
                let mut c = Covariates::new();
                c.insert("sea".into(), CovValue::Level((i % 3).to_string()));
                c
            })
            .collect();
        let t = obs_vs_expected(&fit, &rows, "sea").unwrap();
        let all = obs_vs_expected_total(&fit);
        assert_eq!(t.total_observed(), all.total_observed());
        assert!((t.total_expected() - all.total_expected()).abs() < 1e-10 * all.total_expected());
        assert!((all.total_expected() - all.total_observed()).abs() < 1e-6 * all.total_observed());
        assert_eq!(t.rows.iter().map(|r| r.segments).sum::<usize>(), 30);
        assert!(obs_vs_expected(&fit, &rows, "wind").is_err());
    }

    #[test]
    fn residuals_deterministic_given_seed() {
        let y: Vec<f64> = (0..40).map(|i| ((i * 7) % 4) as f64).collect();
        let fit = intercept_fit(y, Family::Poisson);
        assert_eq!(quantile_residuals(&fit, 9).unwrap(), quantile_residuals(&fit, 9).unwrap());
        assert_ne!(quantile_residuals(&fit, 9).unwrap(), quantile_residuals(&fit, 10).unwrap());
    }

    #[test]
    fn normal_sample_passes_and_skewed_sample_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rand_distr::StandardNormal;
        let mut flagged = 0;
        for _ in 0..200 {
            let x: Vec<f64> = (0..200).map(|_| z.sample(&mut rng)).collect();
            if shapiro_francia(&x).unwrap().flagged {
                flagged += 1;
            }
        }
        // nominal 1% level
        assert!(flagged <= 8, "{flagged}");
        let e: Vec<f64> = (0..200).map(|_| -(rng.random::<f64>()).ln()).collect();
        assert!(shapiro_francia(&e).unwrap().flagged);
    }

    #[test]
    fn poisson_residuals_calibrated_and_overdispersion_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut unflagged = 0;
        let reps = 50;
        for r in 0..reps {
            let y: Vec<f64> = (0..300).map(|_| PoissonDist::new(2.5).unwrap().sample(&mut rng)).collect();
            let fit = intercept_fit(y, Family::Poisson);
            if !residual_check(&fit, r).unwrap().1.flagged {
                unflagged += 1;
            }
        }
        assert!(unflagged as f64 >= 0.9 * reps as f64, "{unflagged}");
        // gamma-mixed Poisson with variance 2.5 + 2.5²·4
        let y: Vec<f64> = (0..300)
            .map(|_| {
                let m: f64 = GammaDist::new(0.25, 10.0).unwrap().sample(&mut rng);
                PoissonDist::new(m.max(1e-9)).unwrap().sample(&mut rng)
            })
            .collect();
        let fit = intercept_fit(y, Family::Poisson);
        assert!(residual_check(&fit, 0).unwrap().1.flagged);
    }

    #[test]
    fn quasi_poisson_residuals_absorb_overdispersion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..400)
            .map(|_| {
                let m: f64 = GammaDist::new(2.0, 2.5).unwrap().sample(&mut rng);
                PoissonDist::new(m).unwrap().sample(&mut rng)
            })
            .collect();
        let fit = intercept_fit(y, Family::QuasiPoisson);
        assert!(fit.phi > 2.0);
        let (r, _) = residual_check(&fit, 1).unwrap();
        let var = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        assert!((var - 1.0).abs() < 0.25, "{var}");
    }
}
