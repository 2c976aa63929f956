//! Response families: variance functions, unit deviances and log densities.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{DsmError, Result};

/// Lowest Tweedie power considered.
pub const TWEEDIE_MIN_POWER: f64 = 1.2;

/// Power grid searched when the Tweedie power is not fixed.
pub const TWEEDIE_POWER_GRID: [f64; 8] = [1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Family {
    /// Identity link; used for closed-form checks of the fitting machinery.
    Gaussian,
    Poisson,
    QuasiPoisson,
    Tweedie { power: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        if let Family::Tweedie { power } = *self {
            if !(TWEEDIE_MIN_POWER..2.0).contains(&power) {
                return Err(DsmError::invalid(format!(
                    "Tweedie power must lie in [{TWEEDIE_MIN_POWER}, 2), got {power}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self {
            Family::Gaussian => "gaussian".into(),
            Family::Poisson => "poisson".into(),
            Family::QuasiPoisson => "quasi-poisson".into(),
            Family::Tweedie { power } => format!("tweedie(p={power})"),
        }
    }

    pub fn is_log_link(&self) -> bool {
        !matches!(self, Family::Gaussian)
    }

    /// Power q of the variance function V(μ) = μ^q.
    pub fn variance_power(&self) -> f64 {
        match self {
            Family::Gaussian => 0.0,
            Family::Poisson | Family::QuasiPoisson => 1.0,
            Family::Tweedie { power } => *power,
        }
    }

    pub fn scale_is_fixed(&self) -> bool {
        matches!(self, Family::Poisson)
    }

    pub fn linkinv(&self, eta: f64) -> f64 {
        if self.is_log_link() {
            eta.exp()
        } else {
            eta
        }
    }

    pub fn link(&self, mu: f64) -> f64 {
        if self.is_log_link() {
            mu.ln()
        } else {
            mu
        }
    }

    /// dμ/dη.
    pub fn mu_eta(&self, mu: f64) -> f64 {
        if self.is_log_link() {
            mu
        } else {
            1.0
        }
    }

    pub fn variance(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson | Family::QuasiPoisson => mu,
            Family::Tweedie { power } => mu.powf(*power),
        }
    }

    /// Iterative weight (dμ/dη)² / V(μ).
    pub fn working_weight(&self, mu: f64) -> f64 {
        let d = self.mu_eta(mu);
        d * d / self.variance(mu)
    }

    pub fn unit_deviance(&self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu) * (y - mu),
            Family::Poisson | Family::QuasiPoisson => poisson_deviance(y, mu),
            Family::Tweedie { power } => tweedie_unit_deviance(y, mu, *power),
        }
    }

    /// Log density split as `-d(y, μ) / (2φ) + c(y, φ)`; this returns `c`.
    /// Quasi-Poisson has no density and uses the extended quasi-likelihood normalizer.
    pub fn log_normalizer(&self, y: f64, phi: f64) -> f64 {
        match self {
            Family::Gaussian => -0.5 * (2.0 * std::f64::consts::PI * phi).ln(),
            Family::Poisson => {
                if y > 0.0 {
                    y * y.ln() - y - ln_gamma(y + 1.0)
                } else {
                    0.0
                }
            }
            Family::QuasiPoisson => {
                if y > 0.0 {
                    -0.5 * (2.0 * std::f64::consts::PI * phi * y).ln()
                } else {
                    0.0
                }
            }
            Family::Tweedie { power } => tweedie_log_normalizer(y, phi, *power),
        }
    }

    pub fn log_density(&self, y: f64, mu: f64, phi: f64) -> f64 {
        -self.unit_deviance(y, mu) / (2.0 * phi) + self.log_normalizer(y, phi)
    }
}

pub fn poisson_deviance(y: f64, mu: f64) -> f64 {
    if y > 0.0 {
        2.0 * (y * (y / mu).ln() - (y - mu))
    } else {
        2.0 * mu
    }
}

/// Tweedie unit deviance for 1 < q < 2, with the y = 0 limit `2 μ^(2−q)/(2−q)`.
pub fn tweedie_deviance(y: f64, mu: f64, q: f64) -> Result<f64> {
    if !(mu > 0.0) || !(y >= 0.0) || !(q > 1.0 && q < 2.0) || !mu.is_finite() || !y.is_finite() {
        return Err(DsmError::invalid(format!(
            "Tweedie deviance needs mu > 0, y >= 0, 1 < q < 2 (got y={y}, mu={mu}, q={q})"
        )));
    }
    Ok(tweedie_unit_deviance(y, mu, q))
}

fn tweedie_unit_deviance(y: f64, mu: f64, q: f64) -> f64 {
    let t2 = mu.powf(2.0 - q) / (2.0 - q);
    if y > 0.0 {
        let d = 2.0
            * (y.powf(2.0 - q) / ((1.0 - q) * (2.0 - q)) - y * mu.powf(1.0 - q) / (1.0 - q) + t2);
        d.max(0.0)
    } else {
        2.0 * t2
    }
}

/// log of the Tweedie series W(y, φ, q) = Σ_j W_j.
fn tweedie_log_series(y: f64, phi: f64, q: f64) -> f64 {
    let alpha = (2.0 - q) / (1.0 - q);
    let base = -alpha * y.ln() + alpha * (q - 1.0).ln() - (1.0 - alpha) * phi.ln() - (2.0 - q).ln();
    let log_w = |j: f64| j * base - ln_gamma(j + 1.0) - ln_gamma(-j * alpha);
    let j_peak = (y.powf(2.0 - q) / (phi * (2.0 - q))).max(1.0).round();
    let peak = log_w(j_peak);
    let mut terms = vec![peak];
    let mut j = j_peak + 1.0;
    loop {
        let v = log_w(j);
        terms.push(v);
        if v < peak - 37.0 || j > j_peak + 1e6 {
            break;
        }
        j += 1.0;
    }
    let mut j = j_peak - 1.0;
    while j >= 1.0 {
        let v = log_w(j);
        terms.push(v);
        if v < peak - 37.0 {
            break;
        }
        j -= 1.0;
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn tweedie_log_normalizer(y: f64, phi: f64, q: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    tweedie_log_series(y, phi, q) - y.ln() + y.powf(2.0 - q) / (phi * (1.0 - q) * (2.0 - q))
}

/// Exact Tweedie log density (series evaluation for y > 0, point mass at zero).
pub fn tweedie_log_density(y: f64, mu: f64, phi: f64, q: f64) -> f64 {
    -tweedie_unit_deviance(y, mu, q) / (2.0 * phi) + tweedie_log_normalizer(y, phi, q)
}

/// Tweedie CDF via its compound Poisson–gamma representation.
pub fn tweedie_cdf(y: f64, mu: f64, phi: f64, q: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Gamma};
    let rate = mu.powf(2.0 - q) / (phi * (2.0 - q));
    let shape = (2.0 - q) / (q - 1.0);
    let scale = phi * (q - 1.0) * mu.powf(q - 1.0);
    let p0 = (-rate).exp();
    if y <= 0.0 {
        return p0;
    }
    let mut total = p0;
    let mut log_pois = -rate;
    let jmax = (rate + 12.0 * rate.sqrt() + 40.0).ceil() as usize;
    for j in 1..=jmax {
        log_pois += rate.ln() - (j as f64).ln();
        let g = Gamma::new(shape * j as f64, 1.0 / scale).map(|g| g.cdf(y)).unwrap_or(1.0);
        total += log_pois.exp() * g;
    }
    total.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::GaussLegendre;

    #[test]
    fn deviance_identities() {
        assert!(tweedie_deviance(3.0, 3.0, 1.5).unwrap().abs() < 1e-12);
        assert!((tweedie_deviance(0.0, 1.0, 1.5).unwrap() - 4.0).abs() < 1e-12);
        assert!(tweedie_deviance(1.0, 0.0, 1.5).is_err());
        assert!(tweedie_deviance(-1.0, 1.0, 1.5).is_err());
        assert!(tweedie_deviance(1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn tweedie_deviance_approaches_poisson() {
        for &y in &[0.0, 1.0, 2.0, 5.0] {
            for &mu in &[0.3, 1.0, 4.0] {
                let t = tweedie_deviance(y, mu, 1.0001).unwrap();
                let p = poisson_deviance(y, mu);
                assert!((t - p).abs() < 1e-3, "y={y} mu={mu}: {t} vs {p}");
            }
        }
    }

    #[test]
    fn tweedie_density_integrates_to_one() {
        let rule = GaussLegendre::new(64);
        for &(mu, phi, q) in &[(2.0, 1.5, 1.5), (0.7, 0.8, 1.3), (3.0, 2.0, 1.8)] {
            let p0 = tweedie_log_density(0.0, mu, phi, q).exp();
            // split (0, 200] into panels to follow the density's shape
            let mut total = p0;
            let mut mean = 0.0;
            // y = s⁴ on the first panel removes the integrable singularity at 0
            let head = 0.5_f64.powf(0.25);
            total += rule.integrate(0.0, head, |s| 4.0 * s.powi(3) * tweedie_log_density(s.powi(4), mu, phi, q).exp());
            mean += rule.integrate(0.0, head, |s| 4.0 * s.powi(7) * tweedie_log_density(s.powi(4), mu, phi, q).exp());
            for k in 1..400 {
                let (a, b) = (k as f64 * 0.5, (k + 1) as f64 * 0.5);
                total += rule.integrate(a, b, |y| tweedie_log_density(y, mu, phi, q).exp());
                mean += rule.integrate(a, b, |y| y * tweedie_log_density(y, mu, phi, q).exp());
            }
            assert!((total - 1.0).abs() < 1e-6, "mass {total} for {mu} {phi} {q}");
            assert!((mean - mu).abs() < 1e-5, "mean {mean} for {mu} {phi} {q}");
            let cdf5 = tweedie_cdf(5.0, mu, phi, q);
            let direct = p0
                + rule.integrate(0.0, head, |s| 4.0 * s.powi(3) * tweedie_log_density(s.powi(4), mu, phi, q).exp())
                + (1..10)
                    .map(|k| {
                        rule.integrate(k as f64 * 0.5, (k + 1) as f64 * 0.5, |y| {
                            tweedie_log_density(y, mu, phi, q).exp()
                        })
                    })
                    .sum::<f64>();
            assert!((cdf5 - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn poisson_log_density_exact() {
        let f = Family::Poisson;
        let v = f.log_density(3.0, 2.0, 1.0);
        let exact = 3.0 * 2.0_f64.ln() - 2.0 - 6.0_f64.ln();
        assert!((v - exact).abs() < 1e-12);
        assert!((f.log_density(0.0, 2.0, 1.0) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn power_floor_enforced() {
        assert!(Family::Tweedie { power: 1.1 }.validate().is_err());
        assert!(Family::Tweedie { power: 1.2 }.validate().is_ok());
    }
}
