//! Hyperparameter priors.
//!
//! Each prior knows two densities: the one in its declared parametrization
//! (some families are declared on sqrt(theta) or log(theta)) and the induced
//! density on theta itself, which is what the energy function needs.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{GpError, Result};
use crate::linalg::LN_2PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorSpec {
    Gaussian { mu: f64, sigma2: f64 },
    LogGaussian { mu: f64, sigma2: f64 },
    Laplace { mu: f64, sigma: f64 },
    T { mu: f64, sigma2: f64, nu: f64 },
    SqrtT { mu: f64, sigma2: f64, nu: f64 },
    SInvChi2 { nu: f64, s2: f64 },
    Gamma { alpha: f64, beta: f64 },
    InvGamma { alpha: f64, beta: f64 },
    Unif,
    SqrtUnif,
    LogUnif,
    LogLogUnif,
    /// Excluded from inference; the parameter keeps its current value.
    Fixed,
}

impl PriorSpec {
    pub fn is_fixed(&self) -> bool {
        matches!(self, PriorSpec::Fixed)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorSpec::Gaussian { sigma2, .. } => sigma2 > 0.0,
            PriorSpec::LogGaussian { sigma2, .. } => sigma2 > 0.0,
            PriorSpec::Laplace { sigma, .. } => sigma > 0.0,
            PriorSpec::T { sigma2, nu, .. } | PriorSpec::SqrtT { sigma2, nu, .. } => {
                sigma2 > 0.0 && nu > 0.0
            }
            PriorSpec::SInvChi2 { nu, s2 } => nu > 0.0 && s2 > 0.0,
            PriorSpec::Gamma { alpha, beta } | PriorSpec::InvGamma { alpha, beta } => {
                alpha > 0.0 && beta > 0.0
            }
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(GpError::validation("prior_params", format!("non-positive scale/shape in {self:?}")))
        }
    }

    fn in_support(&self, theta: f64) -> bool {
        match self {
            PriorSpec::Gaussian { .. } | PriorSpec::Laplace { .. } | PriorSpec::T { .. } | PriorSpec::Unif => {
                true
            }
            PriorSpec::LogLogUnif => theta > 1.0,
            PriorSpec::Fixed => true,
            _ => theta > 0.0,
        }
    }

    /// Log density in the declared parametrization, with full normalizers.
    /// Improper families return 0 by convention.
    pub fn log_density(&self, theta: f64) -> f64 {
        if !self.in_support(theta) {
            return f64::NEG_INFINITY;
        }
        match *self {
            PriorSpec::Gaussian { mu, sigma2 } => {
                -0.5 * (LN_2PI + sigma2.ln()) - 0.5 * (theta - mu).powi(2) / sigma2
            }
            PriorSpec::LogGaussian { mu, sigma2 } => {
                -theta.ln() - 0.5 * (LN_2PI + sigma2.ln()) - 0.5 * (theta.ln() - mu).powi(2) / sigma2
            }
            PriorSpec::Laplace { mu, sigma } => -(2.0 * sigma).ln() - (theta - mu).abs() / sigma,
            PriorSpec::T { mu, sigma2, nu } => student_t_logpdf(theta, mu, sigma2, nu),
            PriorSpec::SqrtT { mu, sigma2, nu } => student_t_logpdf(theta.sqrt(), mu, sigma2, nu),
            PriorSpec::SInvChi2 { nu, s2 } => {
                let h = 0.5 * nu;
                h * h.ln() - ln_gamma(h) + h * s2.ln() - (h + 1.0) * theta.ln() - nu * s2 / (2.0 * theta)
            }
            PriorSpec::Gamma { alpha, beta } => {
                alpha * beta.ln() - ln_gamma(alpha) + (alpha - 1.0) * theta.ln() - beta * theta
            }
            PriorSpec::InvGamma { alpha, beta } => {
                alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * theta.ln() - beta / theta
            }
            PriorSpec::Unif
            | PriorSpec::SqrtUnif
            | PriorSpec::LogUnif
            | PriorSpec::LogLogUnif
            | PriorSpec::Fixed => 0.0,
        }
    }

    /// d/d theta of `log_density`.
    pub fn log_density_grad(&self, theta: f64) -> Result<f64> {
        if !self.in_support(theta) {
            return Err(GpError::input(format!("theta = {theta} outside prior support")));
        }
        Ok(match *self {
            PriorSpec::Gaussian { mu, sigma2 } => -(theta - mu) / sigma2,
            PriorSpec::LogGaussian { mu, sigma2 } => {
                -1.0 / theta - (theta.ln() - mu) / (sigma2 * theta)
            }
            PriorSpec::Laplace { mu, sigma } => -(theta - mu).signum() / sigma,
            PriorSpec::T { mu, sigma2, nu } => {
                -(nu + 1.0) * (theta - mu) / (nu * sigma2 + (theta - mu).powi(2))
            }
            PriorSpec::SqrtT { mu, sigma2, nu } => {
                let s = theta.sqrt();
                let ds = 0.5 / s;
                -(nu + 1.0) * (s - mu) / (nu * sigma2 + (s - mu).powi(2)) * ds
            }
            PriorSpec::SInvChi2 { nu, s2 } => {
                -(0.5 * nu + 1.0) / theta + nu * s2 / (2.0 * theta * theta)
            }
            PriorSpec::Gamma { alpha, beta } => (alpha - 1.0) / theta - beta,
            PriorSpec::InvGamma { alpha, beta } => -(alpha + 1.0) / theta + beta / (theta * theta),
            PriorSpec::Unif
            | PriorSpec::SqrtUnif
            | PriorSpec::LogUnif
            | PriorSpec::LogLogUnif
            | PriorSpec::Fixed => 0.0,
        })
    }

    /// Log density on theta itself. For families declared on a transform of
    /// theta this adds the change-of-variables term.
    pub fn log_density_theta(&self, theta: f64) -> f64 {
        let base = self.log_density(theta);
        if !base.is_finite() {
            return base;
        }
        base + self.declaration_jacobian_log(theta)
    }

    /// d/d theta of `log_density_theta`.
    pub fn log_density_theta_grad(&self, theta: f64) -> Result<f64> {
        let g = self.log_density_grad(theta)?;
        Ok(g + self.declaration_jacobian_grad(theta))
    }

    /// log |d s / d theta| for priors declared on s = g(theta).
    fn declaration_jacobian_log(&self, theta: f64) -> f64 {
        match self {
            PriorSpec::SqrtT { .. } | PriorSpec::SqrtUnif => -(2.0 * theta.sqrt()).ln(),
            PriorSpec::LogUnif => -theta.ln(),
            PriorSpec::LogLogUnif => -theta.ln() - theta.ln().ln(),
            _ => 0.0,
        }
    }

    fn declaration_jacobian_grad(&self, theta: f64) -> f64 {
        match self {
            PriorSpec::SqrtT { .. } | PriorSpec::SqrtUnif => -0.5 / theta,
            PriorSpec::LogUnif => -1.0 / theta,
            PriorSpec::LogLogUnif => -1.0 / theta - 1.0 / (theta * theta.ln()),
            _ => 0.0,
        }
    }
}

fn student_t_logpdf(x: f64, mu: f64, sigma2: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (nu * std::f64::consts::PI * sigma2).ln()
        - 0.5 * (nu + 1.0) * (1.0 + (x - mu).powi(2) / (nu * sigma2)).ln()
}
