//! Gaussian / Normal-Inverse-Gamma exponential-family kernels.
//!
//! Onset ages are Gaussian given cluster and condition; the conjugate prior
//! on (μ, σ²) is carried in NIG form `(u, v, α, β)` with
//! μ | σ² ~ N(u, σ²/v) and σ² ~ InvGamma(α, β).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{
    digamma, inverse_mills, std_normal_cdf, std_normal_sf, std_normal_tail, variance_factor_with, StudentT,
    LN_INV_SQRT_2PI,
};

/// Natural parameters of a Gaussian: η₁ = μ/σ², η₂ = −1/(2σ²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianNatural {
    pub eta1: f64,
    pub eta2: f64,
}

impl GaussianNatural {
    pub fn from_mean_var(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() || !mean.is_finite() {
            return Err(Error::Domain(format!(
                "Gaussian needs finite mean and variance > 0, got ({mean}, {var})"
            )));
        }
        Ok(Self {
            eta1: mean / var,
            eta2: -0.5 / var,
        })
    }

    pub fn is_valid(&self) -> bool {
        self.eta2 < 0.0 && self.eta1.is_finite() && self.eta2.is_finite()
    }

    #[inline]
    pub fn mean(&self) -> f64 {
        -0.5 * self.eta1 / self.eta2
    }

    #[inline]
    pub fn variance(&self) -> f64 {
        -0.5 / self.eta2
    }

    #[inline]
    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// True log normalizer log g(η) = −μ²/(2σ²) − ½ log σ², so that
    /// f(t) = g(η) h(t) exp(η₁t + η₂t²) with h(t) = 1/√(2π).
    pub fn log_g(&self) -> f64 {
        0.25 * self.eta1 * self.eta1 / self.eta2 + 0.5 * (-2.0 * self.eta2).ln()
    }

    #[inline]
    pub fn dot(&self, stats: &TruncMoments) -> f64 {
        self.eta1 * stats.e_t + self.eta2 * stats.e_t2
    }
}

/// Normal-Inverse-Gamma parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NIGParams {
    pub u: f64,
    pub v: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Weighted sufficient statistics (Σt, Σt², effective count).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    pub t1: f64,
    pub t2: f64,
    pub n: f64,
}

impl SuffStats {
    #[inline]
    pub fn add_weighted(&mut self, w: f64, m: &TruncMoments) {
        self.t1 += w * m.e_t;
        self.t2 += w * m.e_t2;
        self.n += w;
    }

    #[inline]
    pub fn merge(&mut self, other: &SuffStats) {
        self.t1 += other.t1;
        self.t2 += other.t2;
        self.n += other.n;
    }
}

/// Expectations of the NIG natural statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigExpectations {
    /// E[log(1/σ²)]
    pub e_log_inv_var: f64,
    /// E[1/σ²]
    pub e_inv_var: f64,
    /// E[μ/σ²]
    pub e_mu_over_var: f64,
    /// E[μ²/σ²]
    pub e_mu2_over_var: f64,
}

impl NIGParams {
    pub fn new(u: f64, v: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { u, v, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid NIG parameters {self:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.u.is_finite()
            && self.v > 0.0
            && self.alpha > 0.0
            && self.beta > 0.0
            && self.v.is_finite()
            && self.alpha.is_finite()
            && self.beta.is_finite()
    }

    pub fn expectations(&self) -> Result<NigExpectations> {
        let prec = self.alpha / self.beta;
        Ok(NigExpectations {
            e_log_inv_var: digamma(self.alpha)? - self.beta.ln(),
            e_inv_var: prec,
            e_mu_over_var: self.u * prec,
            e_mu2_over_var: 1.0 / self.v + self.u * self.u * prec,
        })
    }

    /// E[log g(η)] under this NIG.
    pub fn expected_log_g(&self) -> Result<f64> {
        let e = self.expectations()?;
        Ok(-0.5 * e.e_mu2_over_var + 0.5 * e.e_log_inv_var)
    }

    /// E[η] under this NIG.
    pub fn expected_natural(&self) -> GaussianNatural {
        let prec = self.alpha / self.beta;
        GaussianNatural {
            eta1: self.u * prec,
            eta2: -0.5 * prec,
        }
    }

    /// Conjugate update with (possibly fractional, expected) sufficient
    /// statistics; the NIG image of ν* = ν + n̄, χ* = χ + T̄.
    pub fn posterior(&self, stats: &SuffStats) -> NIGParams {
        let v_star = self.v + stats.n;
        let u_star = (self.v * self.u + stats.t1) / v_star;
        let alpha_star = self.alpha + 0.5 * stats.n;
        let beta_star =
            self.beta + 0.5 * (stats.t2 + self.v * self.u * self.u - v_star * u_star * u_star);
        NIGParams {
            u: u_star,
            v: v_star,
            alpha: alpha_star,
            beta: beta_star,
        }
    }

    /// Posterior predictive for a single new onset: Student-t with 2α
    /// degrees of freedom, location u and squared scale β(v+1)/(αv).
    pub fn predictive(&self) -> StudentT {
        let scale2 = self.beta * (self.v + 1.0) / (self.alpha * self.v);
        StudentT::new(2.0 * self.alpha, self.u, scale2.sqrt())
            .expect("valid NIG gives a valid Student-t")
    }

    pub fn predictive_density(&self, t: f64) -> f64 {
        self.predictive().pdf(t)
    }

    pub fn predictive_cdf(&self, t: f64) -> f64 {
        self.predictive().cdf(t)
    }

    pub fn predictive_survival(&self, t: f64) -> f64 {
        self.predictive().sf(t)
    }

    /// Concatenated (u, v, α, β).
    pub fn as_array(&self) -> [f64; 4] {
        [self.u, self.v, self.alpha, self.beta]
    }
}

/// Truncation applied to a Gaussian onset distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Truncation {
    /// Left-truncated at the bound: support t > bound.
    Left(f64),
    /// Right-truncated at the bound: support t < bound.
    Right(f64),
    None,
}

/// First two moments of a (possibly truncated) Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TruncMoments {
    pub e_t: f64,
    pub e_t2: f64,
}

impl TruncMoments {
    pub fn exact(t: f64) -> Self {
        Self { e_t: t, e_t2: t * t }
    }

    pub fn variance(&self) -> f64 {
        self.e_t2 - self.e_t * self.e_t
    }
}

/// E[t], E[t²] of N(mean, sd²) under the given truncation.
pub fn truncated_normal_moments(mean: f64, sd: f64, trunc: Truncation) -> Result<TruncMoments> {
    if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
        return Err(Error::Domain(format!(
            "truncated moments need finite mean and sd > 0, got ({mean}, {sd})"
        )));
    }
    let (e_t, var) = match trunc {
        Truncation::None => (mean, sd * sd),
        Truncation::Left(bound) => {
            let z = (bound - mean) / sd;
            let lambda = inverse_mills(z);
            (mean + sd * lambda, sd * sd * variance_factor_with(z, lambda))
        }
        Truncation::Right(bound) => {
            // Mirror: t < b  <=>  −t > −b
            let z = (mean - bound) / sd;
            let lambda = inverse_mills(z);
            (mean - sd * lambda, sd * sd * variance_factor_with(z, lambda))
        }
    };
    Ok(TruncMoments {
        e_t,
        e_t2: var + e_t * e_t,
    })
}

/// Moments of N(mean, sd²) restricted to t > bound, with ln P(t > bound).
/// The caller guarantees finite mean and sd > 0.
pub fn left_truncated_with_mass(mean: f64, sd: f64, bound: f64) -> (TruncMoments, f64) {
    let z = (bound - mean) / sd;
    let (lambda, ln_mass) = std_normal_tail(z);
    let e_t = mean + sd * lambda;
    let var = sd * sd * variance_factor_with(z, lambda);
    (TruncMoments { e_t, e_t2: var + e_t * e_t }, ln_mass)
}

/// Standard-normal probability of the retained region (used by diagnostics).
pub fn truncation_mass(mean: f64, sd: f64, trunc: Truncation) -> f64 {
    match trunc {
        Truncation::None => 1.0,
        Truncation::Left(b) => std_normal_sf((b - mean) / sd),
        Truncation::Right(b) => std_normal_cdf((b - mean) / sd),
    }
}

/// log h(t) for the Gaussian family.
pub const LOG_H: f64 = LN_INV_SQRT_2PI;
