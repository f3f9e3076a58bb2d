//! Risk certificates: finite hypothesis sets, quantized description length,
//! and Gaussian PAC-Bayes posteriors. Natural logarithms throughout.

mod loss;
mod pacbayes;
mod quant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{bounded_ordinal_loss, zero_one_loss, Loss};
pub use pacbayes::{
    gaussian_kl, gibbs_risk, optimize_posterior, vanilla_pacbayes_certificate, GaussianPosterior, PosteriorFit,
    VanillaPbConfig,
};
pub use quant::{quantization_complexity, quantize, CodecConfig, QuantizationCodec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    FiniteHypothesis,
    Quantization,
    VanillaPacBayes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCertificate {
    pub family: Family,
    pub r: f64,
    pub complexity: f64,
    pub bound: f64,
    pub n: usize,
    pub epsilon: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub hypotheses: Option<u64>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u64>,
    #[serde(rename = "KL", default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub loss_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Bound values at or above this are vacuous (set by the harness).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vacuous_threshold: Option<f64>,
}

impl RiskCertificate {
    fn new(family: Family, r: f64, complexity: f64, n: usize, epsilon: f64, c: f64) -> Self {
        Self {
            family,
            r,
            complexity,
            bound: r + complexity,
            n,
            epsilon,
            c,
            hypotheses: None,
            bits: None,
            kl: None,
            loss_name: Loss::ZeroOne.name().to_string(),
            seed: None,
            vacuous_threshold: None,
        }
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss_name = loss.name().to_string();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.vacuous_threshold = Some(threshold);
        self
    }

    /// `None` when no threshold has been attached.
    pub fn is_vacuous(&self) -> Option<bool> {
        self.vacuous_threshold.map(|t| self.bound >= t)
    }
}

fn check_common(r: f64, n: usize, epsilon: f64, c: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if n == 0 {
        return Err(Error::invalid("certificates need n >= 1"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid("loss bound C must be positive"));
    }
    if !(0.0..=c).contains(&r) {
        return Err(Error::invalid(format!("empirical risk {r} outside [0, {c}]")));
    }
    Ok(())
}

/// `C sqrt(ln(M / eps) / (2 n))`.
pub fn finite_hypothesis_complexity(m: u64, n: usize, epsilon: f64, c: f64) -> Result<f64> {
    check_common(0.0, n, epsilon, c)?;
    if m == 0 {
        return Err(Error::invalid("hypothesis set must be nonempty"));
    }
    let log_term = (m as f64).ln() - epsilon.ln();
    Ok(c * (log_term / (2.0 * n as f64)).sqrt())
}

pub fn finite_hypothesis_certificate(r: f64, m: u64, n: usize, epsilon: f64, c: f64) -> Result<RiskCertificate> {
    check_common(r, n, epsilon, c)?;
    let complexity = finite_hypothesis_complexity(m, n, epsilon, c)?;
    let mut cert = RiskCertificate::new(Family::FiniteHypothesis, r, complexity, n, epsilon, c);
    cert.hypotheses = Some(m);
    Ok(cert)
}

/// `C sqrt((K + 2 ln K + ln(1/eps)) / (2 n))` for a description of `K` bits.
pub fn quantization_bound_complexity(k_bits: u64, n: usize, epsilon: f64, c: f64) -> Result<f64> {
    check_common(0.0, n, epsilon, c)?;
    if k_bits < 1 {
        return Err(Error::invalid("description length K must be at least 1 bit"));
    }
    let k = k_bits as f64;
    Ok(c * ((k + 2.0 * k.ln() - epsilon.ln()) / (2.0 * n as f64)).sqrt())
}

pub fn quantization_certificate(r: f64, k_bits: u64, n: usize, epsilon: f64, c: f64) -> Result<RiskCertificate> {
    check_common(r, n, epsilon, c)?;
    let complexity = quantization_bound_complexity(k_bits, n, epsilon, c)?;
    let mut cert = RiskCertificate::new(Family::Quantization, r, complexity, n, epsilon, c);
    cert.bits = Some(k_bits);
    Ok(cert)
}

/// Quantization certificate in its most favourable form, one bit per
/// parameter (`K = d`).
pub fn best_case_quantization_certificate(r: f64, d: usize, n: usize, epsilon: f64, c: f64) -> Result<RiskCertificate> {
    quantization_certificate(r, d as u64, n, epsilon, c)
}

/// `sqrt((KL + ln(1/eps)) / (2 n))`.
pub fn pacbayes_complexity(kl: f64, n: usize, epsilon: f64) -> Result<f64> {
    check_common(0.0, n, epsilon, 1.0)?;
    if !(kl >= 0.0) {
        return Err(Error::invalid(format!("KL must be nonnegative, got {kl}")));
    }
    Ok(((kl - epsilon.ln()) / (2.0 * n as f64)).sqrt())
}
