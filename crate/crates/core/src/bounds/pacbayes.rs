//! Diagonal Gaussian posteriors against an isotropic Gaussian prior.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{pacbayes_complexity, Family, Loss, RiskCertificate};
use crate::error::{Error, Result};
use crate::numerics::{OptimizerConfig, OptimizerState};
use crate::seed::stream;
use crate::taskgen::Example;
use crate::zoo::soft_error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Prior is `N(0, kappa^2 I)`.
    pub kappa: f64,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, kappa: f64) -> Result<Self> {
        let post = Self { mu, sigma, kappa };
        post.validate()?;
        Ok(post)
    }

    fn validate(&self) -> Result<()> {
        if self.mu.len() != self.sigma.len() {
            return Err(Error::invalid("mu and sigma differ in length"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("prior scale kappa must be positive"));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("posterior sigma must be positive"));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::NumericInput("posterior mean is not finite".into()));
        }
        Ok(())
    }

    /// One draw `mu + sigma * z`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.draw(rng).0
    }

    fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = (0..self.mu.len()).map(|_| StandardNormal.sample(rng)).collect();
        let theta = self
            .mu
            .iter()
            .zip(&self.sigma)
            .zip(&z)
            .map(|((m, s), z)| m + s * z)
            .collect();
        (theta, z)
    }
}

/// `sum_i ln(kappa / sigma_i) + (sigma_i^2 + mu_i^2) / (2 kappa^2) - 1/2`.
pub fn gaussian_kl(post: &GaussianPosterior) -> Result<f64> {
    post.validate()?;
    let k2 = post.kappa * post.kappa;
    let kl: f64 = post
        .mu
        .iter()
        .zip(&post.sigma)
        .map(|(m, s)| (post.kappa / s).ln() + (s * s + m * m) / (2.0 * k2) - 0.5)
        .sum();
    // Each term is >= 0 analytically; clear rounding noise.
    Ok(kl.max(0.0))
}

/// Monte-Carlo estimate of `E_{theta ~ Q}` of the mean loss on `examples`.
/// A given seed always uses the same draws, whatever the examples.
pub fn gibbs_risk(
    post: &GaussianPosterior,
    examples: &[Example],
    k: usize,
    loss: Loss,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    if mc_samples == 0 {
        return Err(Error::invalid("need at least one Monte-Carlo sample"));
    }
    let mut rng = stream(seed, "pacbayes.mc", 0);
    let mut total = 0.0;
    for _ in 0..mc_samples {
        let (theta, _) = post.draw(&mut rng);
        total += loss.mean(&theta, k, examples)?;
    }
    Ok((total / mc_samples as f64).clamp(0.0, loss.max_value()))
}

/// Certificate for a fixed posterior. The empirical term is a Monte-Carlo
/// estimate of the expected support loss over `mc_samples` draws.
pub fn vanilla_pacbayes_certificate(
    post: &GaussianPosterior,
    support: &[Example],
    k: usize,
    loss: Loss,
    epsilon: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<RiskCertificate> {
    let kl = gaussian_kl(post)?;
    let r = gibbs_risk(post, support, k, loss, mc_samples, seed)?;
    let complexity = pacbayes_complexity(kl, support.len(), epsilon)?;
    let mut cert = RiskCertificate::new(Family::VanillaPacBayes, r, complexity, support.len(), epsilon, 1.0)
        .with_loss(loss)
        .with_seed(seed);
    cert.kl = Some(kl);
    Ok(cert)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VanillaPbConfig {
    pub kappa: f64,
    pub sigma_init: f64,
    pub sigma_min: f64,
    pub steps: usize,
    pub lr: f64,
    /// Draws per optimization step.
    pub mc_train: usize,
    /// Draws for the final certificate.
    pub mc_eval: usize,
}

impl Default for VanillaPbConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            sigma_init: 1e-2,
            sigma_min: 1e-6,
            steps: 500,
            lr: 1e-2,
            mc_train: 1,
            mc_eval: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFit {
    pub posterior: GaussianPosterior,
    /// Surrogate objective per step.
    pub objective: Vec<f64>,
}

/// Minimizes `E_Q[1 - p_y] + sqrt((KL + ln(1/eps)) / (2 n))` over `(mu, ln
/// sigma)` with reparameterized gradients and Adam, starting at `mu0`.
pub fn optimize_posterior(
    mu0: &[f64],
    support: &[Example],
    k: usize,
    epsilon: f64,
    cfg: &VanillaPbConfig,
    seed: u64,
) -> Result<PosteriorFit> {
    if support.is_empty() {
        return Err(Error::invalid("posterior fitting needs a nonempty support set"));
    }
    if cfg.mc_train == 0 || !(cfg.sigma_init > 0.0) || !(cfg.sigma_min > 0.0) {
        return Err(Error::invalid("bad posterior optimization settings"));
    }
    let d = mu0.len();
    let n = support.len();
    let k2 = cfg.kappa * cfg.kappa;
    let rho_min = cfg.sigma_min.ln();
    // params = [mu | rho], rho = ln sigma
    let mut params: Vec<f64> = mu0.to_vec();
    params.extend(std::iter::repeat_n(cfg.sigma_init.ln(), d));
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.lr), 2 * d, &[])?;
    let mut rng = stream(seed, "pacbayes.fit", 0);
    let mut objective = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let post = GaussianPosterior::new(
            params[..d].to_vec(),
            params[d..].iter().map(|r| r.exp()).collect(),
            cfg.kappa,
        )?;
        let kl = gaussian_kl(&post)?;
        let comp = pacbayes_complexity(kl, n, epsilon)?;
        let dcomp = 1.0 / (4.0 * n as f64 * comp.max(1e-300));
        let mut grad = vec![0.0; 2 * d];
        let mut emp = 0.0;
        for _ in 0..cfg.mc_train {
            let (theta, z) = post.draw(&mut rng);
            let (v, g) = soft_error(&theta, k, support);
            emp += v;
            for i in 0..d {
                grad[i] += g[i];
                grad[d + i] += g[i] * z[i] * post.sigma[i];
            }
        }
        let inv = 1.0 / cfg.mc_train as f64;
        for i in 0..d {
            let s = post.sigma[i];
            grad[i] = grad[i] * inv + dcomp * post.mu[i] / k2;
            grad[d + i] = grad[d + i] * inv + dcomp * (s * s / k2 - 1.0);
        }
        objective.push(emp * inv + comp);
        opt.step(&mut params, &grad)?;
        for r in &mut params[d..] {
            *r = r.max(rho_min);
        }
    }
    let posterior = GaussianPosterior::new(
        params[..d].to_vec(),
        params[d..].iter().map(|r| r.exp()).collect(),
        cfg.kappa,
    )?;
    Ok(PosteriorFit { posterior, objective })
}
