//! Linear variance schedule and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `betas[t - 1]` is `beta_t` for `t` in `1..=T`.
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas (used when loading checkpoints).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut log_acc = 0.0;
        for b in &betas {
            log_acc += (-b).ln_1p();
            alpha_bars.push(log_acc.exp());
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative signal fraction; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// Variance of the posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `beta_t = beta_min + (t-1)/(T-1) (beta_max - beta_min)`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs T >= 1"));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps)
            .map(|i| beta_min + i as f64 / (steps - 1) as f64 * (beta_max - beta_min))
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::invalid("x0 and noise differ in length"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand_distr::{Distribution, StandardNormal};

    fn default_schedule() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn endpoints() {
        let s = default_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        let naive: f64 = s.betas().iter().map(|b| 1.0 - b).product();
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!((s.alpha_bar(1000) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_space_matches_naive_product() {
        let s = default_schedule();
        let mut acc = 1.0;
        for t in 1..=1000 {
            acc *= 1.0 - s.beta(t);
            assert!((acc - s.alpha_bar(t)).abs() < 1e-12, "t={t}");
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn bad_ranges() {
        assert!(make_schedule(0, 1e-4, 2e-2).is_err());
        assert!(make_schedule(10, 2e-2, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 1e-2).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert_eq!(make_schedule(1, 1e-3, 2e-3).unwrap().beta(1), 1e-3);
    }

    #[test]
    fn q_sample_cases() {
        let s = default_schedule();
        let x0 = [1.0, -2.0, 0.5];
        let out = q_sample(&x0, 500, &[0.0; 3], &s).unwrap();
        for (o, x) in out.iter().zip(&x0) {
            assert_eq!(*o, s.alpha_bar(500).sqrt() * x);
        }
        let eps = [0.3, -0.7, 1.1];
        let out = q_sample(&x0, 1, &eps, &s).unwrap();
        let diff: f64 = out.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let en: f64 = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
        assert!(diff <= 1e-4f64.sqrt() * en + 1e-4 * 3.0);
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 1001, &eps, &s).is_err());
        assert!(q_sample(&x0, 3, &eps[..2], &s).is_err());
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        let s = default_schedule();
        let mut rng = rng_from(2024);
        let n = 100_000;
        for t in [10usize, 300, 900] {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = q_sample(&[0.0], t, &[e], &s).unwrap()[0];
                sum += x;
                sumsq += x * x;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let target = 1.0 - s.alpha_bar(t);
            // Var of the sample variance of a Gaussian is 2 sigma^4 / n.
            let sd = (2.0 / n as f64).sqrt() * target;
            assert!((var - target).abs() < 3.0 * sd, "t={t} var={var} target={target}");
        }
    }
}
