//! Adam and LAMB over a flat parameter vector, plus the one-cycle schedule.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Adam,
    Lamb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, added to the update direction.
    pub weight_decay: f64,
    /// LAMB trust ratios are clamped to `[0, max_trust_ratio]`.
    pub max_trust_ratio: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            algorithm: Algorithm::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_trust_ratio: 10.0,
        }
    }

    pub fn lamb(lr: f64) -> Self {
        Self {
            algorithm: Algorithm::Lamb,
            eps: 1e-6,
            ..Self::adam(lr)
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0
            && self.max_trust_ratio >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad optimizer hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Parameter ranges that share one LAMB trust ratio.
    groups: Vec<Range<usize>>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    /// `groups` must tile `0..len` (typically [`ParamLayout::tensors`]). An
    /// empty slice treats the whole vector as one group.
    ///
    /// [`ParamLayout::tensors`]: super::ParamLayout::tensors
    pub fn new(config: OptimizerConfig, len: usize, groups: &[Range<usize>]) -> Result<Self> {
        config.validate()?;
        let groups = if groups.is_empty() {
            vec![0..len]
        } else {
            groups.to_vec()
        };
        let covered: usize = groups.iter().map(|g| g.len()).sum();
        if covered != len || groups.iter().any(|g| g.end > len) {
            return Err(Error::invalid("optimizer groups do not tile the parameter vector"));
        }
        Ok(Self {
            config,
            groups,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// In-place update using the configured learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// In-place update with an explicit learning rate (for schedules).
    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} moments but got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at index {i}")));
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        let mut update = vec![0.0; params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            update[i] = m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * params[i];
        }

        match c.algorithm {
            Algorithm::Adam => {
                for (p, u) in params.iter_mut().zip(&update) {
                    *p -= lr * u;
                }
            }
            Algorithm::Lamb => {
                for g in &self.groups {
                    let w_norm = params[g.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let u_norm = update[g.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ratio = if w_norm > 0.0 && u_norm > 0.0 {
                        (w_norm / u_norm).clamp(0.0, c.max_trust_ratio)
                    } else {
                        1.0
                    };
                    for i in g.clone() {
                        params[i] -= lr * ratio * update[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pure form of [`OptimizerState::step`]: returns updated parameters and a
/// new state, leaving the inputs untouched.
pub fn optimizer_step(
    state: &OptimizerState,
    params: &[f64],
    grads: &[f64],
) -> Result<(Vec<f64>, OptimizerState)> {
    let mut next = state.clone();
    let mut p = params.to_vec();
    next.step(&mut p, grads)?;
    Ok((p, next))
}

/// One-cycle learning-rate schedule: cosine warmup from `lr_start` to
/// `lr_max`, then cosine annealing to `lr_start / final_div`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_max: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(total_steps: usize, warmup_steps: usize, lr_start: f64, lr_max: f64) -> Result<Self> {
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::invalid(format!(
                "one-cycle needs 0 <= warmup ({warmup_steps}) < total ({total_steps})"
            )));
        }
        if !(lr_start > 0.0 && lr_start <= lr_max) {
            return Err(Error::invalid("one-cycle needs 0 < lr_start <= lr_max"));
        }
        Ok(Self {
            total_steps,
            warmup_steps,
            lr_start,
            lr_max,
            final_div: 1e4,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        let step = if step > self.total_steps {
            log::warn!(
                "one-cycle step {step} past total {}; clamping",
                self.total_steps
            );
            self.total_steps
        } else {
            step
        };
        let cos_interp = |from: f64, to: f64, frac: f64| {
            to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        };
        if step <= self.warmup_steps {
            let frac = if self.warmup_steps == 0 {
                1.0
            } else {
                step as f64 / self.warmup_steps as f64
            };
            cos_interp(self.lr_start, self.lr_max, frac)
        } else {
            let frac = (step - self.warmup_steps) as f64
                / (self.total_steps - self.warmup_steps) as f64;
            cos_interp(self.lr_max, self.lr_start / self.final_div, frac)
        }
    }
}

/// Learning rate at `step` of a one-cycle schedule with `warmup_steps` of
/// cosine warmup.
pub fn onecycle_lr(
    step: usize,
    total_steps: usize,
    lr_start: f64,
    lr_max: f64,
    warmup_steps: usize,
) -> Result<f64> {
    Ok(OneCycle::new(total_steps, warmup_steps, lr_start, lr_max)?.lr(step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut cfg = OptimizerConfig::adam(0.01);
        cfg.eps = 0.0;
        let state = OptimizerState::new(cfg, 4, &[]).unwrap();
        let params = [1.0, -2.0, 0.5, 0.0];
        let grads = [3.0, -0.001, 1e3, -7.0];
        let (p, s) = optimizer_step(&state, &params, &grads).unwrap();
        for i in 0..4 {
            let delta = p[i] - params[i];
            assert!((delta + 0.01 * grads[i].signum()).abs() < 1e-12, "coord {i}: {delta}");
        }
        assert_eq!(s.step_count(), 1);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let state = OptimizerState::new(OptimizerConfig::adam(0.1), 3, &[]).unwrap();
        let (p, _) = optimizer_step(&state, &[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn lamb_with_zero_weights_is_adam() {
        let grads = [0.3, -1.2, 2.0, 0.1];
        let adam = OptimizerState::new(OptimizerConfig::adam(0.05), 4, &[]).unwrap();
        let mut lamb_cfg = OptimizerConfig::lamb(0.05);
        lamb_cfg.eps = 1e-8;
        let lamb = OptimizerState::new(lamb_cfg, 4, &[0..2, 2..4]).unwrap();
        let (pa, _) = optimizer_step(&adam, &[0.0; 4], &grads).unwrap();
        let (pl, _) = optimizer_step(&lamb, &[0.0; 4], &grads).unwrap();
        assert_eq!(pa, pl);
    }

    #[test]
    fn lamb_scales_each_group_by_trust_ratio() {
        let mut cfg = OptimizerConfig::lamb(0.1);
        cfg.eps = 0.0;
        let state = OptimizerState::new(cfg, 2, &[0..1, 1..2]).unwrap();
        // first-step Adam direction is sign(g) = 1, so ratio = |w|
        let (p, _) = optimizer_step(&state, &[2.0, 0.5], &[1.0, 1.0]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 2.0)).abs() < 1e-12);
        assert!((p[1] - (0.5 - 0.1 * 0.5)).abs() < 1e-12);
        // ratio is clamped at 10
        let (p, _) = optimizer_step(&state, &[100.0, 0.5], &[1.0, 1.0]).unwrap();
        assert!((p[0] - (100.0 - 0.1 * 10.0)).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let state = OptimizerState::new(OptimizerConfig::adam(0.1), 2, &[]).unwrap();
        assert!(matches!(
            optimizer_step(&state, &[0.0; 3], &[0.0; 3]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            optimizer_step(&state, &[0.0; 2], &[f64::NAN, 0.0]),
            Err(Error::Numeric(_))
        ));
        assert!(OptimizerState::new(OptimizerConfig::adam(0.1), 4, &[0..3]).is_err());
    }

    #[test]
    fn step_is_deterministic() {
        let state = OptimizerState::new(OptimizerConfig::lamb(0.01), 3, &[0..3]).unwrap();
        let a = optimizer_step(&state, &[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5]).unwrap();
        let b = optimizer_step(&state, &[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn onecycle_endpoints() {
        let sched = OneCycle::new(10_000, 1000, 0.0004, 0.001).unwrap();
        assert!((sched.lr(0) - 0.0004).abs() < 1e-15);
        assert!((sched.lr(1000) - 0.001).abs() < 1e-15);
        assert!(sched.lr(10_000) <= 1e-2 * 0.001);
        assert_eq!(sched.lr(20_000), sched.lr(10_000));
        // monotone up during warmup, down afterwards
        for s in 1..=1000 {
            assert!(sched.lr(s) >= sched.lr(s - 1));
        }
        for s in 1001..=10_000 {
            assert!(sched.lr(s) <= sched.lr(s - 1));
        }
        assert!(onecycle_lr(5, 10, 0.1, 0.01, 2).is_err());
        assert!(onecycle_lr(5, 10, 0.001, 0.01, 10).is_err());
    }
}
