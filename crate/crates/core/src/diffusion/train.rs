//! Training with LAMB and EMA, and ancestral sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{DiffusionCheckpoint, TrainingMeta};
use super::denoiser::{Denoiser, DenoiserConfig};
use super::schedule::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, OneCycle, OptimizerConfig, OptimizerState};
use crate::seed::{hash_f64s, stream};
use crate::zoo::store::round_to_f32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerVariance {
    /// `sigma_t^2 = beta_t`.
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondStage {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_max: f64,
    /// Warmup length in optimizer steps. When it does not fit inside the
    /// stage, 30% of the stage is used instead.
    pub warmup_steps: usize,
}

impl Default for SecondStage {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr_start: 4e-4,
            lr_max: 1e-3,
            warmup_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Round the hidden width to a multiple of 512.
    pub round_hidden: bool,
    /// Explicit hidden width, overriding the `4 d` rule.
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + s) / (10 + s))` at step `s` so the average is not
    /// dominated by the initialization on short runs.
    pub ema_warmup: bool,
    pub second_stage: Option<SecondStage>,
    pub variance: SamplerVariance,
    pub std_floor: f64,
    /// Keep the raw (non-EMA) weights in the checkpoint.
    pub keep_raw: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            round_hidden: false,
            hidden: None,
            epochs: 3000,
            batch_size: 1024,
            lr: 0.01,
            ema_decay: 0.9999,
            ema_warmup: true,
            second_stage: None,
            variance: SamplerVariance::Beta,
            std_floor: 1e-6,
            keep_raw: true,
        }
    }
}

impl DiffusionConfig {
    pub fn denoiser(&self, d: usize) -> DenoiserConfig {
        let mut c = DenoiserConfig::new(d, self.round_hidden);
        if let Some(h) = self.hidden {
            c.hidden = h;
        }
        c
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::Config("std_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Per-dimension mean and floored standard deviation of the rows.
pub fn normalization_stats(rows: &Matrix, floor: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rows.rows() as f64;
    let mean = rows.col_means();
    let mut var = vec![0.0; rows.cols()];
    for r in rows.iter_rows() {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m).powi(2);
        }
    }
    let raw_std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    if raw_std.iter().all(|&s| s == 0.0) {
        return Err(Error::DegenerateZoo);
    }
    Ok((mean, raw_std.into_iter().map(|s| s.max(floor)).collect()))
}

pub fn normalize(theta: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    theta.iter().zip(mean).zip(std).map(|((x, m), s)| (x - m) / s).collect()
}

pub fn denormalize(z: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    z.iter().zip(mean).zip(std).map(|((x, m), s)| x * s + m).collect()
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Fits the denoiser to standardized zoo rows.
pub fn train_diffusion(zoo: &Matrix, config: &DiffusionConfig, seed: u64) -> Result<DiffusionCheckpoint> {
    config.validate()?;
    if zoo.rows() < 2 {
        return Err(Error::invalid("diffusion training needs at least two zoo rows"));
    }
    zoo.ensure_finite("zoo")?;
    let schedule = config.schedule()?;
    let t_max = schedule.steps();
    let (mean, std) = normalization_stats(zoo, config.std_floor)?;
    let mut data = Matrix::zeros(zoo.rows(), zoo.cols());
    for (i, r) in zoo.iter_rows().enumerate() {
        data.row_mut(i).copy_from_slice(&normalize(r, &mean, &std));
    }

    let net = Denoiser::new(config.denoiser(zoo.cols()))?;
    let mut params = net.init(&mut stream(seed, "diffusion.init", 0));
    let opt_cfg = OptimizerConfig::lamb(config.lr);
    let mut opt = OptimizerState::new(opt_cfg, params.len(), net.layout().tensors())?;
    let mut ema = params.clone();

    let n = data.rows();
    let batch = config.batch_size.min(n);
    let per_epoch = n.div_ceil(batch);
    let stage2 = match &config.second_stage {
        Some(s) if s.epochs > 0 => {
            let total = s.epochs * per_epoch;
            let warm = if s.warmup_steps < total {
                s.warmup_steps
            } else {
                (total * 3) / 10
            };
            Some((s.epochs, OneCycle::new(total, warm, s.lr_start, s.lr_max)?))
        }
        _ => None,
    };
    let total_epochs = config.epochs + stage2.as_ref().map_or(0, |s| s.0);

    let mut loss_trace = Vec::with_capacity(total_epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step: u64 = 0;
    for epoch in 0..total_epochs {
        let mut rng = stream(seed, "diffusion.epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let x0 = data.select_rows(chunk);
            let ts: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(1..=t_max)).collect();
            let eps = normal_matrix(chunk.len(), data.cols(), &mut rng);
            let (loss, grads) =
                net.loss_and_grad(&params, &x0, &ts, &eps, |t| schedule.alpha_bar(t), t_max)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure {
                    step: step as usize,
                    reason: format!("non-finite diffusion loss in epoch {epoch}"),
                    last_finite: ema,
                });
            }
            let lr = match &stage2 {
                Some((_, sched)) if epoch >= config.epochs => {
                    sched.lr(step as usize - config.epochs * per_epoch)
                }
                _ => config.lr,
            };
            opt.step_with_lr(&mut params, &grads, lr)?;
            let decay = if config.ema_warmup {
                config.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64))
            } else {
                config.ema_decay
            };
            for (e, p) in ema.iter_mut().zip(&params) {
                *e = decay * *e + (1.0 - decay) * p;
            }
            step += 1;
            epoch_loss += loss * chunk.len() as f64;
        }
        loss_trace.push(epoch_loss / n as f64);
    }

    round_to_f32(&mut params);
    round_to_f32(&mut ema);
    Ok(DiffusionCheckpoint {
        config: config.clone(),
        denoiser: net.config().clone(),
        schedule,
        mean,
        std,
        raw: config.keep_raw.then_some(params),
        ema,
        meta: TrainingMeta {
            seed,
            epochs: total_epochs,
            steps: step,
            optimizer: opt_cfg,
            loss_trace,
            zoo_hash: hash_f64s(zoo.as_slice()),
        },
    })
}

const SAMPLE_CHUNK: usize = 256;

/// Ancestral sampling with an arbitrary noise predictor, in standardized
/// space. `prepare(t)` runs once per step; `predict(prep, x)` once per chunk.
/// Sample `i` draws all its noise from its own stream, so results do not
/// depend on chunking or thread count.
pub fn ancestral_sample<P, Prep, Pred>(
    schedule: &NoiseSchedule,
    variance: SamplerVariance,
    d: usize,
    m: usize,
    seed: u64,
    prepare: Prep,
    predict: Pred,
) -> Result<Matrix>
where
    P: Sync,
    Prep: Fn(usize) -> Result<P>,
    Pred: Fn(&P, &Matrix) -> Result<Matrix> + Sync,
{
    if m == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..m as u64).map(|i| stream(seed, "diffusion.sample", i)).collect();
    let mut x = Matrix::zeros(m, d);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in x.row_mut(i) {
            *v = StandardNormal.sample(rng);
        }
    }
    for t in (1..=schedule.steps()).rev() {
        let prep = prepare(t)?;
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let sigma = match variance {
            SamplerVariance::Beta => beta.sqrt(),
            SamplerVariance::Posterior => schedule.posterior_variance(t).sqrt(),
        };
        x.as_mut_slice()
            .par_chunks_mut(SAMPLE_CHUNK * d)
            .zip(rngs.par_chunks_mut(SAMPLE_CHUNK))
            .try_for_each(|(block, rngs)| -> Result<()> {
                let rows = rngs.len();
                let xm = Matrix::from_vec(rows, d, block.to_vec())?;
                let eps = predict(&prep, &xm)?;
                for (r, rng) in rngs.iter_mut().enumerate() {
                    let row = &mut block[r * d..(r + 1) * d];
                    for (v, e) in row.iter_mut().zip(eps.row(r)) {
                        *v = (*v - coef * e) * inv_sqrt_alpha;
                    }
                    if t > 1 {
                        for v in row.iter_mut() {
                            let z: f64 = StandardNormal.sample(rng);
                            *v += sigma * z;
                        }
                    }
                }
                Ok(())
            })?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sampler diverged at step {t}")));
        }
    }
    Ok(x)
}

/// Draws `m` adapters with the EMA weights, mapped back to adapter space
/// and stored at `f32` precision.
pub fn sample_params(ckpt: &DiffusionCheckpoint, m: usize, seed: u64) -> Result<Matrix> {
    let net = Denoiser::new(ckpt.denoiser.clone())?;
    let ema = &ckpt.ema;
    let z = ancestral_sample(
        &ckpt.schedule,
        ckpt.config.variance,
        ckpt.denoiser.d,
        m,
        seed,
        |t| net.time_bias(ema, &[t]),
        |bias, x| Ok(net.forward_with(ema, x, bias, &vec![0; x.rows()])?.0),
    )?;
    let mut out = Matrix::zeros(m, z.cols());
    for (i, r) in z.iter_rows().enumerate() {
        let mut row = denormalize(r, &ckpt.mean, &ckpt.std);
        round_to_f32(&mut row);
        out.row_mut(i).copy_from_slice(&row);
    }
    out.ensure_finite("diffusion samples")?;
    Ok(out)
}
