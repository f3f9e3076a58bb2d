//! Time-conditioned MLP noise predictor.
//!
//! `x -> [Linear + time_l -> GELU] x L -> Linear`, where `time_l` is a
//! bias-free per-layer projection of a shared time feature
//! `tau(t) = TimeNet(sinusoidal(t))` and `TimeNet` is `H -> 4H (GELU) -> H`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sinusoidal_embed, Activation, Linear, Matrix, MlpCache, MlpNet, ParamLayout};

const ACT: Activation = Activation::Gelu;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub time_expansion: usize,
}

/// `4 d`, optionally rounded to the nearest multiple of 512 (at least 512).
pub fn hidden_dim(d: usize, round_to_512: bool) -> usize {
    let h = 4 * d;
    if round_to_512 {
        (((h + 256) / 512) * 512).max(512)
    } else {
        h
    }
}

impl DenoiserConfig {
    pub fn new(d: usize, round_to_512: bool) -> Self {
        Self {
            d,
            hidden: hidden_dim(d, round_to_512),
            hidden_layers: 3,
            time_expansion: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden_layers == 0 || self.time_expansion == 0 {
            return Err(Error::Config("denoiser dims must be positive".into()));
        }
        if self.hidden < self.d {
            return Err(Error::Config(format!(
                "hidden width {} is below input dim {}",
                self.hidden, self.d
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::Config("hidden width must be even for the time embedding".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: ParamLayout,
    /// Input layer followed by `hidden_layers - 1` square layers.
    blocks: Vec<Linear>,
    output: Linear,
    time_proj: Vec<Linear>,
    time_net: MlpNet,
}

/// Per-layer additive time terms for a set of distinct timesteps.
pub struct TimeBias {
    steps: Vec<usize>,
    tau: Matrix,
    cache: MlpCache,
    per_layer: Vec<Matrix>,
}

impl TimeBias {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }
}

pub struct ForwardCache {
    /// Input of every block plus the input of the output layer.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    /// Row -> index into the time-bias table.
    gather: Vec<usize>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d, config.hidden);
        let mut layout = ParamLayout::new();
        let mut blocks = vec![Linear::new(&mut layout, d, h, true)];
        for _ in 1..config.hidden_layers {
            blocks.push(Linear::new(&mut layout, h, h, true));
        }
        let output = Linear::new(&mut layout, h, d, true);
        let time_proj = (0..config.hidden_layers)
            .map(|_| Linear::new(&mut layout, h, h, false))
            .collect();
        let time_net = MlpNet::with_layout(
            &mut layout,
            &[h, config.time_expansion * h, h],
            &[Activation::Gelu, Activation::Identity],
        )?;
        Ok(Self {
            config,
            layout,
            blocks,
            output,
            time_proj,
            time_net,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        for l in self.blocks.iter().chain([&self.output]).chain(&self.time_proj) {
            l.init(&mut p, rng);
        }
        self.time_net.init(&mut p, rng);
        p
    }

    /// Time terms for the given distinct steps (any order, no duplicates).
    pub fn time_bias(&self, params: &[f64], steps: &[usize]) -> Result<TimeBias> {
        let h = self.config.hidden;
        let mut embed = Matrix::zeros(steps.len(), h);
        for (i, &t) in steps.iter().enumerate() {
            embed.row_mut(i).copy_from_slice(&sinusoidal_embed(t as f64, h)?);
        }
        let (tau, cache) = self.time_net.forward(params, &embed);
        let per_layer = self.time_proj.iter().map(|p| p.forward(params, &tau)).collect();
        Ok(TimeBias {
            steps: steps.to_vec(),
            tau,
            cache,
            per_layer,
        })
    }

    /// Forward pass where row `r` uses time-bias entry `gather[r]`.
    pub fn forward_with(
        &self,
        params: &[f64],
        x: &Matrix,
        bias: &TimeBias,
        gather: &[usize],
    ) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.config.d {
            return Err(Error::invalid(format!(
                "denoiser expects width {}, got {}",
                self.config.d,
                x.cols()
            )));
        }
        if gather.len() != x.rows() || gather.iter().any(|&g| g >= bias.steps.len()) {
            return Err(Error::invalid("time index table does not match the batch"));
        }
        let mut inputs = Vec::with_capacity(self.blocks.len() + 1);
        let mut pre = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for (layer, tb) in self.blocks.iter().zip(&bias.per_layer) {
            let mut z = layer.forward(params, &h);
            for (r, &g) in gather.iter().enumerate() {
                for (v, b) in z.row_mut(r).iter_mut().zip(tb.row(g)) {
                    *v += b;
                }
            }
            let a = ACT.apply_matrix(&z);
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        let out = self.output.forward(params, &h);
        inputs.push(h);
        Ok((out, ForwardCache { inputs, pre, gather: gather.to_vec() }))
    }

    /// Predicts noise for a batch with per-row timesteps in `1..=T`.
    pub fn forward(&self, params: &[f64], x: &Matrix, ts: &[usize], max_t: usize) -> Result<Matrix> {
        let (uniq, gather) = dedupe_steps(ts, max_t)?;
        let bias = self.time_bias(params, &uniq)?;
        Ok(self.forward_with(params, x, &bias, &gather)?.0)
    }

    /// Accumulates `dL/dparams` for upstream gradient `d_out`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        bias: &TimeBias,
        d_out: &Matrix,
        grads: &mut [f64],
    ) {
        let n = self.blocks.len();
        let h = self.config.hidden;
        let mut g = self
            .output
            .backward(params, &cache.inputs[n], d_out, grads, true)
            .expect("dx requested");
        let mut d_tau = Matrix::zeros(bias.steps.len(), h);
        for l in (0..n).rev() {
            ACT.backprop(&cache.pre[l], &mut g);
            let mut d_table = Matrix::zeros(bias.steps.len(), h);
            for (r, &idx) in cache.gather.iter().enumerate() {
                for (acc, v) in d_table.row_mut(idx).iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            let dt = self.time_proj[l]
                .backward(params, &bias.tau, &d_table, grads, true)
                .expect("dx requested");
            for (a, b) in d_tau.as_mut_slice().iter_mut().zip(dt.as_slice()) {
                *a += b;
            }
            if let Some(dx) = self.blocks[l].backward(params, &cache.inputs[l], &g, grads, l > 0) {
                g = dx;
            }
        }
        self.time_net.backward(params, &bias.cache, &d_tau, grads, false);
    }

    /// Mean squared noise-prediction error over `B * d` entries at
    /// `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps`, and its gradient.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        x0: &Matrix,
        ts: &[usize],
        eps: &Matrix,
        alpha_bar: impl Fn(usize) -> f64,
        max_t: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let xt = noised(x0, ts, eps, &alpha_bar)?;
        let (uniq, gather) = dedupe_steps(ts, max_t)?;
        let bias = self.time_bias(params, &uniq)?;
        let (pred, cache) = self.forward_with(params, &xt, &bias, &gather)?;
        let count = (pred.rows() * pred.cols()) as f64;
        let mut diff = pred;
        let mut loss = 0.0;
        for (p, e) in diff.as_mut_slice().iter_mut().zip(eps.as_slice()) {
            *p -= e;
            loss += *p * *p;
        }
        diff.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0 / count);
        let mut grads = vec![0.0; params.len()];
        self.backward(params, &cache, &bias, &diff, &mut grads);
        Ok((loss / count, grads))
    }

    /// Loss only, no gradient.
    pub fn loss(
        &self,
        params: &[f64],
        x0: &Matrix,
        ts: &[usize],
        eps: &Matrix,
        alpha_bar: impl Fn(usize) -> f64,
        max_t: usize,
    ) -> Result<f64> {
        let xt = noised(x0, ts, eps, &alpha_bar)?;
        let pred = self.forward(params, &xt, ts, max_t)?;
        let count = (pred.rows() * pred.cols()) as f64;
        Ok(pred
            .as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(p, e)| (p - e).powi(2))
            .sum::<f64>()
            / count)
    }
}

fn noised(x0: &Matrix, ts: &[usize], eps: &Matrix, alpha_bar: &impl Fn(usize) -> f64) -> Result<Matrix> {
    if x0.rows() != ts.len() || eps.rows() != x0.rows() || eps.cols() != x0.cols() {
        return Err(Error::invalid("batch, noise and timestep shapes disagree"));
    }
    let mut xt = x0.clone();
    for (r, &t) in ts.iter().enumerate() {
        let ab = alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (x, e) in xt.row_mut(r).iter_mut().zip(eps.row(r)) {
            *x = a * *x + b * e;
        }
    }
    Ok(xt)
}

/// Sorted distinct steps and, per row, the index of its step in that list.
pub fn dedupe_steps(ts: &[usize], max_t: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > max_t) {
        return Err(Error::invalid(format!("timestep {t} outside 1..={max_t}")));
    }
    let mut uniq = ts.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let gather = ts.iter().map(|t| uniq.binary_search(t).unwrap()).collect();
    Ok((uniq, gather))
}
