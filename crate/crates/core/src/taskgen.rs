//! Synthetic task family and n-shot k-way episode sampling.
//!
//! A task places `k` class means evenly on a circle of radius `r` in the
//! first two raw-input coordinates, rotated by a task angle `phi`. Examples
//! are the class mean plus isotropic Gaussian noise, pushed through a frozen
//! random-feature backbone `x -> tanh(W x + b)`. Adapters only ever see the
//! backbone features.

use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    /// Output feature width.
    pub d_feat: usize,
    /// Seed of the frozen projection.
    pub seed: u64,
    /// Standard deviation of projection weights.
    #[serde(default = "one")]
    pub weight_scale: f64,
    /// When set the projection has no bias term.
    #[serde(default)]
    pub zero_bias: bool,
}

fn one() -> f64 {
    1.0
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            d_feat: 8,
            seed: 0x5eed_0001,
            weight_scale: 1.0,
            zero_bias: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDistributionConfig {
    pub input_dim: usize,
    /// Classes per task.
    pub k: usize,
    /// Task rotation angles are uniform on `[lo, hi)`.
    pub angle_range: (f64, f64),
    /// Class-mean radii are uniform on `[lo, hi]`.
    pub radius_range: (f64, f64),
    /// Per-coordinate standard deviation of class noise.
    pub noise_scale: f64,
    /// Probability that an example is drawn from a different class than its
    /// label says.
    #[serde(default)]
    pub label_noise: f64,
    pub backbone: BackboneSpec,
}

impl Default for TaskDistributionConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            k: 5,
            angle_range: (0.0, TAU),
            radius_range: (2.0, 2.0),
            noise_scale: 0.5,
            label_noise: 0.0,
            backbone: BackboneSpec::default(),
        }
    }
}

impl TaskDistributionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if self.input_dim < 2 {
            return bad("input_dim must be at least 2");
        }
        if !(self.noise_scale > 0.0) {
            return bad("noise_scale must be positive");
        }
        let (alo, ahi) = self.angle_range;
        if !(alo.is_finite() && ahi.is_finite() && alo <= ahi) {
            return bad("angle_range must be an ordered finite interval");
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return bad("radius_range must be an ordered positive interval");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1]");
        }
        if self.backbone.d_feat == 0 || !(self.backbone.weight_scale > 0.0) {
            return bad("backbone needs d_feat > 0 and a positive weight scale");
        }
        Ok(())
    }
}

/// The frozen feature map. Materialized once from its spec; identical
/// inputs always give identical features.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    input_dim: usize,
    /// `d_feat x input_dim`
    weight: Matrix,
    bias: Vec<f64>,
}

impl Backbone {
    pub fn new(spec: &BackboneSpec, input_dim: usize) -> Self {
        let mut rng = rng_from(derive_seed(spec.seed, "backbone", 0));
        let scale = spec.weight_scale;
        let w: Vec<f64> = (0..spec.d_feat * input_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = if spec.zero_bias {
            vec![0.0; spec.d_feat]
        } else {
            (0..spec.d_feat)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        Self {
            spec: spec.clone(),
            input_dim,
            weight: Matrix::from_vec(spec.d_feat, input_dim, w).expect("sized above"),
            bias,
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn d_feat(&self) -> usize {
        self.spec.d_feat
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn projection(&self) -> &Matrix {
        &self.weight
    }

    pub fn featurize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "raw input has dim {}, backbone expects {}",
                raw.len(),
                self.input_dim
            )));
        }
        Ok(self
            .weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| (crate::numerics::dot(w, raw) + b).tanh())
            .collect())
    }

    /// Re-featurizes examples with this backbone, keeping raw inputs and labels.
    pub fn refeaturize(&self, examples: &[Example]) -> Result<Vec<Example>> {
        examples
            .iter()
            .map(|e| {
                Ok(Example {
                    raw: e.raw.clone(),
                    features: self.featurize(&e.raw)?,
                    label: e.label,
                })
            })
            .collect()
    }
}

/// Applies the frozen backbone described by `config` to one raw input.
///
/// Rebuilds the projection on every call; hot paths should hold a
/// [`Backbone`] or [`TaskDistribution`] instead.
pub fn featurize(config: &TaskDistributionConfig, raw: &[f64]) -> Result<Vec<f64>> {
    Backbone::new(&config.backbone, config.input_dim).featurize(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u64,
    pub angle: f64,
    pub radius: f64,
    /// `k` rows of `input_dim` coordinates.
    pub class_means: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn k(&self) -> usize {
        self.class_means.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub raw: Vec<f64>,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: TaskSpec,
    /// Shots per class.
    pub n: usize,
    /// Way.
    pub k: usize,
    pub seed: u64,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

impl Episode {
    /// Copy with the query set removed.
    pub fn without_query(&self) -> Episode {
        Episode {
            query: Vec::new(),
            ..self.clone()
        }
    }
}

/// A task distribution with its backbone materialized.
#[derive(Debug, Clone)]
pub struct TaskDistribution {
    config: TaskDistributionConfig,
    backbone: Backbone,
}

impl TaskDistribution {
    pub fn new(config: TaskDistributionConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(&config.backbone, config.input_dim);
        Ok(Self { config, backbone })
    }

    pub fn config(&self) -> &TaskDistributionConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// Adapter dimension for a linear head over this distribution's features.
    pub fn adapter_dim(&self) -> usize {
        crate::zoo::head_dim(self.config.k, self.backbone.d_feat())
    }

    pub fn featurize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.backbone.featurize(raw)
    }

    pub fn sample_task(&self, id: u64, seed: u64) -> TaskSpec {
        sample_task_with(&self.config, id, seed)
    }

    pub fn sample_episode(
        &self,
        task: &TaskSpec,
        n: usize,
        k: usize,
        query_per_class: usize,
        seed: u64,
    ) -> Result<Episode> {
        if n == 0 || k == 0 {
            return Err(Error::invalid(format!("episode needs n*k > 0 (n = {n}, k = {k})")));
        }
        if query_per_class == 0 {
            return Err(Error::invalid("query_per_class must be at least 1"));
        }
        if k != task.k() {
            return Err(Error::invalid(format!(
                "episode way {k} does not match task with {} classes",
                task.k()
            )));
        }
        let support = self.draw(task, n, derive_seed(seed, "support", 0))?;
        let query = self.draw(task, query_per_class, derive_seed(seed, "query", 0))?;
        Ok(Episode {
            task: task.clone(),
            n,
            k,
            seed,
            support,
            query,
        })
    }

    fn draw(&self, task: &TaskSpec, per_class: usize, seed: u64) -> Result<Vec<Example>> {
        let mut rng = rng_from(seed);
        let k = task.k();
        let mut out = Vec::with_capacity(per_class * k);
        for label in 0..k {
            for _ in 0..per_class {
                let source = if task.label_noise > 0.0 && rng.random::<f64>() < task.label_noise {
                    // a uniformly chosen different class
                    let other = rng.random_range(0..k - 1);
                    if other >= label {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    label
                };
                let raw: Vec<f64> = task.class_means[source]
                    .iter()
                    .map(|m| m + task.noise_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let features = self.backbone.featurize(&raw)?;
                out.push(Example {
                    raw,
                    features,
                    label,
                });
            }
        }
        Ok(out)
    }
}

fn sample_task_with(config: &TaskDistributionConfig, id: u64, seed: u64) -> TaskSpec {
    let mut rng = rng_from(seed);
    let (alo, ahi) = config.angle_range;
    let angle = if ahi > alo { rng.random_range(alo..ahi) } else { alo };
    let (rlo, rhi) = config.radius_range;
    let radius = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
    let k = config.k;
    let class_means = (0..k)
        .map(|j| {
            let a = angle + TAU * j as f64 / k as f64;
            let mut m = vec![0.0; config.input_dim];
            m[0] = radius * a.cos();
            m[1] = radius * a.sin();
            m
        })
        .collect();
    TaskSpec {
        id,
        angle,
        radius,
        class_means,
        noise_scale: config.noise_scale,
        label_noise: config.label_noise,
        seed,
    }
}

/// Draws one task; deterministic in `(config, seed)`.
pub fn sample_task(config: &TaskDistributionConfig, seed: u64) -> Result<TaskSpec> {
    config.validate()?;
    Ok(sample_task_with(config, seed, seed))
}

// --- JSONL serialization -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ExampleBlock {
    count: usize,
    raw_dim: usize,
    feat_dim: usize,
    /// Little-endian f64, row-major, base64.
    raw: String,
    features: String,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    task: TaskSpec,
    n: usize,
    k: usize,
    seed: u64,
    support: ExampleBlock,
    query: ExampleBlock,
}

fn encode_f64s<'a>(rows: impl Iterator<Item = &'a [f64]>) -> String {
    let mut bytes = Vec::new();
    for r in rows {
        for v in r {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    B64.encode(bytes)
}

fn decode_f64s(s: &str, expect: usize) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("bad base64 array: {e}")))?;
    if bytes.len() != expect * 8 {
        return Err(Error::Corruption(format!(
            "array holds {} bytes, expected {}",
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl ExampleBlock {
    fn encode(examples: &[Example]) -> Self {
        let raw_dim = examples.first().map_or(0, |e| e.raw.len());
        let feat_dim = examples.first().map_or(0, |e| e.features.len());
        Self {
            count: examples.len(),
            raw_dim,
            feat_dim,
            raw: encode_f64s(examples.iter().map(|e| e.raw.as_slice())),
            features: encode_f64s(examples.iter().map(|e| e.features.as_slice())),
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    fn decode(self) -> Result<Vec<Example>> {
        if self.labels.len() != self.count {
            return Err(Error::Corruption("label count does not match example count".into()));
        }
        let raw = decode_f64s(&self.raw, self.count * self.raw_dim)?;
        let feats = decode_f64s(&self.features, self.count * self.feat_dim)?;
        Ok((0..self.count)
            .map(|i| Example {
                raw: raw[i * self.raw_dim..(i + 1) * self.raw_dim].to_vec(),
                features: feats[i * self.feat_dim..(i + 1) * self.feat_dim].to_vec(),
                label: self.labels[i],
            })
            .collect())
    }
}

pub fn write_episode_jsonl<W: Write>(mut w: W, episode: &Episode) -> Result<()> {
    let rec = EpisodeRecord {
        task: episode.task.clone(),
        n: episode.n,
        k: episode.k,
        seed: episode.seed,
        support: ExampleBlock::encode(&episode.support),
        query: ExampleBlock::encode(&episode.query),
    };
    serde_json::to_writer(&mut w, &rec)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn parse_episode_line(line: &str) -> Result<Episode> {
    let rec: EpisodeRecord = serde_json::from_str(line)?;
    Ok(Episode {
        task: rec.task,
        n: rec.n,
        k: rec.k,
        seed: rec.seed,
        support: rec.support.decode()?,
        query: rec.query.decode()?,
    })
}

pub fn read_episodes_jsonl<R: BufRead>(r: R) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_episode_line(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dist, norm2};

    fn dist_default() -> TaskDistribution {
        TaskDistribution::new(TaskDistributionConfig::default()).unwrap()
    }

    #[test]
    fn task_is_deterministic_and_in_range() {
        let cfg = TaskDistributionConfig::default();
        let a = sample_task(&cfg, 42).unwrap();
        assert_eq!(a, sample_task(&cfg, 42).unwrap());
        assert!((0.0..TAU).contains(&a.angle));
        assert_eq!(a.k(), 5);
        for m in &a.class_means {
            assert!((norm2(m) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn angles_look_uniform_and_independent() {
        let cfg = TaskDistributionConfig::default();
        let angles: Vec<f64> = (0..1000)
            .map(|s| sample_task(&cfg, derive_seed(1, "t", s)).unwrap().angle)
            .collect();
        let n = angles.len() as f64;
        let mean = angles.iter().sum::<f64>() / n;
        // uniform on [0, 2pi): sd of the mean is 2pi / sqrt(12 n)
        let sd = TAU / (12.0 * n).sqrt();
        assert!((mean - TAU / 2.0).abs() < 3.0 * sd, "mean {mean}");
        // lag-1 correlation of successive tasks
        let var = angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let cov = angles
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / (n - 1.0);
        assert!((cov / var).abs() < 4.0 / n.sqrt(), "corr {}", cov / var);
    }

    #[test]
    fn episode_counts_and_balance() {
        let d = dist_default();
        let task = d.sample_task(0, 3);
        let ep = d.sample_episode(&task, 16, 5, 20, 9).unwrap();
        assert_eq!(ep.support.len(), 80);
        assert_eq!(ep.query.len(), 100);
        for c in 0..5 {
            assert_eq!(ep.support.iter().filter(|e| e.label == c).count(), 16);
        }
        let ep1 = d.sample_episode(&task, 1, 5, 1, 9).unwrap();
        assert_eq!(ep1.support.len(), 5);
        assert_eq!(ep, d.sample_episode(&task, 16, 5, 20, 9).unwrap());
        // support and query come from different streams
        assert_ne!(ep.support[0].raw, ep.query[0].raw);
        assert!(d.sample_episode(&task, 0, 5, 1, 0).is_err());
        assert!(d.sample_episode(&task, 1, 4, 1, 0).is_err());
    }

    #[test]
    fn label_noise_keeps_labels_balanced() {
        let cfg = TaskDistributionConfig {
            label_noise: 0.3,
            ..Default::default()
        };
        let d = TaskDistribution::new(cfg).unwrap();
        let task = d.sample_task(0, 1);
        let ep = d.sample_episode(&task, 10, 5, 1, 2).unwrap();
        for c in 0..5 {
            assert_eq!(ep.support.iter().filter(|e| e.label == c).count(), 10);
        }
    }

    #[test]
    fn frozen_backbone() {
        let cfg = TaskDistributionConfig::default();
        let x = [0.3, -1.2];
        assert_eq!(featurize(&cfg, &x).unwrap(), featurize(&cfg, &x).unwrap());
        assert!(featurize(&cfg, &[1.0]).is_err());

        let mut zb = cfg.clone();
        zb.backbone.zero_bias = true;
        assert!(featurize(&zb, &[0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
    }

    /// Operator norm by power iteration on W^T W.
    fn op_norm(w: &Matrix) -> f64 {
        let mut v = vec![1.0; w.cols()];
        let mut est = 0.0;
        for _ in 0..500 {
            let wv: Vec<f64> = w.iter_rows().map(|r| crate::numerics::dot(r, &v)).collect();
            let mut wtwv = vec![0.0; w.cols()];
            for (r, s) in w.iter_rows().zip(&wv) {
                for (o, x) in wtwv.iter_mut().zip(r) {
                    *o += x * s;
                }
            }
            let n = norm2(&wtwv);
            v = wtwv.iter().map(|x| x / n).collect();
            est = n.sqrt();
        }
        est
    }

    #[test]
    fn backbone_is_lipschitz() {
        let d = dist_default();
        let l = op_norm(d.backbone().projection());
        let mut rng = rng_from(77);
        for _ in 0..200 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
            let fx = d.featurize(&x).unwrap();
            let fy = d.featurize(&y).unwrap();
            assert!(dist(&fx, &fy) <= l * dist(&x, &y) * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let d = dist_default();
        let task = d.sample_task(4, 5);
        let ep = d.sample_episode(&task, 2, 5, 3, 6).unwrap();
        let mut buf = Vec::new();
        write_episode_jsonl(&mut buf, &ep).unwrap();
        write_episode_jsonl(&mut buf, &ep.without_query()).unwrap();
        let back = read_episodes_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], ep);
        assert!(back[1].query.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = TaskDistributionConfig::default();
        c.k = 1;
        assert!(TaskDistribution::new(c).is_err());
        let mut c = TaskDistributionConfig::default();
        c.noise_scale = 0.0;
        assert!(TaskDistribution::new(c).is_err());
    }
}
