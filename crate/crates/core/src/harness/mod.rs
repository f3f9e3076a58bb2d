//! End-to-end benchmarks: zoo, diffusion, hypothesis sets, per-episode
//! adaptation and certification, aggregation and reporting.

mod aggregate;
mod config;
mod curve;
mod format;
mod report;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, aggregate_csv, bound_vs_shots_csv, median, AggregateStats, VacuousRule};
pub use config::{
    BenchConfig, BoundsSection, EpisodeSection, HypothesisSection, MethodsSection, OutputSection, SearchKind,
    SgdSection, ZooSection, CONFIG_VERSION,
};
pub use curve::{best_prefix, curve_csv, curve_from_losses, learning_curve, CurvePoint};
pub use format::{fmt_f64, to_json_line, to_json_pretty};
pub use report::{read_results, report, Report};

use crate::bounds::{
    best_case_quantization_certificate, finite_hypothesis_certificate, gibbs_risk, optimize_posterior,
    quantization_bound_complexity, quantization_complexity, vanilla_pacbayes_certificate, Loss, RiskCertificate,
};
use crate::diffusion::{sample_params, train_diffusion, DiffusionCheckpoint};
use crate::error::{Error, Result};
use crate::select::{
    build_hierarchy, exhaustive_select, hypothesis_from_samples, support_losses, union_of, HierTrace, Hierarchy,
    HypothesisSet, RowSource, SearchMethod, SelectionResult, Strategy,
};
use crate::seed::{derive_seed, hash_f64s};
use crate::taskgen::{Backbone, Episode, Example, TaskDistribution};
use crate::zoo::{build_zoo, error_rate, save_zoo, train_adapter, AdapterTrainConfig, ModelZoo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Steel,
    ModelZoo,
    Union,
    SgdBaseline,
    VanillaPb,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Steel,
        Method::ModelZoo,
        Method::Union,
        Method::SgdBaseline,
        Method::VanillaPb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Steel => "steel",
            Method::ModelZoo => "model-zoo",
            Method::Union => "union",
            Method::SgdBaseline => "sgd-baseline",
            Method::VanillaPb => "vanilla-pb",
        }
    }

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Method::Steel => Some(Strategy::Steel),
            Method::ModelZoo => Some(Strategy::ModelZoo),
            Method::Union => Some(Strategy::Union),
            _ => None,
        }
    }

    fn enabled(self, m: &MethodsSection) -> bool {
        match self {
            Method::Steel => m.steel,
            Method::ModelZoo => m.model_zoo,
            Method::Union => m.union,
            Method::SgdBaseline => m.sgd_baseline,
            Method::VanillaPb => m.vanilla_pb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionInfo {
    pub index: usize,
    pub evaluations: usize,
    pub search: SearchMethod,
    pub provenance: RowSource,
    pub hypothesis_size: usize,
    pub hypothesis_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<HierTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub epochs: usize,
    /// Description length of the trained head under the quantization codec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coded_bits: Option<u64>,
    /// Certificate value with the coded length in place of one bit per
    /// parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coded_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    /// Adapter dimension.
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingInfo>,
    pub certificate: RiskCertificate,
    /// Query risk under the certificate's loss; absent when the episode has
    /// no query set.
    pub query_risk: Option<f64>,
    pub query_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub shots: usize,
    pub k: usize,
    /// Support examples, `shots * k`.
    pub n: usize,
    pub task_id: u64,
    pub seed: u64,
    pub methods: Vec<MethodResult>,
}

impl EpisodeResult {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }
}

struct PreparedSet {
    method: Method,
    set: HypothesisSet,
    hierarchy: Option<Hierarchy>,
}

/// Everything fixed before the first episode: task distribution, zoo,
/// diffusion checkpoint and hypothesis sets.
pub struct Pipeline {
    config: BenchConfig,
    dist: TaskDistribution,
    baseline: Backbone,
    zoo: Option<ModelZoo>,
    checkpoint: Option<DiffusionCheckpoint>,
    sets: Vec<PreparedSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub method: Method,
    pub size: usize,
    pub hash: String,
}

impl Pipeline {
    /// Trains the zoo and the diffusion model as the config requires.
    pub fn build(config: BenchConfig) -> Result<Self> {
        config.validate()?;
        let dist = TaskDistribution::new(config.task.clone())?;
        let zoo = if config.needs_zoo() {
            log::info!("training zoo of {} adapters", config.zoo.n);
            Some(build_zoo(
                &dist,
                config.zoo.n,
                &config.zoo.build_config(),
                derive_seed(config.master_seed, "harness.zoo", 0),
            )?)
        } else {
            None
        };
        let checkpoint = match (&zoo, config.needs_diffusion()) {
            (Some(z), true) => {
                log::info!("training diffusion model on {} x {} zoo", z.n(), z.d());
                Some(train_diffusion(
                    &z.matrix,
                    &config.diffusion,
                    derive_seed(config.master_seed, "harness.diffusion", 0),
                )?)
            }
            _ => None,
        };
        Self::from_parts(config, zoo, checkpoint)
    }

    /// Uses pre-built artifacts. Methods that need a missing artifact are a
    /// configuration error naming it.
    pub fn from_parts(config: BenchConfig, zoo: Option<ModelZoo>, checkpoint: Option<DiffusionCheckpoint>) -> Result<Self> {
        config.validate()?;
        let dist = TaskDistribution::new(config.task.clone())?;
        let baseline = Backbone::new(&config.baseline_backbone, config.task.input_dim);
        let m = &config.methods;
        let missing = |what: &str, who: &str| Error::Config(format!("missing artifact: {what} (needed by {who})"));
        if m.model_zoo && zoo.is_none() {
            return Err(missing("model zoo", "model-zoo"));
        }
        if m.union && zoo.is_none() {
            return Err(missing("model zoo", "union"));
        }
        if (m.steel || m.union) && checkpoint.is_none() {
            return Err(missing("diffusion checkpoint", if m.steel { "steel" } else { "union" }));
        }
        let d = dist.adapter_dim();
        if let Some(z) = &zoo {
            if z.d() != d {
                return Err(Error::Config(format!("zoo rows have d = {}, task features need d = {d}", z.d())));
            }
        }
        let samples = match &checkpoint {
            Some(c) if m.steel || m.union => {
                let seed = derive_seed(config.master_seed, "harness.sample", 0);
                log::info!("drawing {} diffusion samples", config.hypothesis.m);
                Some((sample_params(c, config.hypothesis.m, seed)?, c.hash()?, seed))
            }
            _ => None,
        };
        let mut sets = Vec::new();
        for method in [Method::Steel, Method::ModelZoo, Method::Union] {
            if !method.enabled(m) {
                continue;
            }
            let set = match method {
                Method::Steel => {
                    let (s, h, seed) = samples.clone().expect("checked above");
                    hypothesis_from_samples(s, h, seed)?
                }
                Method::ModelZoo => {
                    let z = zoo.as_ref().expect("checked above");
                    crate::select::build_hypothesis_set(Some(z), None, Strategy::ModelZoo, 0, 0)?
                }
                _ => {
                    let (s, h, seed) = samples.clone().expect("checked above");
                    union_of(zoo.as_ref().expect("checked above"), s, h, seed)?
                }
            };
            if set.dim() != d {
                return Err(Error::Config(format!("hypothesis rows have d = {}, expected {d}", set.dim())));
            }
            let hierarchy = match config.hypothesis.search {
                SearchKind::Hierarchical if set.size() >= 2 => Some(build_hierarchy(&set, &config.select)?),
                _ => None,
            };
            sets.push(PreparedSet { method, set, hierarchy });
        }
        Ok(Self {
            config,
            dist,
            baseline,
            zoo,
            checkpoint,
            sets,
        })
    }

    pub fn config(&self) -> &BenchConfig {
        &self.config
    }

    pub fn distribution(&self) -> &TaskDistribution {
        &self.dist
    }

    pub fn zoo(&self) -> Option<&ModelZoo> {
        self.zoo.as_ref()
    }

    pub fn checkpoint(&self) -> Option<&DiffusionCheckpoint> {
        self.checkpoint.as_ref()
    }

    pub fn hypothesis_set(&self, method: Method) -> Option<&HypothesisSet> {
        self.sets.iter().find(|s| s.method == method).map(|s| &s.set)
    }

    pub fn hypothesis_records(&self) -> Vec<HypothesisRecord> {
        self.sets
            .iter()
            .map(|s| HypothesisRecord {
                method: s.method,
                size: s.set.size(),
                hash: s.set.hash().to_string(),
            })
            .collect()
    }

    /// `(episode index, shots)` for every episode, shot settings outermost.
    pub fn episode_plan(&self) -> Vec<(usize, usize)> {
        let e = &self.config.episodes;
        e.shots
            .iter()
            .enumerate()
            .flat_map(|(si, &s)| (0..e.per_shot).map(move |j| (si * e.per_shot + j, s)))
            .collect()
    }

    /// Episode `index`. The task depends only on the position within a shot
    /// setting, so every shot count sees the same downstream tasks.
    pub fn episode(&self, index: usize, shots: usize) -> Result<Episode> {
        let per = self.config.episodes.per_shot;
        let j = (index % per) as u64;
        let master = self.config.master_seed;
        let task = self
            .dist
            .sample_task(1_000_000_000 + j, derive_seed(master, "harness.task", j));
        self.dist.sample_episode(
            &task,
            shots,
            self.dist.k(),
            self.config.episodes.query_per_class,
            derive_seed(master, "harness.episode", index as u64),
        )
    }
}

fn threshold_for(loss: Loss, k: usize) -> f64 {
    VacuousRule::ChanceLevel.threshold(k, loss.name(), loss.max_value())
}

fn query_stats(theta: &[f64], k: usize, loss: Loss, query: &[Example]) -> Result<(Option<f64>, Option<f64>)> {
    if query.is_empty() {
        return Ok((None, None));
    }
    let risk = loss.mean(theta, k, query)?;
    Ok((Some(risk), Some(1.0 - error_rate(theta, k, query))))
}

fn run_selection(p: &PreparedSet, support: &[Example], k: usize, loss: Loss) -> Result<SelectionResult> {
    match &p.hierarchy {
        Some(h) => h.select(&p.set, support, k, loss),
        None => exhaustive_select(&p.set, support, k, loss),
    }
}

/// Adapts, certifies and evaluates every enabled method on one episode.
/// Adaptation and certification read only the support set; the query set
/// is touched last.
pub fn run_episode(p: &Pipeline, episode: &Episode, index: usize) -> Result<EpisodeResult> {
    let cfg = &p.config;
    let k = episode.k;
    let loss = cfg.bounds.loss;
    let eps = cfg.bounds.epsilon;
    let c = loss.max_value();
    let n = episode.support.len();
    let threshold = threshold_for(loss, k);
    let mut methods = Vec::new();

    for prepared in &p.sets {
        let clock = Instant::now();
        let sel = run_selection(prepared, &episode.support, k, loss)?;
        let cert = finite_hypothesis_certificate(sel.r, prepared.set.size() as u64, n, eps, c)?
            .with_loss(loss)
            .with_seed(episode.seed)
            .with_threshold(threshold);
        let wall = clock.elapsed().as_secs_f64();
        let (query_risk, query_accuracy) = query_stats(&sel.theta.values, k, loss, &episode.query)?;
        methods.push(MethodResult {
            method: prepared.method,
            dim: prepared.set.dim(),
            selection: Some(SelectionInfo {
                index: sel.index,
                evaluations: sel.evaluations,
                search: sel.method,
                provenance: prepared.set.provenance()[sel.index],
                hypothesis_size: prepared.set.size(),
                hypothesis_hash: prepared.set.hash().to_string(),
                trace: sel.trace,
            }),
            training: None,
            certificate: cert,
            query_risk,
            query_accuracy,
            wall_time_s: cfg.output.wall_time.then_some(wall),
        });
    }

    if cfg.methods.sgd_baseline {
        let clock = Instant::now();
        let (support, query) = if cfg.sgd.wide_features {
            (
                p.baseline.refeaturize(&episode.support)?,
                p.baseline.refeaturize(&episode.query)?,
            )
        } else {
            (episode.support.clone(), episode.query.clone())
        };
        let train = AdapterTrainConfig {
            seed: derive_seed(episode.seed, "harness.sgd", 0),
            ..cfg.sgd.train.clone()
        };
        let theta = train_adapter(&support, k, &train)?.values;
        let r = loss.mean(&theta, k, &support)?;
        let dim = theta.len();
        let cert = best_case_quantization_certificate(r, dim, n, eps, c)?
            .with_loss(loss)
            .with_seed(episode.seed)
            .with_threshold(threshold);
        let coded = quantization_complexity(&theta, &cfg.sgd.codec)?;
        let coded_bound = r + quantization_bound_complexity(coded, n, eps, c)?;
        let wall = clock.elapsed().as_secs_f64();
        let (query_risk, query_accuracy) = query_stats(&theta, k, loss, &query)?;
        methods.push(MethodResult {
            method: Method::SgdBaseline,
            dim,
            selection: None,
            training: Some(TrainingInfo {
                epochs: train.epochs,
                coded_bits: Some(coded),
                coded_bound: Some(coded_bound),
                final_objective: None,
            }),
            certificate: cert,
            query_risk,
            query_accuracy,
            wall_time_s: cfg.output.wall_time.then_some(wall),
        });
    }

    if cfg.methods.vanilla_pb {
        let clock = Instant::now();
        let train = AdapterTrainConfig {
            seed: derive_seed(episode.seed, "harness.pb.init", 0),
            ..cfg.sgd.train.clone()
        };
        let mu0 = train_adapter(&episode.support, k, &train)?.values;
        let fit = optimize_posterior(
            &mu0,
            &episode.support,
            k,
            eps,
            &cfg.vanilla_pb,
            derive_seed(episode.seed, "harness.pb.fit", 0),
        )?;
        let mc_seed = derive_seed(episode.seed, "harness.pb.mc", 0);
        let cert = vanilla_pacbayes_certificate(&fit.posterior, &episode.support, k, loss, eps, cfg.vanilla_pb.mc_eval, mc_seed)?
            .with_threshold(threshold)
            .with_seed(episode.seed);
        let wall = clock.elapsed().as_secs_f64();
        let (query_risk, query_accuracy) = if episode.query.is_empty() {
            (None, None)
        } else {
            let risk = gibbs_risk(&fit.posterior, &episode.query, k, loss, cfg.vanilla_pb.mc_eval, mc_seed)?;
            let err = gibbs_risk(&fit.posterior, &episode.query, k, Loss::ZeroOne, cfg.vanilla_pb.mc_eval, mc_seed)?;
            (Some(risk), Some(1.0 - err))
        };
        methods.push(MethodResult {
            method: Method::VanillaPb,
            dim: mu0.len(),
            selection: None,
            training: Some(TrainingInfo {
                epochs: cfg.vanilla_pb.steps,
                coded_bits: None,
                coded_bound: None,
                final_objective: fit.objective.last().copied(),
            }),
            certificate: cert,
            query_risk,
            query_accuracy,
            wall_time_s: cfg.output.wall_time.then_some(wall),
        });
    }

    Ok(EpisodeResult {
        episode: index,
        shots: episode.n,
        k,
        n,
        task_id: episode.task.id,
        seed: episode.seed,
        methods,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub episode: usize,
    pub shots: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub config_version: u32,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoo_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    /// Recorded before the first episode ran.
    pub hypothesis_sets: Vec<HypothesisRecord>,
    pub episodes_planned: usize,
    pub episodes_completed: usize,
    pub failures: Vec<EpisodeFailure>,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub manifest: BenchManifest,
    pub results: Vec<EpisodeResult>,
    pub stats: Vec<AggregateStats>,
}

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const BOUND_VS_SHOTS_FILE: &str = "bound_vs_shots.csv";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Trains everything from `config` and runs the benchmark into `out_dir`.
pub fn run_benchmark(config: &BenchConfig, out_dir: &Path) -> Result<BenchOutcome> {
    let pipeline = Pipeline::build(config.clone())?;
    run_benchmark_with(&pipeline, out_dir)
}

/// Runs every planned episode on a prepared pipeline. Episodes run
/// concurrently; results are written in episode order. Failed episodes are
/// logged and excluded from the aggregate.
pub fn run_benchmark_with(p: &Pipeline, out_dir: &Path) -> Result<BenchOutcome> {
    fs::create_dir_all(out_dir)?;
    let cfg = &p.config;
    let hypothesis_sets = p.hypothesis_records();
    if cfg.output.save_artifacts {
        save_artifacts(p, &out_dir.join("artifacts"))?;
    }
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string()?)?;

    let plan = p.episode_plan();
    let outcomes: Vec<(usize, usize, Result<EpisodeResult>)> = plan
        .par_iter()
        .map(|&(i, s)| (i, s, p.episode(i, s).and_then(|ep| run_episode(p, &ep, i))))
        .collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (i, s, r) in outcomes {
        match r {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("episode {i} ({s}-shot) failed: {e}");
                failures.push(EpisodeFailure {
                    episode: i,
                    shots: s,
                    error: e.to_string(),
                });
            }
        }
    }

    let mut jsonl = String::new();
    for r in &results {
        jsonl.push_str(&to_json_line(r)?);
        jsonl.push('\n');
    }
    fs::write(out_dir.join(EPISODES_FILE), jsonl)?;

    if cfg.output.learning_curve_stride > 0 {
        write_curves(p, &plan, &out_dir.join(CURVE_FILE))?;
    }

    let rule = VacuousRule::ChanceLevel;
    let stats = if results.is_empty() {
        Vec::new()
    } else {
        let stats = aggregate(&results, rule)?;
        fs::write(out_dir.join(AGGREGATE_FILE), aggregate_csv(&stats))?;
        fs::write(out_dir.join(BOUND_VS_SHOTS_FILE), bound_vs_shots_csv(&results, rule)?)?;
        stats
    };

    let manifest = BenchManifest {
        config_version: cfg.version,
        master_seed: cfg.master_seed,
        zoo_hash: p.zoo.as_ref().map(|z| hash_f64s(z.matrix.as_slice())),
        checkpoint_hash: p.checkpoint.as_ref().map(|c| c.hash()).transpose()?,
        hypothesis_sets,
        episodes_planned: plan.len(),
        episodes_completed: results.len(),
        failures,
    };
    fs::write(out_dir.join(MANIFEST_FILE), to_json_pretty(&manifest)?)?;
    if results.is_empty() {
        return Err(Error::NoResults("every episode failed".into()));
    }
    Ok(BenchOutcome {
        manifest,
        results,
        stats,
    })
}

fn save_artifacts(p: &Pipeline, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    if let Some(z) = &p.zoo {
        save_zoo(z, &dir.join("zoo.stzo"))?;
    }
    if let Some(c) = &p.checkpoint {
        c.save(&dir.join("diffusion.stdf"))?;
    }
    for s in &p.sets {
        s.set.save(&dir.join(format!("hyp-{}.stzo", s.method.name())))?;
    }
    Ok(())
}

/// Learning curves of the first hypothesis set on the first episode of every
/// shot setting.
fn write_curves(p: &Pipeline, plan: &[(usize, usize)], path: &Path) -> Result<()> {
    let Some(prepared) = p.sets.first() else {
        return Ok(());
    };
    let cfg = &p.config;
    let loss = cfg.bounds.loss;
    let mut out = fs::File::create(path)?;
    writeln!(out, "method,episode,shots,m,best_r,complexity,bound")?;
    for &(i, s) in plan.iter().filter(|(i, _)| i % cfg.episodes.per_shot == 0) {
        let ep = p.episode(i, s)?.without_query();
        let losses = support_losses(&prepared.set, &ep.support, ep.k, loss)?;
        let curve = curve_from_losses(
            &losses,
            ep.support.len(),
            cfg.bounds.epsilon,
            loss.max_value(),
            cfg.output.learning_curve_stride,
        )?;
        for pt in curve {
            writeln!(
                out,
                "{},{i},{s},{},{},{},{}",
                prepared.method.name(),
                pt.m,
                fmt_f64(pt.best_r),
                fmt_f64(pt.complexity),
                fmt_f64(pt.bound)
            )?;
        }
    }
    Ok(())
}
