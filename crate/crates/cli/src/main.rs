//! `certzoo` command-line front end.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use certzoo_core::bounds::{
    best_case_quantization_certificate, finite_hypothesis_certificate, quantization_certificate,
    quantization_complexity, CodecConfig, RiskCertificate,
};
use certzoo_core::diffusion::{train_diffusion, DiffusionCheckpoint};
use certzoo_core::error::{Error, Result};
use certzoo_core::harness::{report, run_benchmark, to_json_line, to_json_pretty, BenchConfig, VacuousRule};
use certzoo_core::seed::derive_seed;
use certzoo_core::select::{build_hypothesis_set, exhaustive_select, hierarchical_select, HypothesisSet, SelectionResult, Strategy};
use certzoo_core::taskgen::{read_episodes_jsonl, write_episode_jsonl, Episode, TaskDistribution, TaskDistributionConfig};
use certzoo_core::zoo::{build_zoo, load_zoo, save_zoo};

#[derive(Parser)]
#[command(name = "certzoo", version, about = "Risk certificates for adapters selected from a diffusion-generated model zoo")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Versioned TOML config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs; relative output paths are placed here.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample downstream episodes as JSONL.
    GenTasks {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long)]
        query_per_class: Option<usize>,
        #[arg(long, default_value = "episodes.jsonl")]
        out: PathBuf,
    },
    /// Train one adapter per upstream task.
    TrainZoo {
        /// TOML task distribution; defaults to the config's [task] section.
        #[arg(long)]
        dist: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "zoo.stzo")]
        out: PathBuf,
    },
    /// Fit the diffusion model to a zoo.
    TrainDiffusion {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "ckpt.stdf")]
        out: PathBuf,
    },
    /// Build a hypothesis set.
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        zoo: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StrategyArg::Steel)]
        strategy: StrategyArg,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value = "hyp.stzo")]
        out: PathBuf,
    },
    /// Select an adapter for one episode using its support set only.
    Adapt {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        /// Line of the episode file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = SearchArg::Exhaustive)]
        search: SearchArg,
        #[arg(long, default_value = "sel.json")]
        out: PathBuf,
    },
    /// Compute a risk certificate.
    Certify(CertifyArgs),
    /// Run the full benchmark into --out-dir.
    Bench,
    /// Summarize a results directory (defaults to --out-dir).
    Report {
        dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::Finite)]
    family: FamilyArg,
    /// Selection JSON whose adapter is certified.
    #[arg(long)]
    selection: Option<PathBuf>,
    /// Episode file; the support risk is recomputed on it.
    #[arg(long)]
    episode: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Hypothesis set supplying `M`.
    #[arg(long)]
    hyp: Option<PathBuf>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<u64>,
    #[arg(long)]
    bits: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Steel,
    ModelZoo,
    Union,
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchArg {
    Exhaustive,
    Hier,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Finite,
    Quantization,
    BestCase,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

struct Ctx {
    config: BenchConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn out(&self, p: &Path) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(if p.is_absolute() { p.to_path_buf() } else { self.out_dir.join(p) })
    }

    fn seed(&self, what: &str) -> u64 {
        derive_seed(self.config.master_seed, what, 0)
    }
}

fn need(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} {} not found", path.display())))
    }
}

fn read_episode(path: &Path, index: usize) -> Result<Episode> {
    need(path, "episode file")?;
    let eps = read_episodes_jsonl(BufReader::new(fs::File::open(path)?))?;
    let n = eps.len();
    eps.into_iter()
        .nth(index)
        .ok_or_else(|| Error::MissingArtifact(format!("episode {index} not in {} ({n} episodes)", path.display())))
}

fn load_hyp(path: &Path) -> Result<HypothesisSet> {
    need(path, "hypothesis set")?;
    HypothesisSet::load(path)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.master_seed = s;
    }
    let ctx = Ctx {
        config,
        out_dir: cli.out_dir,
    };
    let cfg = &ctx.config;
    match cli.command {
        Command::GenTasks {
            count,
            shots,
            query_per_class,
            out,
        } => {
            let dist = TaskDistribution::new(cfg.task.clone())?;
            let q = query_per_class.unwrap_or(cfg.episodes.query_per_class);
            let path = ctx.out(&out)?;
            let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
            for i in 0..count as u64 {
                let task = dist.sample_task(i, derive_seed(cfg.master_seed, "cli.task", i));
                let ep = dist.sample_episode(&task, shots, dist.k(), q, derive_seed(cfg.master_seed, "cli.episode", i))?;
                write_episode_jsonl(&mut f, &ep)?;
            }
            f.flush()?;
            log::info!("wrote {count} episodes to {}", path.display());
        }
        Command::TrainZoo { dist, n, out } => {
            let task_cfg = match dist {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    let t: TaskDistributionConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
                    t.validate()?;
                    t
                }
                None => cfg.task.clone(),
            };
            let d = TaskDistribution::new(task_cfg)?;
            let zoo = build_zoo(&d, n.unwrap_or(cfg.zoo.n), &cfg.zoo.build_config(), ctx.seed("harness.zoo"))?;
            let path = ctx.out(&out)?;
            save_zoo(&zoo, &path)?;
            log::info!("wrote {} x {} zoo to {}", zoo.n(), zoo.d(), path.display());
        }
        Command::TrainDiffusion { zoo, epochs, out } => {
            need(&zoo, "zoo")?;
            let z = load_zoo(&zoo)?;
            let mut dc = cfg.diffusion.clone();
            if let Some(e) = epochs {
                dc.epochs = e;
            }
            let ckpt = train_diffusion(&z.matrix, &dc, ctx.seed("harness.diffusion"))?;
            let path = ctx.out(&out)?;
            ckpt.save(&path)?;
            log::info!("wrote checkpoint to {}", path.display());
        }
        Command::Sample {
            ckpt,
            zoo,
            strategy,
            m,
            out,
        } => {
            let ckpt = match ckpt {
                Some(p) => {
                    need(&p, "checkpoint")?;
                    Some(DiffusionCheckpoint::load(&p)?)
                }
                None => None,
            };
            let zoo = match zoo {
                Some(p) => {
                    need(&p, "zoo")?;
                    Some(load_zoo(&p)?)
                }
                None => None,
            };
            let strategy = match strategy {
                StrategyArg::Steel => Strategy::Steel,
                StrategyArg::ModelZoo => Strategy::ModelZoo,
                StrategyArg::Union => Strategy::Union,
            };
            let missing = match strategy {
                Strategy::Steel if ckpt.is_none() => Some("--ckpt"),
                Strategy::ModelZoo if zoo.is_none() => Some("--zoo"),
                Strategy::Union if ckpt.is_none() => Some("--ckpt"),
                Strategy::Union if zoo.is_none() => Some("--zoo"),
                _ => None,
            };
            if let Some(flag) = missing {
                return Err(Error::Config(format!("{} strategy needs {flag}", strategy.name())));
            }
            let hyp = build_hypothesis_set(
                zoo.as_ref(),
                ckpt.as_ref(),
                strategy,
                m.unwrap_or(cfg.hypothesis.m),
                cli.seed.unwrap_or_else(|| ctx.seed("harness.sample")),
            )?;
            let path = ctx.out(&out)?;
            hyp.save(&path)?;
            log::info!("wrote {} hypotheses ({}) to {}", hyp.size(), hyp.hash(), path.display());
        }
        Command::Adapt {
            hyp,
            episode,
            index,
            search,
            out,
        } => {
            let h = load_hyp(&hyp)?;
            // adaptation never sees the query set
            let ep = read_episode(&episode, index)?.without_query();
            let loss = cfg.bounds.loss;
            let sel = match search {
                SearchArg::Exhaustive => exhaustive_select(&h, &ep.support, ep.k, loss)?,
                SearchArg::Hier => hierarchical_select(&h, &ep.support, ep.k, loss, &cfg.select)?,
            };
            let path = ctx.out(&out)?;
            write_json(&path, &sel)?;
            println!("{}", to_json_line(&serde_json::json!({"index": sel.index, "r": sel.r, "evaluations": sel.evaluations}))?);
        }
        Command::Certify(a) => {
            let cert = certify(&a, cfg)?;
            let line = to_json_line(&cert)?;
            if let Some(o) = &a.out {
                write_json(&ctx.out(o)?, &cert)?;
            }
            println!("{line}");
        }
        Command::Bench => {
            let outcome = run_benchmark(cfg, &ctx.out_dir)?;
            let rep = report(&ctx.out_dir, VacuousRule::ChanceLevel)?;
            print!("{}", rep.summary);
            log::info!(
                "{} of {} episodes completed",
                outcome.manifest.episodes_completed,
                outcome.manifest.episodes_planned
            );
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(|| ctx.out_dir.clone());
            let rep = report(&dir, VacuousRule::ChanceLevel)?;
            print!("{}", rep.summary);
        }
    }
    Ok(())
}

fn certify(a: &CertifyArgs, cfg: &BenchConfig) -> Result<RiskCertificate> {
    let eps = a.epsilon.unwrap_or(cfg.bounds.epsilon);
    let loss = cfg.bounds.loss;
    let c = loss.max_value();
    let sel: Option<SelectionResult> = match &a.selection {
        Some(p) => {
            need(p, "selection")?;
            Some(serde_json::from_str(&fs::read_to_string(p)?)?)
        }
        None => None,
    };
    let (r, n) = match (&sel, &a.episode) {
        (Some(s), Some(ep)) => {
            let ep = read_episode(ep, a.index)?;
            (loss.mean(&s.theta.values, ep.k, &ep.support)?, ep.support.len())
        }
        _ => match (a.r, a.n) {
            (Some(r), Some(n)) => (r, n),
            _ => {
                return Err(Error::Config(
                    "certify needs --selection with --episode, or --r with --n".into(),
                ))
            }
        },
    };
    let cert = match a.family {
        FamilyArg::Finite => {
            let m = match (&a.hyp, a.m) {
                (Some(h), _) => load_hyp(h)?.size() as u64,
                (None, Some(m)) => m,
                _ => return Err(Error::Config("finite family needs --hyp or --m".into())),
            };
            finite_hypothesis_certificate(r, m, n, eps, c)?
        }
        FamilyArg::Quantization => {
            let k = match (a.bits, &sel) {
                (Some(k), _) => k,
                (None, Some(s)) => quantization_complexity(&s.theta.values, &CodecConfig::default())?,
                _ => return Err(Error::Config("quantization family needs --bits or --selection".into())),
            };
            quantization_certificate(r, k, n, eps, c)?
        }
        FamilyArg::BestCase => {
            let d = match (a.dim, &sel) {
                (Some(d), _) => d,
                (None, Some(s)) => s.theta.values.len(),
                _ => return Err(Error::Config("best-case family needs --dim or --selection".into())),
            };
            best_case_quantization_certificate(r, d, n, eps, c)?
        }
    };
    Ok(cert.with_loss(loss))
}
