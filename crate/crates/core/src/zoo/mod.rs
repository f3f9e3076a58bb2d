//! Per-task adapters and the model zoo built from them.

mod head;
pub mod store;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use head::{
    cross_entropy, error_rate, feat_dim, head_dim, logits, predict, probabilities, soft_error,
};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, OptimizerConfig, OptimizerState};
use crate::seed::{derive_seed, sha256_hex};
use crate::taskgen::{Example, TaskDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Trained,
    DiffusionSample,
    Medoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterVector {
    pub values: Vec<f64>,
    pub task_id: Option<u64>,
    pub provenance: Provenance,
}

impl AdapterVector {
    pub fn new(values: Vec<f64>, task_id: Option<u64>, provenance: Provenance) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("adapter has non-finite entries".into()));
        }
        Ok(Self {
            values,
            task_id,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            optimizer: OptimizerConfig::adam(0.05),
            seed: 0,
        }
    }
}

/// Full-batch training of a zero-initialized linear head on `support` by
/// minimizing mean cross-entropy.
pub fn train_adapter(support: &[Example], k: usize, cfg: &AdapterTrainConfig) -> Result<AdapterVector> {
    if support.is_empty() {
        return Err(Error::invalid("cannot train an adapter on an empty support set"));
    }
    if let Some(e) = support.iter().find(|e| e.label >= k) {
        return Err(Error::invalid(format!("label {} out of range for k = {k}", e.label)));
    }
    let d_feat = support[0].features.len();
    let dim = head_dim(k, d_feat);
    let mut theta = vec![0.0; dim];
    let mut opt = OptimizerState::new(cfg.optimizer, dim, &[])?;
    let mut last_finite = theta.clone();
    for epoch in 0..cfg.epochs {
        let (loss, grad) = cross_entropy(&theta, k, support);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingFailure {
                step: epoch,
                reason: "non-finite loss".into(),
                last_finite,
            });
        }
        last_finite.copy_from_slice(&theta);
        opt.step(&mut theta, &grad)?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingFailure {
                step: epoch,
                reason: "parameters became non-finite".into(),
                last_finite,
            });
        }
    }
    AdapterVector::new(theta, None, Provenance::Trained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooConfig {
    /// Shots per class in each upstream task's training episode.
    pub shots: usize,
    pub train: AdapterTrainConfig,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            train: AdapterTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub n: usize,
    pub d: usize,
    pub task_ids: Vec<u64>,
    pub task_seeds: Vec<u64>,
    pub episode_seeds: Vec<u64>,
    pub master_seed: u64,
    /// SHA-256 of the task-distribution and zoo configs.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelZoo {
    pub matrix: Matrix,
    pub manifest: ZooManifest,
}

impl ModelZoo {
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn d(&self) -> usize {
        self.matrix.cols()
    }

    fn check(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::Corruption("zoo has no rows".into()));
        }
        if self.manifest.n != self.n() || self.manifest.d != self.d() {
            return Err(Error::Corruption("zoo manifest disagrees with matrix".into()));
        }
        if self.manifest.task_ids.len() != self.n() {
            return Err(Error::Corruption("zoo manifest task ids do not cover every row".into()));
        }
        self.matrix.ensure_finite("zoo")
    }
}

/// Trains one adapter per upstream task. Rows are ordered by task index and
/// stored at `f32` precision, so an in-memory zoo equals its saved form.
pub fn build_zoo(dist: &TaskDistribution, n: usize, cfg: &ZooConfig, master_seed: u64) -> Result<ModelZoo> {
    if n == 0 {
        return Err(Error::invalid("zoo size must be at least 1"));
    }
    if cfg.shots == 0 {
        return Err(Error::invalid("zoo episodes need at least one shot"));
    }
    let k = dist.k();
    let rows: Vec<(u64, u64, Vec<f64>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let task_seed = derive_seed(master_seed, "zoo.task", i);
            let ep_seed = derive_seed(master_seed, "zoo.episode", i);
            let task = dist.sample_task(i, task_seed);
            let ep = dist.sample_episode(&task, cfg.shots, k, 1, ep_seed)?;
            let train = AdapterTrainConfig {
                seed: derive_seed(master_seed, "zoo.train", i),
                ..cfg.train.clone()
            };
            let mut theta = train_adapter(&ep.support, k, &train)
                .map_err(|e| Error::Task {
                    task_id: i,
                    source: Box::new(e),
                })?
                .values;
            store::round_to_f32(&mut theta);
            Ok((task_seed, ep_seed, theta))
        })
        .collect::<Result<_>>()?;

    let d = dist.adapter_dim();
    let mut matrix = Matrix::zeros(n, d);
    for (i, (_, _, theta)) in rows.iter().enumerate() {
        matrix.row_mut(i).copy_from_slice(theta);
    }
    let cfg_json = serde_json::to_vec(&(dist.config(), cfg))?;
    Ok(ModelZoo {
        matrix,
        manifest: ZooManifest {
            n,
            d,
            task_ids: (0..n as u64).collect(),
            task_seeds: rows.iter().map(|r| r.0).collect(),
            episode_seeds: rows.iter().map(|r| r.1).collect(),
            master_seed,
            config_hash: sha256_hex(&cfg_json),
        },
    })
}

pub fn save_zoo(zoo: &ModelZoo, path: &Path) -> Result<()> {
    zoo.check()?;
    store::write(path, &zoo.matrix, &zoo.manifest)
}

pub fn load_zoo(path: &Path) -> Result<ModelZoo> {
    let (matrix, manifest) = store::read(path)?;
    let zoo = ModelZoo { matrix, manifest };
    zoo.check()?;
    Ok(zoo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::TaskDistributionConfig;

    fn dist() -> TaskDistribution {
        TaskDistribution::new(TaskDistributionConfig::default()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let d = dist();
        let task = d.sample_task(0, 1);
        let ep = d.sample_episode(&task, 4, 5, 1, 2).unwrap();
        let cfg = AdapterTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let a = train_adapter(&ep.support, 5, &cfg).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
        assert_eq!(a.dim(), 45);
    }

    #[test]
    fn training_is_deterministic_and_helps() {
        let d = dist();
        let task = d.sample_task(0, 11);
        let ep = d.sample_episode(&task, 8, 5, 1, 12).unwrap();
        let cfg = AdapterTrainConfig::default();
        let a = train_adapter(&ep.support, 5, &cfg).unwrap();
        assert_eq!(a, train_adapter(&ep.support, 5, &cfg).unwrap());
        let init = vec![0.0; 45];
        assert!(error_rate(&a.values, 5, &ep.support) <= error_rate(&init, 5, &ep.support));
    }

    #[test]
    fn train_errors() {
        let cfg = AdapterTrainConfig::default();
        assert!(matches!(train_adapter(&[], 5, &cfg), Err(Error::InvalidArgument(_))));
        let bad = vec![Example {
            raw: vec![],
            features: vec![f64::MAX, 1.0],
            label: 0,
        }];
        let mut huge = cfg.clone();
        huge.optimizer.lr = 1e308;
        match train_adapter(&bad, 2, &huge) {
            Err(Error::TrainingFailure { last_finite, .. }) => {
                assert!(last_finite.iter().all(|v| v.is_finite()))
            }
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn small_zoo_bookkeeping_and_round_trip() {
        let d = dist();
        let cfg = ZooConfig {
            shots: 4,
            train: AdapterTrainConfig {
                epochs: 30,
                ..Default::default()
            },
        };
        let zoo = build_zoo(&d, 6, &cfg, 99).unwrap();
        assert_eq!(zoo.manifest.n, zoo.matrix.rows());
        assert_eq!(zoo.manifest.task_ids, vec![0, 1, 2, 3, 4, 5]);
        let one = build_zoo(&d, 1, &cfg, 99).unwrap();
        assert_eq!(one.n(), 1);
        assert_eq!(one.matrix.row(0), zoo.matrix.row(0));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zoo.stzo");
        save_zoo(&zoo, &path).unwrap();
        let back = load_zoo(&path).unwrap();
        assert_eq!(back, zoo);

        // truncated file
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_zoo(&path), Err(Error::Corruption(_))));
        assert!(build_zoo(&d, 0, &cfg, 1).is_err());
    }
}
