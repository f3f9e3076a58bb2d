//! Finite hypothesis sets and gradient-free evaluate-then-select adaptation.

mod hier;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use hier::{
    build_hierarchy, hierarchical_select, k_grid, FinalMetric, HierConfig, HierTrace, Hierarchy,
    SilhouetteObjective,
};

use crate::bounds::Loss;
use crate::diffusion::{sample_params, DiffusionCheckpoint};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed::sha256_hex;
use crate::taskgen::Example;
use crate::zoo::{store, AdapterVector, ModelZoo, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSource {
    Zoo,
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    ModelZoo,
    Steel,
    Union,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::ModelZoo => "model-zoo",
            Strategy::Steel => "steel",
            Strategy::Union => "union",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoo_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
}

/// An immutable candidate set. Its size and hash are fixed at construction,
/// before any downstream data is looked at.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    matrix: Matrix,
    provenance: Vec<RowSource>,
    strategy: Strategy,
    source: SourceDescriptor,
    hash: String,
}

#[derive(Serialize, Deserialize)]
struct HypManifest {
    n: usize,
    d: usize,
    strategy: Strategy,
    provenance: Vec<RowSource>,
    source: SourceDescriptor,
    hash: String,
}

fn content_hash(matrix: &Matrix, provenance: &[RowSource], strategy: Strategy) -> String {
    let mut bytes = Vec::with_capacity(matrix.as_slice().len() * 8 + provenance.len() + 16);
    bytes.extend_from_slice(strategy.name().as_bytes());
    bytes.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
    for v in matrix.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend(provenance.iter().map(|p| *p as u8));
    sha256_hex(&bytes)
}

impl HypothesisSet {
    /// Rows are rounded to `f32`, the precision they are stored at, so a
    /// saved set reloads bit-identically.
    pub fn new(
        mut matrix: Matrix,
        provenance: Vec<RowSource>,
        strategy: Strategy,
        source: SourceDescriptor,
    ) -> Result<Self> {
        if matrix.rows() == 0 {
            return Err(Error::invalid("hypothesis set must hold at least one row"));
        }
        if provenance.len() != matrix.rows() {
            return Err(Error::invalid("one provenance tag per row is required"));
        }
        matrix.ensure_finite("hypothesis set")?;
        store::round_to_f32(matrix.as_mut_slice());
        let hash = content_hash(&matrix, &provenance, strategy);
        Ok(Self {
            matrix,
            provenance,
            strategy,
            source,
            hash,
        })
    }

    /// `|Theta|`, the count entering the certificate.
    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn provenance(&self) -> &[RowSource] {
        &self.provenance
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn source(&self) -> &SourceDescriptor {
        &self.source
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn adapter(&self, i: usize) -> AdapterVector {
        let provenance = match self.provenance[i] {
            RowSource::Zoo => Provenance::Trained,
            RowSource::Diffusion => Provenance::DiffusionSample,
        };
        AdapterVector {
            values: self.row(i).to_vec(),
            task_id: None,
            provenance,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let man = HypManifest {
            n: self.size(),
            d: self.dim(),
            strategy: self.strategy,
            provenance: self.provenance.clone(),
            source: self.source.clone(),
            hash: self.hash.clone(),
        };
        store::write(path, &self.matrix, &man)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (matrix, man): (Matrix, HypManifest) = store::read(path)?;
        let set = Self::new(matrix, man.provenance, man.strategy, man.source)?;
        if set.hash != man.hash {
            return Err(Error::Corruption("hypothesis set hash does not match its rows".into()));
        }
        Ok(set)
    }
}

/// Wraps diffusion samples as a `steel` hypothesis set.
pub fn hypothesis_from_samples(samples: Matrix, ckpt_hash: String, seed: u64) -> Result<HypothesisSet> {
    let n = samples.rows();
    HypothesisSet::new(
        samples,
        vec![RowSource::Diffusion; n],
        Strategy::Steel,
        SourceDescriptor {
            zoo_hash: None,
            checkpoint_hash: Some(ckpt_hash),
            sample_seed: Some(seed),
        },
    )
}

fn zoo_hash(zoo: &ModelZoo) -> String {
    crate::seed::hash_f64s(zoo.matrix.as_slice())
}

/// `model-zoo` uses the zoo rows, `steel` draws `m` diffusion samples, and
/// `union` stacks the zoo on top of the samples.
pub fn build_hypothesis_set(
    zoo: Option<&ModelZoo>,
    ckpt: Option<&DiffusionCheckpoint>,
    strategy: Strategy,
    m: usize,
    seed: u64,
) -> Result<HypothesisSet> {
    let need_zoo = || zoo.ok_or_else(|| Error::invalid(format!("{} strategy needs a model zoo", strategy.name())));
    let need_ckpt = || {
        ckpt.ok_or_else(|| Error::invalid(format!("{} strategy needs a diffusion checkpoint", strategy.name())))
    };
    match strategy {
        Strategy::ModelZoo => {
            let z = need_zoo()?;
            HypothesisSet::new(
                z.matrix.clone(),
                vec![RowSource::Zoo; z.n()],
                strategy,
                SourceDescriptor {
                    zoo_hash: Some(zoo_hash(z)),
                    ..Default::default()
                },
            )
        }
        Strategy::Steel => {
            let c = need_ckpt()?;
            hypothesis_from_samples(sample_params(c, m, seed)?, c.hash()?, seed)
        }
        Strategy::Union => {
            let z = need_zoo()?;
            let c = need_ckpt()?;
            let samples = sample_params(c, m, seed)?;
            union_of(z, samples, c.hash()?, seed)
        }
    }
}

/// Zoo rows first, then samples, provenance preserved.
pub fn union_of(zoo: &ModelZoo, samples: Matrix, ckpt_hash: String, seed: u64) -> Result<HypothesisSet> {
    let matrix = zoo.matrix.vstack(&samples)?;
    let mut prov = vec![RowSource::Zoo; zoo.n()];
    prov.extend(std::iter::repeat_n(RowSource::Diffusion, samples.rows()));
    HypothesisSet::new(
        matrix,
        prov,
        Strategy::Union,
        SourceDescriptor {
            zoo_hash: Some(zoo_hash(zoo)),
            checkpoint_hash: Some(ckpt_hash),
            sample_seed: Some(seed),
        },
    )
}

/// Mean loss of `theta` over the support set.
pub fn eval_support_loss(theta: &[f64], support: &[Example], k: usize, loss: Loss) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::invalid("support set is empty"));
    }
    if support.iter().any(|e| e.label >= k) {
        return Err(Error::invalid("support label outside 0..k"));
    }
    let d_feat = support[0].features.len();
    if theta.len() != crate::zoo::head_dim(k, d_feat) {
        return Err(Error::invalid(format!(
            "adapter of length {} does not fit a {k}-way head over {d_feat} features",
            theta.len()
        )));
    }
    loss.mean(theta, k, support)
}

/// Support loss of every row, in row order.
pub fn support_losses(hyp: &HypothesisSet, support: &[Example], k: usize, loss: Loss) -> Result<Vec<f64>> {
    (0..hyp.size())
        .into_par_iter()
        .map(|i| {
            eval_support_loss(hyp.row(i), support, k, loss)
                .map_err(|e| Error::invalid(format!("row {i}: {e}")))
        })
        .collect()
}

/// Lowest value, ties to the lowest position.
pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Exhaustive,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub index: usize,
    pub theta: AdapterVector,
    pub r: f64,
    pub evaluations: usize,
    pub method: SearchMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<HierTrace>,
}

pub fn exhaustive_select(hyp: &HypothesisSet, support: &[Example], k: usize, loss: Loss) -> Result<SelectionResult> {
    let losses = support_losses(hyp, support, k, loss)?;
    let index = argmin(&losses);
    Ok(SelectionResult {
        index,
        theta: hyp.adapter(index),
        r: losses[index],
        evaluations: losses.len(),
        method: SearchMethod::Exhaustive,
        trace: None,
    })
}
