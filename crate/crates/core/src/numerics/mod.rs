//! Numerical kernel shared by every other module: dense matrices, MLPs with
//! reverse-mode gradients, optimizers, clustering and embeddings. All
//! arithmetic is `f64`.

mod cluster;
mod embed;
mod gradcheck;
mod matrix;
mod mlp;
mod optim;

pub use cluster::{
    kmeans_cluster, medoid_of, pairwise_distances, silhouette_from_distances, silhouette_score,
    Clustering,
};
pub use embed::sinusoidal_embed;
pub use gradcheck::grad_check;
pub use matrix::{dist, dot, gemm, gemm_slice, norm2, sq_dist, GemmOperand, Matrix};
pub use mlp::{Activation, Linear, MlpCache, MlpNet, ParamLayout};
pub use optim::{onecycle_lr, optimizer_step, Algorithm, OneCycle, OptimizerConfig, OptimizerState};

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
