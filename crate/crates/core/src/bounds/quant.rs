//! Description length of a parameter vector under scalar quantization and
//! an ideal entropy coder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kmeans_cluster, Matrix};

/// Bits stored per codebook entry.
pub const CODEBOOK_ENTRY_BITS: u64 = 32;
/// Gap between the Shannon ideal length and a practical arithmetic coder.
pub const CODER_MARGIN_BITS: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub levels: usize,
    /// Count the `32 L` bits needed to transmit the codebook.
    pub include_codebook: bool,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            include_codebook: true,
            seed: 0,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationCodec {
    pub codebook: Vec<f64>,
    /// Occurrences of each codebook entry; sums to `d`.
    pub counts: Vec<usize>,
    /// Codebook index of every parameter.
    pub symbols: Vec<usize>,
}

impl QuantizationCodec {
    pub fn levels(&self) -> usize {
        self.codebook.len()
    }

    /// `sum_i -log2 p(c_i)` with empirical symbol frequencies.
    pub fn payload_bits(&self) -> f64 {
        let d: usize = self.counts.iter().sum();
        let d = d as f64;
        self.counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| -(c as f64) * (c as f64 / d).log2())
            .sum()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.symbols.iter().map(|&s| self.codebook[s]).collect()
    }
}

/// 1-D k-means codebook over the entries of `theta`. The number of levels is
/// capped at the number of distinct values.
pub fn quantize(theta: &[f64], cfg: &CodecConfig) -> Result<QuantizationCodec> {
    if theta.is_empty() {
        return Err(Error::invalid("cannot quantize an empty vector"));
    }
    if cfg.levels == 0 {
        return Err(Error::invalid("codebook needs at least one level"));
    }
    let mut distinct = theta.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let levels = cfg.levels.min(distinct.len());
    let points = Matrix::from_vec(theta.len(), 1, theta.to_vec())?;
    let cl = kmeans_cluster(&points, levels, cfg.seed, cfg.max_iters)?;
    let codebook = cl.centroids.as_slice().to_vec();
    Ok(QuantizationCodec {
        counts: cl.sizes(),
        symbols: cl.assignment,
        codebook,
    })
}

/// `K = ceil(sum -log2 p) + margin + 32 L`, at least 1. The coder margin is
/// only added when there is a payload to code.
pub fn quantization_complexity(theta: &[f64], cfg: &CodecConfig) -> Result<u64> {
    let codec = quantize(theta, cfg)?;
    let payload = codec.payload_bits().ceil() as u64;
    let margin = if payload > 0 { CODER_MARGIN_BITS } else { 0 };
    let book = if cfg.include_codebook {
        CODEBOOK_ENTRY_BITS * codec.levels() as u64
    } else {
        0
    };
    Ok((payload + margin + book).max(1))
}
