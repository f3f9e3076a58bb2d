//! Trained diffusion model and its `.stdf` file format.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "STDF"
//!      4     2  version (u16 LE) = 1
//!      6     2  flags (u16 LE), bit 0 = raw weights present
//!      8     4  d (u32 LE)
//!     12     4  hidden width (u32 LE)
//!     16     4  T (u32 LE)
//!     20     4  P, parameter count (u32 LE)
//!     24   8*T  betas, f64 LE
//!      …   8*d  normalization mean, f64 LE
//!      …   8*d  normalization std, f64 LE
//!      …   4*P  raw weights, f32 LE (only if flag bit 0)
//!      …   4*P  EMA weights, f32 LE
//!      …     …  UTF-8 JSON metadata until EOF
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig};
use super::schedule::NoiseSchedule;
use super::train::DiffusionConfig;
use crate::error::{Error, Result};
use crate::numerics::OptimizerConfig;
use crate::seed::sha256_hex;

pub const MAGIC: &[u8; 4] = b"STDF";
pub const VERSION: u16 = 1;
const FLAG_RAW: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub optimizer: OptimizerConfig,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    /// SHA-256 over the zoo matrix the model was fitted to.
    pub zoo_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionCheckpoint {
    pub config: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub raw: Option<Vec<f64>>,
    pub ema: Vec<f64>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct JsonMeta {
    config: DiffusionConfig,
    denoiser: DenoiserConfig,
    meta: TrainingMeta,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    v.iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Corruption("size overflow".into()))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Corruption("size overflow".into()))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

impl DiffusionCheckpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let p = self.ema.len();
        let as_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::invalid("dimension too large"));
        let mut out = Vec::with_capacity(24 + p * 8 + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.raw.is_some() { FLAG_RAW } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&as_u32(self.denoiser.d)?.to_le_bytes());
        out.extend_from_slice(&as_u32(self.denoiser.hidden)?.to_le_bytes());
        out.extend_from_slice(&as_u32(self.schedule.steps())?.to_le_bytes());
        out.extend_from_slice(&as_u32(p)?.to_le_bytes());
        put_f64s(&mut out, self.schedule.betas());
        put_f64s(&mut out, &self.mean);
        put_f64s(&mut out, &self.std);
        if let Some(raw) = &self.raw {
            put_f32s(&mut out, raw);
        }
        put_f32s(&mut out, &self.ema);
        serde_json::to_writer(
            &mut out,
            &JsonMeta {
                config: self.config.clone(),
                denoiser: self.denoiser.clone(),
                meta: self.meta.clone(),
            },
        )?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not a .stdf file".into()));
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported .stdf version {version}")));
        }
        let flags = u16::from_le_bytes(r.take(2, "flags")?.try_into().unwrap());
        let d = r.u32("d")?;
        let hidden = r.u32("hidden")?;
        let steps = r.u32("T")?;
        let p = r.u32("P")?;
        let betas = r.f64s(steps, "schedule")?;
        let mean = r.f64s(d, "mean")?;
        let std = r.f64s(d, "std")?;
        let raw = if flags & FLAG_RAW != 0 {
            Some(r.f32s(p, "raw weights")?)
        } else {
            None
        };
        let ema = r.f32s(p, "EMA weights")?;
        let meta: JsonMeta = serde_json::from_slice(&bytes[r.pos..])
            .map_err(|e| Error::Corruption(format!("metadata unreadable: {e}")))?;
        if meta.denoiser.d != d || meta.denoiser.hidden != hidden {
            return Err(Error::Corruption("metadata disagrees with header dims".into()));
        }
        let expected = Denoiser::new(meta.denoiser.clone())?.param_count();
        if expected != p {
            return Err(Error::Corruption(format!(
                "header holds {p} parameters, architecture needs {expected}"
            )));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Corruption("normalization std must be positive".into()));
        }
        let schedule = NoiseSchedule::from_betas(betas)
            .map_err(|e| Error::Corruption(format!("bad schedule: {e}")))?;
        Ok(Self {
            config: meta.config,
            denoiser: meta.denoiser,
            schedule,
            mean,
            std,
            raw,
            ema,
            meta: meta.meta,
        })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.encode()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
