//! Memory model for the rotary sin/cos cache.
//!
//! Bytes scale as `max_positions × rotary_dims × precision_bytes`, where
//! `rotary_dims` is the rounded channel count for the requested fraction.
//! Fragmentation is not modelled. Across devices the cache is either
//! replicated in full or split into equal shards.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{cache_bytes_nominal, round_rotary_dims};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Fp32,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::Fp16 => 2,
            Precision::Fp32 => 4,
        }
    }

    pub fn from_bytes(bytes: u64) -> Result<Self> {
        match bytes {
            2 => Ok(Precision::Fp16),
            4 => Ok(Precision::Fp32),
            other => Err(Error::Parameter(format!(
                "unsupported precision: {other} bytes (expected 2 or 4)"
            ))),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" | "bf16" | "2" => Ok(Precision::Fp16),
            "fp32" | "4" => Ok(Precision::Fp32),
            other => Err(Error::Parameter(format!("unsupported precision `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Every device holds the whole cache.
    Replicate,
    /// The cache is split across devices; each holds at most `ceil(total / devices)`.
    Shard,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "replicate" => Ok(Placement::Replicate),
            "shard" => Ok(Placement::Shard),
            other => Err(Error::Parameter(format!("unknown placement `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanQuery {
    pub max_positions: u64,
    pub head_dim: usize,
    pub precision: Precision,
    pub rotary_fraction: f64,
    pub devices: u64,
    pub placement: Placement,
    /// 1 counts sin and cos jointly at `rotary_dims` width; 2 models separate
    /// sin and cos tables each `rotary_dims` wide.
    pub sincos_factor: u64,
}

impl PlanQuery {
    /// Single-device fp32 query with the joint sin/cos accounting.
    pub fn new(max_positions: u64, head_dim: usize, rotary_fraction: f64) -> Self {
        PlanQuery {
            max_positions,
            head_dim,
            precision: Precision::Fp32,
            rotary_fraction,
            devices: 1,
            placement: Placement::Replicate,
            sincos_factor: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_positions == 0 || self.devices == 0 {
            return Err(Error::Parameter(
                "max_positions and devices must be positive".into(),
            ));
        }
        if !matches!(self.sincos_factor, 1 | 2) {
            return Err(Error::Parameter(format!(
                "sincos factor must be 1 or 2, got {}",
                self.sincos_factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanResult {
    pub rotary_dims: usize,
    pub bytes_per_device: u64,
    pub bytes_total: u64,
}

pub fn cache_bytes(q: &PlanQuery) -> Result<PlanResult> {
    q.validate()?;
    let rotary_dims = round_rotary_dims(q.head_dim, q.rotary_fraction)?;
    let base = q.sincos_factor
        * cache_bytes_nominal(q.max_positions, rotary_dims as u64, q.precision.bytes());
    let (bytes_per_device, bytes_total) = match q.placement {
        Placement::Replicate => (base, base * q.devices),
        Placement::Shard => (base.div_ceil(q.devices), base),
    };
    Ok(PlanResult {
        rotary_dims,
        bytes_per_device,
        bytes_total,
    })
}

/// Default sequence-length grid: powers of two from 2^10 to 2^23, then 10^7.
pub fn default_lengths() -> Vec<u64> {
    let mut v: Vec<u64> = (10..=23).map(|p| 1u64 << p).collect();
    v.push(10_000_000);
    v
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.1, 0.25, 1.0];

/// CSV `seq_len,fraction,bytes` over `lengths × fractions`, grouped by
/// fraction and ascending in length within each group. `bytes` is the
/// per-device figure for the template's placement.
pub fn emit_curve(fractions: &[f64], lengths: &[u64], template: &PlanQuery) -> Result<String> {
    if fractions.is_empty() || lengths.is_empty() {
        return Err(Error::Parameter(
            "curve needs at least one fraction and one length".into(),
        ));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let mut out = String::from("seq_len,fraction,bytes\n");
    for &f in fractions {
        for &len in &sorted {
            let r = cache_bytes(&PlanQuery {
                max_positions: len,
                rotary_fraction: f,
                ..*template
            })?;
            writeln!(out, "{len},{f},{}", r.bytes_per_device).expect("write to string");
        }
    }
    Ok(out)
}

/// Human-readable binary-prefixed size.
pub fn human_bytes(bytes: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes as f64;
    let mut u = 0;
    while v >= 1024.0 && u < UNITS.len() - 1 {
        v /= 1024.0;
        u += 1;
    }
    if u == 0 {
        format!("{bytes} B")
    } else {
        format!("{v:.2} {}", UNITS[u])
    }
}
