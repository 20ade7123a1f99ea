//! Partial rotary positional embedding.
//!
//! Only the leading `rotary_dims` channels of each head are rotated; the
//! remaining `head_dim - rotary_dims` channels pass through untouched.
//! Within the rotary slice, channel `j` is paired with channel
//! `j + rotary_dims / 2` (half-split layout) and pair `j` turns by
//! `position * base^(-2j / rotary_dims)`.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;
/// Bytes per stored cache value (fp32).
pub const DEFAULT_PRECISION_BYTES: u64 = 4;

/// How channels inside the rotary slice are paired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotaryPairing {
    /// Channel `j` pairs with `j + rotary_dims / 2`.
    HalfSplit,
}

pub const PAIRING: RotaryPairing = RotaryPairing::HalfSplit;

/// Number of rotated channels for a fraction of `head_dim`: the fraction is
/// rounded half-up to a whole number of channel pairs.
pub fn round_rotary_dims(head_dim: usize, fraction: f64) -> Result<usize> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "head_dim must be positive and even, got {head_dim}"
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Parameter(format!(
            "rotary fraction must lie in [0, 1], got {fraction}"
        )));
    }
    // 1e-9 absorbs representation error in fractions like 0.1 * 2^k.
    let pairs = (fraction * head_dim as f64 / 2.0 + 0.5 + 1e-9).floor() as usize;
    Ok((2 * pairs).min(head_dim))
}

/// Raw storage needed for a sin/cos cache: `max_positions × rotary_dims × precision_bytes`.
pub fn cache_bytes_nominal(max_positions: u64, rotary_dims: u64, precision_bytes: u64) -> u64 {
    max_positions * rotary_dims * precision_bytes
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    rotary_fraction: f64,
    rotary_dims: usize,
    base: f64,
    max_positions: usize,
}

impl RopeConfig {
    pub fn new(head_dim: usize, rotary_fraction: f64, max_positions: usize) -> Result<Self> {
        Self::with_base(head_dim, rotary_fraction, max_positions, DEFAULT_BASE)
    }

    pub fn with_base(
        head_dim: usize,
        rotary_fraction: f64,
        max_positions: usize,
        base: f64,
    ) -> Result<Self> {
        let rotary_dims = round_rotary_dims(head_dim, rotary_fraction)?;
        if max_positions == 0 {
            return Err(Error::Parameter("max_positions must be positive".into()));
        }
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::Parameter(format!(
                "rotary base must be positive, got {base}"
            )));
        }
        Ok(RopeConfig {
            head_dim,
            rotary_fraction,
            rotary_dims,
            base,
            max_positions,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn rotary_fraction(&self) -> f64 {
        self.rotary_fraction
    }

    pub fn rotary_dims(&self) -> usize {
        self.rotary_dims
    }

    /// `rotary_dims / head_dim`, the fraction actually realised after rounding.
    pub fn effective_fraction(&self) -> f64 {
        self.rotary_dims as f64 / self.head_dim as f64
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn is_nope(&self) -> bool {
        self.rotary_dims == 0
    }
}

/// Rotation angles for every channel pair at `position`.
pub fn angles(position: usize, cfg: &RopeConfig) -> Result<Vec<f64>> {
    if position >= cfg.max_positions {
        return Err(Error::Range(format!(
            "position {position} >= max_positions {}",
            cfg.max_positions
        )));
    }
    if cfg.rotary_dims == 0 {
        return Err(Error::Parameter(
            "angles requested with rotary_dims = 0".into(),
        ));
    }
    let r = cfg.rotary_dims as f64;
    let p = position as f64;
    Ok((0..cfg.rotary_dims / 2)
        .map(|j| p * cfg.base.powf(-(2.0 * j as f64) / r))
        .collect())
}

/// Precomputed sin/cos tables, `[max_positions, rotary_dims / 2]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeCache {
    config: RopeConfig,
    sin: Vec<f64>,
    cos: Vec<f64>,
    precision_bytes: u64,
    bytes_nominal: u64,
}

impl RopeCache {
    pub fn build(cfg: &RopeConfig) -> Result<Self> {
        Self::build_with_precision(cfg, DEFAULT_PRECISION_BYTES)
    }

    pub fn build_with_precision(cfg: &RopeConfig, precision_bytes: u64) -> Result<Self> {
        if precision_bytes == 0 {
            return Err(Error::Parameter("precision_bytes must be positive".into()));
        }
        let half = cfg.rotary_dims / 2;
        let mut sin = Vec::with_capacity(cfg.max_positions * half);
        let mut cos = Vec::with_capacity(cfg.max_positions * half);
        if half > 0 {
            for p in 0..cfg.max_positions {
                for theta in angles(p, cfg)? {
                    let (s, c) = theta.sin_cos();
                    sin.push(s);
                    cos.push(c);
                }
            }
        }
        Ok(RopeCache {
            config: cfg.clone(),
            sin,
            cos,
            precision_bytes,
            bytes_nominal: cache_bytes_nominal(
                cfg.max_positions as u64,
                cfg.rotary_dims as u64,
                precision_bytes,
            ),
        })
    }

    pub fn config(&self) -> &RopeConfig {
        &self.config
    }

    pub fn rotary_dims(&self) -> usize {
        self.config.rotary_dims
    }

    pub fn sin_row(&self, position: usize) -> &[f64] {
        let half = self.config.rotary_dims / 2;
        &self.sin[position * half..(position + 1) * half]
    }

    pub fn cos_row(&self, position: usize) -> &[f64] {
        let half = self.config.rotary_dims / 2;
        &self.cos[position * half..(position + 1) * half]
    }

    pub fn precision_bytes(&self) -> u64 {
        self.precision_bytes
    }

    pub fn bytes_nominal(&self) -> u64 {
        self.bytes_nominal
    }

    fn check_input(&self, shape: &[usize], position_offset: usize) -> Result<usize> {
        if shape.len() < 2 || shape[shape.len() - 1] != self.config.head_dim {
            return Err(Error::dim(
                "rope",
                format!(
                    "expected [.., seq, {}], got {shape:?}",
                    self.config.head_dim
                ),
            ));
        }
        let seq = shape[shape.len() - 2];
        if seq + position_offset > self.config.max_positions {
            return Err(Error::Range(format!(
                "positions up to {} exceed max_positions {}",
                seq + position_offset,
                self.config.max_positions
            )));
        }
        Ok(seq)
    }

    /// Rotates the rotary slice of every `head_dim` row in place. With
    /// `inverse` the rotation is transposed, which is also its backward rule.
    fn rotate(&self, data: &mut [f64], seq: usize, position_offset: usize, inverse: bool) {
        let hd = self.config.head_dim;
        let half = self.config.rotary_dims / 2;
        if half == 0 {
            return;
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        for (r, row) in data.chunks_exact_mut(hd).enumerate() {
            let pos = r % seq + position_offset;
            let (sin, cos) = (self.sin_row(pos), self.cos_row(pos));
            let (lo, hi) = row[..2 * half].split_at_mut(half);
            for j in 0..half {
                let (a, b) = (lo[j], hi[j]);
                let s = sign * sin[j];
                lo[j] = a * cos[j] - b * s;
                hi[j] = b * cos[j] + a * s;
            }
        }
    }
}

/// Applies partial RoPE to `x` of shape `[.., seq, head_dim]`; row `t` of the
/// sequence axis sits at absolute position `t + position_offset`.
pub fn apply_partial_rope(x: &Tensor, cache: &RopeCache, position_offset: usize) -> Result<Tensor> {
    let seq = cache.check_input(x.shape(), position_offset)?;
    let mut data = x.data().to_vec();
    cache.rotate(&mut data, seq, position_offset, false);
    Tensor::new(x.shape().to_vec(), data)
}

impl<'t> Var<'t> {
    /// Differentiable [`apply_partial_rope`].
    pub fn rope(&self, cache: &RopeCache, position_offset: usize) -> Result<Var<'t>> {
        let (out, seq) = {
            let x = self.value();
            let seq = cache.check_input(x.shape(), position_offset)?;
            let mut data = x.data().to_vec();
            cache.rotate(&mut data, seq, position_offset, false);
            (Tensor::new(x.shape().to_vec(), data)?, seq)
        };
        // Only the rows this call touches are kept alive by the backward rule.
        let window = RopeCache {
            config: RopeConfig {
                max_positions: seq,
                ..cache.config.clone()
            },
            sin: slice_rows(
                &cache.sin,
                cache.config.rotary_dims / 2,
                position_offset,
                seq,
            ),
            cos: slice_rows(
                &cache.cos,
                cache.config.rotary_dims / 2,
                position_offset,
                seq,
            ),
            precision_bytes: cache.precision_bytes,
            bytes_nominal: 0,
        };
        self.tape().push_op("rope", out, &[*self], move |a| {
            let mut g = a.grad.to_vec();
            window.rotate(&mut g, seq, 0, true);
            vec![Some(g)]
        })
    }
}

fn slice_rows(table: &[f64], width: usize, start: usize, len: usize) -> Vec<f64> {
    table[start * width..(start + len) * width].to_vec()
}
