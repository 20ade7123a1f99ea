//! Causal grouped-query attention with partial RoPE and optional QK-Norm.
//!
//! Per head: project q/k/v (no biases), RMS-normalise q and k over the head
//! dimension when QK-Norm is on, rotate the leading `rotary_dims` channels of
//! q and k, then scaled dot-product attention with a causal mask. Key/value
//! heads are shared by consecutive groups of `n_heads / n_kv_heads` query heads.

use rand::Rng;

use crate::autograd::{AttnMask, Tape, Var};
use crate::error::{Error, Result};
use crate::init::normal_tensor;
use crate::rope::{RopeCache, RopeConfig};
use crate::tensor::Tensor;

pub const DEFAULT_QK_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    model_dim: usize,
    n_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    qk_norm: bool,
    qk_norm_eps: f64,
    rope: RopeConfig,
}

impl AttentionConfig {
    pub fn new(
        model_dim: usize,
        n_heads: usize,
        n_kv_heads: usize,
        qk_norm: bool,
        rope: RopeConfig,
    ) -> Result<Self> {
        if n_heads == 0 || n_kv_heads == 0 {
            return Err(Error::Config("head counts must be positive".into()));
        }
        if !model_dim.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by n_heads {n_heads}"
            )));
        }
        if !n_heads.is_multiple_of(n_kv_heads) {
            return Err(Error::Config(format!(
                "n_kv_heads {n_kv_heads} must divide n_heads {n_heads}"
            )));
        }
        let head_dim = model_dim / n_heads;
        if rope.head_dim() != head_dim {
            return Err(Error::Config(format!(
                "rope head_dim {} != attention head_dim {head_dim}",
                rope.head_dim()
            )));
        }
        Ok(AttentionConfig {
            model_dim,
            n_heads,
            n_kv_heads,
            head_dim,
            qk_norm,
            qk_norm_eps: DEFAULT_QK_NORM_EPS,
            rope,
        })
    }

    pub fn with_qk_norm_eps(mut self, eps: f64) -> Result<Self> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "qk_norm eps must be positive, got {eps}"
            )));
        }
        self.qk_norm_eps = eps;
        Ok(self)
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
    pub fn qk_norm(&self) -> bool {
        self.qk_norm
    }
    pub fn qk_norm_eps(&self) -> f64 {
        self.qk_norm_eps
    }
    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    /// Trainable scalar count: four projections plus the two QK-Norm gains.
    pub fn param_count(&self) -> usize {
        let (d, hd) = (self.model_dim, self.head_dim);
        let proj = 2 * d * self.n_heads * hd + 2 * d * self.n_kv_heads * hd;
        proj + if self.qk_norm { 2 * hd } else { 0 }
    }
}

/// QK-Norm gains: one `head_dim` vector each for queries and keys, shared
/// across heads.
#[derive(Clone, Debug, PartialEq)]
pub struct QkNormParams {
    pub gain_q: Tensor,
    pub gain_k: Tensor,
    pub eps: f64,
}

impl QkNormParams {
    pub fn new(head_dim: usize, eps: f64) -> Self {
        QkNormParams {
            gain_q: Tensor::full([head_dim], 1.0),
            gain_k: Tensor::full([head_dim], 1.0),
            eps,
        }
    }
}

/// Projection weights, generic so the same layout holds tensors or tape vars.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// `[model_dim, n_heads * head_dim]`
    pub wq: T,
    /// `[model_dim, n_kv_heads * head_dim]`
    pub wk: T,
    pub wv: T,
    /// `[n_heads * head_dim, model_dim]`
    pub wo: T,
    pub q_gain: Option<T>,
    pub k_gain: Option<T>,
}

impl AttentionParams<Tensor> {
    /// Normal(0, `std`) projections; `wo` uses `out_std`. QK-Norm gains start at 1.
    pub fn init(cfg: &AttentionConfig, rng: &mut impl Rng, std: f64, out_std: f64) -> Self {
        Self::build(
            cfg,
            &mut |shape, s| normal_tensor(rng, shape, s),
            std,
            out_std,
        )
    }

    pub(crate) fn build(
        cfg: &AttentionConfig,
        make: &mut dyn FnMut(Vec<usize>, f64) -> Tensor,
        std: f64,
        out_std: f64,
    ) -> Self {
        let (d, hd) = (cfg.model_dim, cfg.head_dim);
        let wq = make(vec![d, cfg.n_heads * hd], std);
        let wk = make(vec![d, cfg.n_kv_heads * hd], std);
        let wv = make(vec![d, cfg.n_kv_heads * hd], std);
        let wo = make(vec![cfg.n_heads * hd, d], out_std);
        let qk = cfg.qk_norm.then(|| QkNormParams::new(hd, cfg.qk_norm_eps));
        AttentionParams {
            wq,
            wk,
            wv,
            wo,
            q_gain: qk.as_ref().map(|p| p.gain_q.clone()),
            k_gain: qk.map(|p| p.gain_k),
        }
    }
}

impl<T> AttentionParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}wq"), &self.wq);
        f(format!("{prefix}wk"), &self.wk);
        f(format!("{prefix}wv"), &self.wv);
        f(format!("{prefix}wo"), &self.wo);
        if let Some(g) = &self.q_gain {
            f(format!("{prefix}q_norm"), g);
        }
        if let Some(g) = &self.k_gain {
            f(format!("{prefix}k_norm"), g);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}wq"), &mut self.wq);
        f(format!("{prefix}wk"), &mut self.wk);
        f(format!("{prefix}wv"), &mut self.wv);
        f(format!("{prefix}wo"), &mut self.wo);
        if let Some(g) = &mut self.q_gain {
            f(format!("{prefix}q_norm"), g);
        }
        if let Some(g) = &mut self.k_gain {
            f(format!("{prefix}k_norm"), g);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            q_gain: self.q_gain.as_ref().map(&mut *f),
            k_gain: self.k_gain.as_ref().map(&mut *f),
        }
    }
}

impl AttentionParams<Tensor> {
    pub fn bind<'t>(&self, tape: &'t Tape) -> AttentionParams<Var<'t>> {
        self.map(&mut |t| tape.param(t))
    }
}

/// Additive causal mask `[seq, seq]`: `0` on and below the diagonal, `-inf`
/// strictly above it.
pub fn causal_mask(seq: usize) -> Result<Tensor> {
    if seq == 0 {
        return Err(Error::Parameter("causal_mask needs seq >= 1".into()));
    }
    let mut data = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            data[i * seq + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new([seq, seq], data)
}

/// RMS-normalises `x` over its last axis and scales by `gain`.
pub fn qk_normalize(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let tape = Tape::inference();
    let y = tape
        .constant(x.clone())
        .rms_norm(&tape.constant(gain.clone()), eps)?;
    Ok(y.to_tensor())
}

/// Switches that only tests and equivalence checks flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionOptions {
    pub mask: AttnMask,
    /// When false the rotary stage is skipped entirely rather than run with
    /// zero rotated channels.
    pub rotary_stage: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            mask: AttnMask::Causal,
            rotary_stage: true,
        }
    }
}

/// Intermediate values exposed for inspection.
pub struct AttentionInternals<'t> {
    pub output: Var<'t>,
    /// Value projections `[batch, n_kv_heads, seq, head_dim]`.
    pub values: Var<'t>,
    /// Pre-softmax scaled logits `[batch, n_heads, seq, seq]`.
    pub logits: Var<'t>,
}

/// `[batch, seq, model_dim] -> [batch, seq, model_dim]`.
pub fn attention_forward<'t>(
    x: &Var<'t>,
    params: &AttentionParams<Var<'t>>,
    cfg: &AttentionConfig,
    cache: &RopeCache,
) -> Result<Var<'t>> {
    Ok(attention_forward_with(x, params, cfg, cache, AttentionOptions::default())?.output)
}

pub fn attention_forward_with<'t>(
    x: &Var<'t>,
    params: &AttentionParams<Var<'t>>,
    cfg: &AttentionConfig,
    cache: &RopeCache,
    opts: AttentionOptions,
) -> Result<AttentionInternals<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != cfg.model_dim {
        return Err(Error::dim(
            "attention",
            format!("expected [batch, seq, {}], got {shape:?}", cfg.model_dim),
        ));
    }
    let (batch, seq) = (shape[0], shape[1]);
    if seq > cfg.rope.max_positions() {
        return Err(Error::Range(format!(
            "sequence length {seq} exceeds max_positions {}",
            cfg.rope.max_positions()
        )));
    }
    if cache.config() != &cfg.rope {
        return Err(Error::Config(
            "rope cache was built for a different config".into(),
        ));
    }
    let hd = cfg.head_dim;
    let heads = |v: Var<'t>, n: usize| -> Result<Var<'t>> {
        v.reshape(&[batch, seq, n, hd])?.permute(&[0, 2, 1, 3])
    };

    let mut q = heads(x.matmul(&params.wq)?, cfg.n_heads)?;
    let mut k = heads(x.matmul(&params.wk)?, cfg.n_kv_heads)?;
    let values = heads(x.matmul(&params.wv)?, cfg.n_kv_heads)?;

    if cfg.qk_norm {
        let (gq, gk) = match (&params.q_gain, &params.k_gain) {
            (Some(gq), Some(gk)) => (gq, gk),
            _ => return Err(Error::Config("qk_norm enabled but gains missing".into())),
        };
        q = q.rms_norm(gq, cfg.qk_norm_eps)?;
        k = k.rms_norm(gk, cfg.qk_norm_eps)?;
    }
    if opts.rotary_stage {
        q = q.rope(cache, 0)?;
        k = k.rope(cache, 0)?;
    }
    let mut v = values;
    if cfg.group_size() > 1 {
        k = k.repeat_interleave(1, cfg.group_size())?;
        v = v.repeat_interleave(1, cfg.group_size())?;
    }

    let logits = q.bmm(&k, true)?.scale(1.0 / (hd as f64).sqrt())?;
    let weights = logits.masked_softmax(opts.mask)?;
    let context =
        weights
            .bmm(&v, false)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch, seq, cfg.n_heads * hd])?;
    let output = context.matmul(&params.wo)?;
    Ok(AttentionInternals {
        output,
        values,
        logits,
    })
}
