//! Decoder-only language models with sequential or parallel residual blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    attention_forward_with, AttentionConfig, AttentionOptions, AttentionParams,
};
use crate::autograd::{AttnMask, Tape, Var};
use crate::error::{Error, Result};
use crate::init::normal_tensor;
use crate::rope::{RopeCache, RopeConfig, DEFAULT_BASE};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// `h = x + attn(norm1(x)); out = h + mlp(norm2(h))`
    Sequential,
    /// `out = x + attn(norm1(x)) + mlp(norm2(x))`
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    SwigluSilu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockTopology {
    pub kind: TopologyKind,
    pub norm_kind: NormKind,
    pub mlp_kind: MlpKind,
}

impl BlockTopology {
    /// Llama-style: RMSNorm + SwiGLU.
    pub fn sequential() -> Self {
        BlockTopology {
            kind: TopologyKind::Sequential,
            norm_kind: NormKind::Rms,
            mlp_kind: MlpKind::SwigluSilu,
        }
    }

    /// Pythia-style: LayerNorm + GELU.
    pub fn parallel() -> Self {
        BlockTopology {
            kind: TopologyKind::Parallel,
            norm_kind: NormKind::Layer,
            mlp_kind: MlpKind::Gelu,
        }
    }

    pub fn for_kind(kind: TopologyKind) -> Self {
        match kind {
            TopologyKind::Sequential => Self::sequential(),
            TopologyKind::Parallel => Self::parallel(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfigFile", into = "ModelConfigFile")]
pub struct ModelConfig {
    vocab_size: usize,
    n_layers: usize,
    model_dim: usize,
    attention: AttentionConfig,
    topology: BlockTopology,
    mlp_hidden: usize,
    tie_embeddings: bool,
    norm_eps: f64,
}

/// On-disk (TOML/JSON) model schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfigFile {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub n_kv_heads: Option<usize>,
    #[serde(default)]
    pub qk_norm: bool,
    pub rotary_fraction: f64,
    #[serde(default = "default_base")]
    pub rope_base: f64,
    pub max_positions: usize,
    pub topology: TopologyKind,
    #[serde(default)]
    pub norm: Option<NormKind>,
    #[serde(default)]
    pub mlp: Option<MlpKind>,
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_base() -> f64 {
    DEFAULT_BASE
}

fn default_norm_eps() -> f64 {
    DEFAULT_NORM_EPS
}

impl TryFrom<ModelConfigFile> for ModelConfig {
    type Error = Error;

    fn try_from(f: ModelConfigFile) -> Result<Self> {
        if f.n_heads == 0 || !f.model_dim.is_multiple_of(f.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                f.model_dim, f.n_heads
            )));
        }
        let head_dim = f.model_dim / f.n_heads;
        let rope =
            RopeConfig::with_base(head_dim, f.rotary_fraction, f.max_positions, f.rope_base)?;
        let attention = AttentionConfig::new(
            f.model_dim,
            f.n_heads,
            f.n_kv_heads.unwrap_or(f.n_heads),
            f.qk_norm,
            rope,
        )?;
        let mut topology = BlockTopology::for_kind(f.topology);
        if let Some(n) = f.norm {
            topology.norm_kind = n;
        }
        if let Some(m) = f.mlp {
            topology.mlp_kind = m;
        }
        let mlp_hidden = f.mlp_hidden.unwrap_or(match topology.mlp_kind {
            MlpKind::SwigluSilu => 2 * f.model_dim,
            MlpKind::Gelu => 4 * f.model_dim,
        });
        ModelConfig::new(
            f.vocab_size,
            f.n_layers,
            attention,
            topology,
            mlp_hidden,
            f.tie_embeddings,
        )?
        .with_norm_eps(f.norm_eps)
    }
}

impl From<ModelConfig> for ModelConfigFile {
    fn from(c: ModelConfig) -> Self {
        ModelConfigFile {
            vocab_size: c.vocab_size,
            n_layers: c.n_layers,
            model_dim: c.model_dim,
            n_heads: c.attention.n_heads(),
            n_kv_heads: Some(c.attention.n_kv_heads()),
            qk_norm: c.attention.qk_norm(),
            rotary_fraction: c.attention.rope().rotary_fraction(),
            rope_base: c.attention.rope().base(),
            max_positions: c.attention.rope().max_positions(),
            topology: c.topology.kind,
            norm: Some(c.topology.norm_kind),
            mlp: Some(c.topology.mlp_kind),
            mlp_hidden: Some(c.mlp_hidden),
            tie_embeddings: c.tie_embeddings,
            norm_eps: c.norm_eps,
        }
    }
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        n_layers: usize,
        attention: AttentionConfig,
        topology: BlockTopology,
        mlp_hidden: usize,
        tie_embeddings: bool,
    ) -> Result<Self> {
        if vocab_size == 0 || mlp_hidden == 0 {
            return Err(Error::Config(
                "vocab_size and mlp_hidden must be positive".into(),
            ));
        }
        if n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        Ok(ModelConfig {
            vocab_size,
            n_layers,
            model_dim: attention.model_dim(),
            attention,
            topology,
            mlp_hidden,
            tie_embeddings,
            norm_eps: DEFAULT_NORM_EPS,
        })
    }

    /// Desk-scale defaults: 4 layers, width 128, 4 heads of 32 channels.
    pub fn desk(
        vocab_size: usize,
        max_positions: usize,
        rotary_fraction: f64,
        kind: TopologyKind,
    ) -> Result<Self> {
        ModelConfigFile {
            vocab_size,
            n_layers: 4,
            model_dim: 128,
            n_heads: 4,
            n_kv_heads: None,
            qk_norm: false,
            rotary_fraction,
            rope_base: DEFAULT_BASE,
            max_positions,
            topology: kind,
            norm: None,
            mlp: None,
            mlp_hidden: None,
            tie_embeddings: false,
            norm_eps: DEFAULT_NORM_EPS,
        }
        .try_into()
    }

    /// Embed → final norm → unembed, with no blocks in between.
    pub fn without_blocks(mut self) -> Self {
        self.n_layers = 0;
        self
    }

    pub fn with_norm_eps(mut self, eps: f64) -> Result<Self> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "norm eps must be positive, got {eps}"
            )));
        }
        self.norm_eps = eps;
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn model_dim(&self) -> usize {
        self.model_dim
    }
    pub fn attention(&self) -> &AttentionConfig {
        &self.attention
    }
    pub fn rope(&self) -> &RopeConfig {
        self.attention.rope()
    }
    pub fn topology(&self) -> BlockTopology {
        self.topology
    }
    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden
    }
    pub fn tie_embeddings(&self) -> bool {
        self.tie_embeddings
    }
    pub fn norm_eps(&self) -> f64 {
        self.norm_eps
    }
    pub fn max_positions(&self) -> usize {
        self.attention.rope().max_positions()
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        let norm = match self.topology.norm_kind {
            NormKind::Rms => d,
            NormKind::Layer => 2 * d,
        };
        let mlp = match self.topology.mlp_kind {
            MlpKind::SwigluSilu => 3 * d * self.mlp_hidden,
            MlpKind::Gelu => 2 * d * self.mlp_hidden,
        };
        let block = self.attention.param_count() + 2 * norm + mlp;
        let embed = self.vocab_size * d;
        let unembed = if self.tie_embeddings {
            0
        } else {
            d * self.vocab_size
        };
        embed + self.n_layers * block + norm + unembed
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MlpParams<T> {
    /// `w_down · (silu(x · w_gate) ⊙ (x · w_up))`
    SwiGlu { w_gate: T, w_up: T, w_down: T },
    /// `w_out · gelu(x · w_in)`
    Gelu { w_in: T, w_out: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: NormParams<T>,
    pub attn: AttentionParams<T>,
    pub norm2: NormParams<T>,
    pub mlp: MlpParams<T>,
}

/// All model weights in declared order: embed, blocks, final norm, unembed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: NormParams<T>,
    pub unembed: Option<T>,
}

impl<T> NormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}gain"), &self.gain);
        if let Some(b) = &self.bias {
            f(format!("{prefix}bias"), b);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}gain"), &mut self.gain);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}bias"), b);
        }
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&self.gain),
            bias: self.bias.as_ref().map(f),
        }
    }
}

impl<T> MlpParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            MlpParams::SwiGlu {
                w_gate,
                w_up,
                w_down,
            } => {
                f(format!("{prefix}w_gate"), w_gate);
                f(format!("{prefix}w_up"), w_up);
                f(format!("{prefix}w_down"), w_down);
            }
            MlpParams::Gelu { w_in, w_out } => {
                f(format!("{prefix}w_in"), w_in);
                f(format!("{prefix}w_out"), w_out);
            }
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        match self {
            MlpParams::SwiGlu {
                w_gate,
                w_up,
                w_down,
            } => {
                f(format!("{prefix}w_gate"), w_gate);
                f(format!("{prefix}w_up"), w_up);
                f(format!("{prefix}w_down"), w_down);
            }
            MlpParams::Gelu { w_in, w_out } => {
                f(format!("{prefix}w_in"), w_in);
                f(format!("{prefix}w_out"), w_out);
            }
        }
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> MlpParams<U> {
        match self {
            MlpParams::SwiGlu {
                w_gate,
                w_up,
                w_down,
            } => MlpParams::SwiGlu {
                w_gate: f(w_gate),
                w_up: f(w_up),
                w_down: f(w_down),
            },
            MlpParams::Gelu { w_in, w_out } => MlpParams::Gelu {
                w_in: f(w_in),
                w_out: f(w_out),
            },
        }
    }
}

impl<T> BlockParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.norm1.visit(&format!("{prefix}norm1."), f);
        self.attn.visit(&format!("{prefix}attn."), f);
        self.norm2.visit(&format!("{prefix}norm2."), f);
        self.mlp.visit(&format!("{prefix}mlp."), f);
    }
    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.norm1.visit_mut(&format!("{prefix}norm1."), f);
        self.attn.visit_mut(&format!("{prefix}attn."), f);
        self.norm2.visit_mut(&format!("{prefix}norm2."), f);
        self.mlp.visit_mut(&format!("{prefix}mlp."), f);
    }
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            norm1: self.norm1.map(f),
            attn: self.attn.map(f),
            norm2: self.norm2.map(f),
            mlp: self.mlp.map(f),
        }
    }
}

impl<T> ModelParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("embed".into(), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("layers.{i}."), f);
        }
        self.final_norm.visit("final_norm.", f);
        if let Some(u) = &self.unembed {
            f("unembed".into(), u);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        f("embed".into(), &mut self.embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("layers.{i}."), f);
        }
        self.final_norm.visit_mut("final_norm.", f);
        if let Some(u) = &mut self.unembed {
            f("unembed".into(), u);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embed: f(&self.embed),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_norm: self.final_norm.map(f),
            unembed: self.unembed.as_ref().map(f),
        }
    }

    /// `(name, value)` pairs in declared order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, t| out.push((n, t)));
        out
    }
}

impl ModelParams<Tensor> {
    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelParams<Var<'t>> {
        self.map(&mut |t| tape.param(t))
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn init_norm(kind: NormKind, d: usize) -> NormParams<Tensor> {
    NormParams {
        gain: Tensor::full([d], 1.0),
        bias: (kind == NormKind::Layer).then(|| Tensor::zeros([d])),
    }
}

impl ModelParams<Tensor> {
    /// Normal(0, 0.02) weights; residual output projections use
    /// 0.02 / sqrt(2 · n_layers). Norm gains start at 1, biases at 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(cfg, &mut |shape, std| normal_tensor(&mut rng, shape, std))
    }

    /// All-zero weights with the layout `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, &mut |shape, _| Tensor::zeros(shape))
    }

    fn build(cfg: &ModelConfig, make: &mut dyn FnMut(Vec<usize>, f64) -> Tensor) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.model_dim, cfg.mlp_hidden);
        let out_std = INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let embed = make(vec![v, d], INIT_STD);
        let blocks = (0..cfg.n_layers)
            .map(|_| {
                let norm1 = init_norm(cfg.topology.norm_kind, d);
                let attn = AttentionParams::build(&cfg.attention, make, INIT_STD, out_std);
                let norm2 = init_norm(cfg.topology.norm_kind, d);
                let mlp = match cfg.topology.mlp_kind {
                    MlpKind::SwigluSilu => MlpParams::SwiGlu {
                        w_gate: make(vec![d, f], INIT_STD),
                        w_up: make(vec![d, f], INIT_STD),
                        w_down: make(vec![f, d], out_std),
                    },
                    MlpKind::Gelu => MlpParams::Gelu {
                        w_in: make(vec![d, f], INIT_STD),
                        w_out: make(vec![f, d], out_std),
                    },
                };
                BlockParams {
                    norm1,
                    attn,
                    norm2,
                    mlp,
                }
            })
            .collect();
        let final_norm = init_norm(cfg.topology.norm_kind, d);
        let unembed = (!cfg.tie_embeddings).then(|| make(vec![d, v], INIT_STD));
        ModelParams {
            embed,
            blocks,
            final_norm,
            unembed,
        }
    }
}

/// Row-major `[batch, seq]` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::dim(
                "token_batch",
                format!("{} ids for [{batch}, {seq}]", ids.len()),
            ));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn seq(&self) -> usize {
        self.seq
    }
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

fn apply_norm<'t>(x: &Var<'t>, p: &NormParams<Var<'t>>, eps: f64) -> Result<Var<'t>> {
    match &p.bias {
        Some(b) => x.layer_norm(&p.gain, b, eps),
        None => x.rms_norm(&p.gain, eps),
    }
}

fn apply_mlp<'t>(x: &Var<'t>, p: &MlpParams<Var<'t>>) -> Result<Var<'t>> {
    match p {
        MlpParams::SwiGlu {
            w_gate,
            w_up,
            w_down,
        } => {
            let gate = x.matmul(w_gate)?.silu()?;
            gate.mul(&x.matmul(w_up)?)?.matmul(w_down)
        }
        MlpParams::Gelu { w_in, w_out } => x.matmul(w_in)?.gelu()?.matmul(w_out),
    }
}

/// One residual block over `[batch, seq, model_dim]`.
pub fn block_forward<'t>(
    x: &Var<'t>,
    params: &BlockParams<Var<'t>>,
    cfg: &ModelConfig,
    cache: &RopeCache,
    opts: AttentionOptions,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != cfg.model_dim {
        return Err(Error::dim(
            "block",
            format!("expected [batch, seq, {}], got {shape:?}", cfg.model_dim),
        ));
    }
    let eps = cfg.norm_eps;
    let attn = |h: &Var<'t>| -> Result<Var<'t>> {
        let n = apply_norm(h, &params.norm1, eps)?;
        Ok(attention_forward_with(&n, &params.attn, &cfg.attention, cache, opts)?.output)
    };
    match cfg.topology.kind {
        TopologyKind::Sequential => {
            let h = x.add(&attn(x)?)?;
            let m = apply_mlp(&apply_norm(&h, &params.norm2, eps)?, &params.mlp)?;
            h.add(&m)
        }
        TopologyKind::Parallel => {
            let a = attn(x)?;
            let m = apply_mlp(&apply_norm(x, &params.norm2, eps)?, &params.mlp)?;
            x.add(&a)?.add(&m)
        }
    }
}

/// Token ids → logits `[batch, seq, vocab]`.
pub fn lm_forward<'t>(
    tokens: &TokenBatch,
    params: &ModelParams<Var<'t>>,
    cfg: &ModelConfig,
    cache: &RopeCache,
    opts: AttentionOptions,
) -> Result<Var<'t>> {
    if tokens.seq > cfg.max_positions() {
        return Err(Error::Range(format!(
            "sequence length {} exceeds max_positions {}",
            tokens.seq,
            cfg.max_positions()
        )));
    }
    let (b, t, d) = (tokens.batch, tokens.seq, cfg.model_dim);
    let mut x = params.embed.embedding(&tokens.ids)?.reshape(&[b, t, d])?;
    for block in &params.blocks {
        x = block_forward(&x, block, cfg, cache, opts)?;
    }
    let x = apply_norm(&x, &params.final_norm, cfg.norm_eps)?;
    match &params.unembed {
        Some(u) => x.matmul(u),
        None => x.matmul_nt(&params.embed),
    }
}

/// A model: config, weights and its rotary cache.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams<Tensor>,
    cache: RopeCache,
    opts: AttentionOptions,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor>) -> Result<Self> {
        let expected = ModelParams::init_shapes(&config);
        let got: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if got != expected {
            return Err(Error::Config(
                "parameter layout does not match config".into(),
            ));
        }
        let cache = RopeCache::build(config.rope())?;
        Ok(Model {
            config,
            params,
            cache,
            opts: AttentionOptions::default(),
        })
    }

    /// Replaces the attention switches. Only equivalence tests need this:
    /// a bidirectional mask or a build with the rotary stage removed.
    #[doc(hidden)]
    pub fn with_attention_options(mut self, opts: AttentionOptions) -> Self {
        self.opts = opts;
        self
    }

    #[doc(hidden)]
    pub fn with_mask(self, mask: AttnMask) -> Self {
        let opts = AttentionOptions { mask, ..self.opts };
        self.with_attention_options(opts)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn params(&self) -> &ModelParams<Tensor> {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ModelParams<Tensor> {
        &mut self.params
    }
    pub fn cache(&self) -> &RopeCache {
        &self.cache
    }
    pub fn attention_options(&self) -> AttentionOptions {
        self.opts
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelParams<Var<'t>> {
        self.params.bind(tape)
    }

    pub fn forward<'t>(
        &self,
        bound: &ModelParams<Var<'t>>,
        tokens: &TokenBatch,
    ) -> Result<Var<'t>> {
        lm_forward(tokens, bound, &self.config, &self.cache, self.opts)
    }

    /// Logits without recording gradients.
    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let tape = Tape::inference();
        let bound = self.bind(&tape);
        Ok(self.forward(&bound, tokens)?.to_tensor())
    }

    /// Mean cross-entropy and per-parameter gradients (declared order).
    pub fn loss_and_grads(
        &self,
        tokens: &TokenBatch,
        targets: &[Option<usize>],
    ) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let loss = self.forward(&bound, tokens)?.cross_entropy(targets)?;
        tape.backward(loss)?;
        let value = loss.value().item()?;
        let grads = bound
            .named()
            .into_iter()
            .map(|(_, v)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect();
        Ok((value, grads))
    }
}

impl ModelParams<Tensor> {
    fn init_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        ModelParams::zeros(cfg)
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }
}
