//! Token encoders.
//!
//! [`PerceiverEncoder`] summarizes observed tokens into a fixed set of latents
//! by cross-attention, refines the latents with self-attention, and then lets
//! every token (observed or not) read back from the latents. Attention-score
//! cost is `O(N L)`. [`GlobalEncoder`] is the quadratic baseline: plain
//! self-attention over all `N` tokens.
//!
//! All blocks are pre-layernorm residual blocks followed by a feedforward.

use std::rc::Rc;

use crate::embedding::TokenSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::memscale::Stage;
use crate::params::{Ctx, FeedForward, Init, LayerNorm, Linear, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct PerceiverConfig {
    pub num_latents: usize,
    pub latent_dim: usize,
    pub attention_layers: usize,
    pub self_heads: usize,
    pub cross_heads: usize,
    /// Heads of the token read-out cross-attention.
    pub decoder_heads: usize,
    pub dropout: f64,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        PerceiverConfig {
            num_latents: 64,
            latent_dim: 48,
            attention_layers: 3,
            self_heads: 3,
            cross_heads: 3,
            decoder_heads: 3,
            dropout: 0.0,
        }
    }
}

impl PerceiverConfig {
    pub fn validate(&self) -> Result<()> {
        let heads = [self.self_heads, self.cross_heads, self.decoder_heads];
        if self.num_latents == 0 || heads.iter().any(|&h| h == 0 || self.latent_dim % h != 0) {
            return Err(Error::Invalid(format!(
                "perceiver: need L >= 1 and latent_dim divisible by every head count, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Attention-score entries of one encoder pass.
    pub fn score_entries(&self, n_observed: usize, n_tokens: usize) -> u64 {
        let l = self.num_latents as u64;
        self.cross_heads as u64 * l * n_observed as u64
            + self.self_heads as u64 * self.attention_layers as u64 * l * l
            + self.decoder_heads as u64 * l * n_tokens as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEncoderConfig {
    pub attention_layers: usize,
    pub heads: usize,
    pub attention_dim: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
}

impl Default for GlobalEncoderConfig {
    fn default() -> Self {
        GlobalEncoderConfig {
            attention_layers: 3,
            heads: 3,
            attention_dim: 16,
            feedforward_dim: 16,
            dropout: 0.0,
        }
    }
}

impl GlobalEncoderConfig {
    pub fn score_entries(&self, n_tokens: usize) -> u64 {
        let n = n_tokens as u64;
        self.heads as u64 * self.attention_layers as u64 * n * n
    }
}

/// Pre-LN multi-head attention followed by a feedforward, both residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    ln_q: LayerNorm,
    ln_kv: Option<LayerNorm>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_ff: LayerNorm,
    ff: FeedForward,
    heads: usize,
    dropout: f64,
}

pub struct BlockDims {
    pub query: usize,
    /// `None` for self-attention.
    pub memory: Option<usize>,
    pub inner: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(init: &mut Init, name: &str, dims: BlockDims, dropout: f64) -> Self {
        let kv_dim = dims.memory.unwrap_or(dims.query);
        AttentionBlock {
            ln_q: LayerNorm::new(init, &format!("{name}.ln_q"), dims.query),
            ln_kv: dims.memory.map(|d| LayerNorm::new(init, &format!("{name}.ln_kv"), d)),
            wq: Linear::new(init, &format!("{name}.wq"), dims.query, dims.inner),
            wk: Linear::new(init, &format!("{name}.wk"), kv_dim, dims.inner),
            wv: Linear::new(init, &format!("{name}.wv"), kv_dim, dims.inner),
            wo: Linear::new(init, &format!("{name}.wo"), dims.inner, dims.query),
            ln_ff: LayerNorm::new(init, &format!("{name}.ln_ff"), dims.query),
            ff: FeedForward::new(init, &format!("{name}.ff"), dims.query, dims.hidden),
            heads: dims.heads,
            dropout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Option<Var>,
        stage: Stage,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let qn = self.ln_q.forward(g, store, x)?;
        let kvn = match (memory, &self.ln_kv) {
            (Some(m), Some(ln)) => ln.forward(g, store, m)?,
            _ => qn,
        };
        let q = self.wq.forward(g, store, qn)?;
        let k = self.wk.forward(g, store, kvn)?;
        let v = self.wv.forward(g, store, kvn)?;
        let a = g.attention(q, k, v, self.heads, None, stage)?;
        let o = self.wo.forward(g, store, a)?;
        let o = ctx.dropout(g, o, self.dropout)?;
        let x = g.add(x, o)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        let f = ctx.dropout(g, f, self.dropout)?;
        g.add(x, f)
    }
}

/// Latent array after cross- and self-attention.
#[derive(Clone, Copy, Debug)]
pub struct LatentState {
    pub latents: Var,
}

#[derive(Clone, Debug)]
pub struct PerceiverEncoder {
    pub cfg: PerceiverConfig,
    pub seeds: ParamId,
    cross: AttentionBlock,
    latent_blocks: Vec<AttentionBlock>,
    read_out: AttentionBlock,
}

impl PerceiverEncoder {
    pub fn new(init: &mut Init, cfg: &PerceiverConfig, token_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let seeds = init.normal("perceiver.seeds", &[cfg.num_latents, d], 0.02);
        let cross = AttentionBlock::new(
            init,
            "perceiver.cross",
            BlockDims {
                query: d,
                memory: Some(token_dim),
                inner: d,
                hidden: d,
                heads: cfg.cross_heads,
            },
            cfg.dropout,
        );
        let latent_blocks = (0..cfg.attention_layers)
            .map(|l| {
                AttentionBlock::new(
                    init,
                    &format!("perceiver.self{l}"),
                    BlockDims {
                        query: d,
                        memory: None,
                        inner: d,
                        hidden: d,
                        heads: cfg.self_heads,
                    },
                    cfg.dropout,
                )
            })
            .collect();
        let read_out = AttentionBlock::new(
            init,
            "perceiver.read",
            BlockDims {
                query: token_dim,
                memory: Some(d),
                inner: d,
                hidden: token_dim,
                heads: cfg.decoder_heads,
            },
            cfg.dropout,
        );
        Ok(PerceiverEncoder {
            cfg: cfg.clone(),
            seeds,
            cross,
            latent_blocks,
            read_out,
        })
    }

    /// Latents attend over the observed tokens, then over themselves.
    pub fn cross_attend_latents(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &TokenSet,
        ctx: &mut Ctx,
    ) -> Result<LatentState> {
        let observed: Vec<usize> = (0..tokens.len()).filter(|&i| tokens.meta[i].mask).collect();
        if observed.is_empty() {
            return Err(Error::Invalid("perceiver: no observed tokens to condition on".into()));
        }
        let obs = g.gather_rows(tokens.rows, Rc::new(observed))?;
        let seeds = g.param(store, self.seeds);
        let mut w = self.cross.forward(g, store, seeds, Some(obs), Stage::EncoderCross, ctx)?;
        for b in &self.latent_blocks {
            w = b.forward(g, store, w, None, Stage::EncoderSelf, ctx)?;
        }
        Ok(LatentState { latents: w })
    }

    /// Every token queries the latents; output rows keep the input order.
    pub fn decode_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &TokenSet,
        state: &LatentState,
        ctx: &mut Ctx,
    ) -> Result<TokenSet> {
        let z = self
            .read_out
            .forward(g, store, tokens.rows, Some(state.latents), Stage::EncoderCross, ctx)?;
        Ok(TokenSet {
            rows: z,
            meta: tokens.meta.clone(),
        })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenSet, ctx: &mut Ctx) -> Result<TokenSet> {
        let state = self.cross_attend_latents(g, store, tokens, ctx)?;
        self.decode_tokens(g, store, tokens, &state, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    pub cfg: GlobalEncoderConfig,
    blocks: Vec<AttentionBlock>,
}

impl GlobalEncoder {
    pub fn new(init: &mut Init, cfg: &GlobalEncoderConfig, token_dim: usize) -> Result<Self> {
        if cfg.heads == 0 || cfg.attention_dim == 0 {
            return Err(Error::Invalid(format!("global encoder: bad config {cfg:?}")));
        }
        let blocks = (0..cfg.attention_layers)
            .map(|l| {
                AttentionBlock::new(
                    init,
                    &format!("global.layer{l}"),
                    BlockDims {
                        query: token_dim,
                        memory: None,
                        inner: cfg.heads * cfg.attention_dim,
                        hidden: cfg.feedforward_dim,
                        heads: cfg.heads,
                    },
                    cfg.dropout,
                )
            })
            .collect();
        Ok(GlobalEncoder {
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenSet, ctx: &mut Ctx) -> Result<TokenSet> {
        let mut h = tokens.rows;
        for b in &self.blocks {
            h = b.forward(g, store, h, None, Stage::EncoderSelf, ctx)?;
        }
        Ok(TokenSet {
            rows: h,
            meta: tokens.meta.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Perceiver(PerceiverEncoder),
    Global(GlobalEncoder),
}

impl Encoder {
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenSet, ctx: &mut Ctx) -> Result<TokenSet> {
        match self {
            Encoder::Perceiver(p) => p.encode(g, store, tokens, ctx),
            Encoder::Global(e) => e.encode(g, store, tokens, ctx),
        }
    }
}
