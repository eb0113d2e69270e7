//! Point embeddings: value, learned series code and mask flag, lifted to the
//! token width and passed through residual feedforward layers, plus a
//! sinusoidal encoding of the time step (with dropout).

use std::rc::Rc;

use crate::data::SeriesFrame;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Ctx, FeedForward, Init, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub series_embed_dim: usize,
    pub token_dim: usize,
    pub input_encoder_layers: usize,
    pub positional_base: f64,
    pub dropout: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            series_embed_dim: 5,
            token_dim: 48,
            input_encoder_layers: 3,
            positional_base: 10_000.0,
            dropout: 0.0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.token_dim % 2 != 0 {
            return Err(Error::Invalid(format!("token_dim {} must be even", self.token_dim)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub variable: usize,
    pub timestamp: usize,
    pub mask: bool,
}

/// Token rows on a graph, aligned with the frame's points.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub rows: Var,
    pub meta: Vec<TokenMeta>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

/// `PE(t)[2i] = sin(t / base^(2i/d))`, `PE(t)[2i+1] = cos(...)`.
pub fn positional_encoding(t: usize, dim: usize, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = base.powf(-(2.0 * i as f64) / dim as f64);
        let a = t as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub cfg: EmbedConfig,
    pub n_variables: usize,
    pub series: ParamId,
    pub lift: Linear,
    pub blocks: Vec<FeedForward>,
}

impl Embedder {
    pub fn new(init: &mut Init, cfg: &EmbedConfig, n_variables: usize) -> Result<Self> {
        cfg.validate()?;
        let series = init.normal("embed.series", &[n_variables, cfg.series_embed_dim], 1.0);
        let lift = Linear::new(init, "embed.lift", cfg.series_embed_dim + 2, cfg.token_dim);
        let blocks = (0..cfg.input_encoder_layers)
            .map(|l| FeedForward::new(init, &format!("embed.block{l}"), cfg.token_dim, cfg.token_dim))
            .collect();
        Ok(Embedder {
            cfg: cfg.clone(),
            n_variables,
            series,
            lift,
            blocks,
        })
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, frame: &SeriesFrame, ctx: &mut Ctx) -> Result<TokenSet> {
        let n = frame.points.len();
        let d = self.cfg.token_dim;
        let mut feats = Vec::with_capacity(n * 2);
        let mut vars = Vec::with_capacity(n);
        let mut pe = Vec::with_capacity(n * d);
        let mut meta = Vec::with_capacity(n);
        for p in &frame.points {
            if p.variable >= self.n_variables {
                return Err(Error::Invalid(format!(
                    "unknown variable index {} (model has {})",
                    p.variable, self.n_variables
                )));
            }
            let v = if p.mask { frame.standardized(p).unwrap_or(0.0) } else { 0.0 };
            feats.push(v);
            feats.push(if p.mask { 1.0 } else { 0.0 });
            vars.push(p.variable);
            pe.extend(positional_encoding(p.timestamp, d, self.cfg.positional_base));
            meta.push(TokenMeta {
                variable: p.variable,
                timestamp: p.timestamp,
                mask: p.mask,
            });
        }
        let x = g.constant(Tensor::matrix(n, 2, feats)?);
        let table = g.param(store, self.series);
        let codes = g.gather_rows(table, Rc::new(vars))?;
        let value = g.slice(x, 1, 0, 1)?;
        let mask = g.slice(x, 1, 1, 1)?;
        let feats = g.concat(&[value, codes, mask], 1)?;
        let lifted = self.lift.forward(g, store, feats)?;
        let mut h = lifted;
        for b in &self.blocks {
            let f = b.forward(g, store, h)?;
            h = g.add(h, f)?;
        }
        let pe = g.constant(Tensor::matrix(n, d, pe)?);
        let h = g.add(h, pe)?;
        let h = ctx.dropout(g, h, self.cfg.dropout)?;
        Ok(TokenSet { rows: h, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{random_walk, TimePoint};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &EmbedConfig, n_vars: usize) -> (ParamStore, Embedder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Embedder::new(&mut Init { store: &mut store, rng: &mut rng }, cfg, n_vars).unwrap();
        (store, e)
    }

    fn run(e: &Embedder, store: &ParamStore, f: &SeriesFrame) -> Tensor {
        let mut g = Graph::new();
        let t = e.embed(&mut g, store, f, &mut Ctx::eval()).unwrap();
        g.value(t.rows).clone()
    }

    #[test]
    fn pe_at_zero_alternates() {
        let pe = positional_encoding(0, 8, 10_000.0);
        assert_eq!(pe, vec![0., 1., 0., 1., 0., 1., 0., 1.]);
    }

    #[test]
    fn masked_value_is_ignored() {
        let (store, e) = setup(&EmbedConfig::default(), 2);
        let mut f = random_walk(2, 6, 4, 0.0).unwrap();
        f.points[3].mask = false;
        let a = run(&e, &store, &f);
        f.points[3].value = Some(1e6);
        let b = run(&e, &store, &f);
        assert_eq!(a, b);
    }

    #[test]
    fn time_shift_changes_only_pe() {
        let cfg = EmbedConfig {
            input_encoder_layers: 0,
            ..EmbedConfig::default()
        };
        let (store, e) = setup(&cfg, 1);
        let pts = vec![TimePoint::observed(0, 2, 0.5), TimePoint::observed(0, 9, 0.5)];
        let mut f = SeriesFrame::new(1, 10, pts).unwrap();
        f.stats[0] = Default::default();
        let out = run(&e, &store, &f);
        let d = cfg.token_dim;
        let pa = positional_encoding(2, d, cfg.positional_base);
        let pb = positional_encoding(9, d, cfg.positional_base);
        for j in 0..d {
            let lhs = out.at(1, j) - out.at(0, j);
            assert!((lhs - (pb[j] - pa[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_follow_point_permutation() {
        let (store, e) = setup(&EmbedConfig::default(), 3);
        let f = random_walk(3, 5, 2, 0.2).unwrap();
        let a = run(&e, &store, &f);
        let mut g = f.clone();
        g.points.reverse();
        let b = run(&e, &store, &g);
        let n = f.points.len();
        for i in 0..n {
            assert_eq!(a.row(i), b.row(n - 1 - i));
        }
    }

    #[test]
    fn unknown_variable_rejected() {
        let (store, e) = setup(&EmbedConfig::default(), 1);
        let f = random_walk(2, 3, 0, 0.0).unwrap();
        let mut g = Graph::new();
        assert!(e.embed(&mut g, &store, &f, &mut Ctx::eval()).is_err());
    }
}
