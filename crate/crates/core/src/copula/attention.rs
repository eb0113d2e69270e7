//! Attentional copula: each missing point attends over its conditioning
//! window and emits logits for a piecewise-constant density on (0,1).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, Windows};
use crate::memscale::Stage;
use crate::params::{FeedForward, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CopulaConfig {
    pub layers: usize,
    pub heads: usize,
    pub attention_dim: usize,
    pub feedforward_dim: usize,
    pub feedforward_layers: usize,
    pub resolution: usize,
}

impl Default for CopulaConfig {
    fn default() -> Self {
        CopulaConfig {
            layers: 3,
            heads: 3,
            attention_dim: 16,
            feedforward_dim: 16,
            feedforward_layers: 3,
            resolution: 50,
        }
    }
}

impl CopulaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.attention_dim == 0 || self.feedforward_dim == 0 {
            return Err(Error::Invalid("copula heads and widths must be positive".into()));
        }
        if self.resolution < 2 {
            return Err(Error::Invalid(format!("resolution {} must be at least 2", self.resolution)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.heads * self.attention_dim
    }

    /// Score entries charged for windows of the given sizes.
    pub fn score_entries(&self, window_sizes: impl IntoIterator<Item = usize>) -> u64 {
        let total: usize = window_sizes.into_iter().sum();
        (self.layers * self.heads * total) as u64
    }
}

/// Bounds applied to every realized `u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClampConfig {
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for ClampConfig {
    fn default() -> Self {
        ClampConfig { u_min: 0.01, u_max: 0.99 }
    }
}

impl ClampConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.u_min && self.u_min < self.u_max && self.u_max < 1.0) {
            return Err(Error::Invalid(format!(
                "clamp bounds must satisfy 0 < u_min < u_max < 1, got {} and {}",
                self.u_min, self.u_max
            )));
        }
        Ok(())
    }

    pub fn apply(&self, u: f64) -> f64 {
        u.clamp(self.u_min, self.u_max)
    }
}

/// Bin probabilities of one conditional factor.
#[derive(Clone, Debug, PartialEq)]
pub struct CopulaConditionalParams {
    pub logits: Vec<f64>,
}

impl CopulaConditionalParams {
    pub fn resolution(&self) -> usize {
        self.logits.len()
    }

    pub fn masses(&self) -> Vec<f64> {
        let m = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn log_density(&self, u: f64) -> Result<f64> {
        let lse = crate::graph::logsumexp(&self.logits);
        let r = self.resolution();
        Ok(self.logits[bin_of(u, r)?] - lse + (r as f64).ln())
    }
}

/// Index of the bin containing `u`.
pub fn bin_of(u: f64, resolution: usize) -> Result<usize> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain {
            op: "copula",
            msg: format!("u={u} outside (0,1)"),
        });
    }
    Ok(((u * resolution as f64) as usize).min(resolution - 1))
}

/// `Σ_i log(mass_i(bin(u_i)) · R)` over factors listed in inference order.
pub fn copula_log_density(u: &[f64], factors: &[CopulaConditionalParams]) -> Result<f64> {
    if u.len() != factors.len() {
        return Err(Error::Invalid(format!("{} u values for {} factors", u.len(), factors.len())));
    }
    u.iter().zip(factors).map(|(&u, f)| f.log_density(u)).sum()
}

#[derive(Clone, Debug)]
struct CopulaLayer {
    key: Linear,
    key_u: ParamId,
    value: Linear,
    value_u: ParamId,
    ln_q: LayerNorm,
    wq: Linear,
    wo: Linear,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct AttentionalCopula {
    pub cfg: CopulaConfig,
    in_proj: Linear,
    layers: Vec<CopulaLayer>,
    head: Mlp,
}

/// Token projections that do not depend on realized `u`, per layer.
pub struct TokenProjections<T> {
    pub query: T,
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

impl AttentionalCopula {
    pub fn new(init: &mut Init, cfg: &CopulaConfig, token_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width();
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = format!("copula.layer{l}");
                CopulaLayer {
                    key: Linear::new(init, &format!("{n}.key"), token_dim, w),
                    key_u: init.normal(&format!("{n}.key_u"), &[1, w], 1.0),
                    value: Linear::new(init, &format!("{n}.value"), token_dim, w),
                    value_u: init.normal(&format!("{n}.value_u"), &[1, w], 1.0),
                    ln_q: LayerNorm::new(init, &format!("{n}.ln_q"), w),
                    wq: Linear::new(init, &format!("{n}.wq"), w, w),
                    wo: Linear::new(init, &format!("{n}.wo"), w, w),
                    ln_ff: LayerNorm::new(init, &format!("{n}.ln_ff"), w),
                    ff: FeedForward::new(init, &format!("{n}.ff"), w, cfg.feedforward_dim),
                }
            })
            .collect();
        Ok(AttentionalCopula {
            cfg: cfg.clone(),
            in_proj: Linear::new(init, "copula.in", token_dim, w),
            layers,
            head: Mlp::new(
                init,
                "copula.head",
                w,
                cfg.feedforward_dim,
                cfg.feedforward_layers,
                cfg.resolution,
            ),
        })
    }

    /// Query projections of `queries` and per-layer key/value projections of `memory`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, queries: Var, memory: Var) -> Result<TokenProjections<Var>> {
        let tokens = memory;
        let query = self.in_proj.forward(g, store, queries)?;
        let mut keys = Vec::with_capacity(self.layers.len());
        let mut values = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            keys.push(l.key.forward(g, store, tokens)?);
            values.push(l.value.forward(g, store, tokens)?);
        }
        Ok(TokenProjections { query, keys, values })
    }

    /// Logits `[M, resolution]`. `queries` are the projected query rows, `keys`
    /// and `values` the projected memory rows (one per entry of `u`), and
    /// `windows[i]` indexes memory rows visible to query `i`.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        proj: &TokenProjections<Var>,
        u: Var,
        windows: Windows,
    ) -> Result<Var> {
        let mut h = proj.query;
        for (l, layer) in self.layers.iter().enumerate() {
            let ku = g.param(store, layer.key_u);
            let vu = g.param(store, layer.value_u);
            let uk = g.mul(u, ku)?;
            let uv = g.mul(u, vu)?;
            let k = g.add(proj.keys[l], uk)?;
            let v = g.add(proj.values[l], uv)?;
            let qn = layer.ln_q.forward(g, store, h)?;
            let q = layer.wq.forward(g, store, qn)?;
            let a = g.attention(q, k, v, self.cfg.heads, Some(windows.clone()), Stage::Decoder)?;
            let o = layer.wo.forward(g, store, a)?;
            h = g.add(h, o)?;
            let f = layer.ln_ff.forward(g, store, h)?;
            let f = layer.ff.forward(g, store, f)?;
            h = g.add(h, f)?;
        }
        self.head.forward(g, store, h)
    }

    /// Logits for queries/memory taken from precomputed projection tensors.
    /// Used while sampling, where each step sees a different memory set.
    pub fn logits_from_tensors(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        proj: &TokenProjections<Tensor>,
        query_rows: &[usize],
        memory_rows: &[usize],
        memory_u: &[f64],
        windows: Windows,
    ) -> Result<Var> {
        let pick = |t: &Tensor, rows: &[usize]| -> Result<Tensor> {
            let c = t.cols();
            let mut data = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                data.extend_from_slice(t.row(r));
            }
            Tensor::matrix(rows.len(), c, data)
        };
        let query = g.constant(pick(&proj.query, query_rows)?);
        let mut keys = Vec::with_capacity(proj.keys.len());
        let mut values = Vec::with_capacity(proj.keys.len());
        for l in 0..proj.keys.len() {
            keys.push(g.constant(pick(&proj.keys[l], memory_rows)?));
            values.push(g.constant(pick(&proj.values[l], memory_rows)?));
        }
        let u = g.constant(Tensor::matrix(memory_u.len(), 1, memory_u.to_vec())?);
        self.logits(g, store, &TokenProjections { query, keys, values }, u, windows)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_masses() {
        let p = CopulaConditionalParams { logits: vec![0.3; 7] };
        for m in p.masses() {
            assert!((m - 1.0 / 7.0).abs() < 1e-15);
        }
        assert!(p.log_density(0.42).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_factor_density_is_resolution_times_mass() {
        let p = CopulaConditionalParams {
            logits: vec![0.0, 1.0, 2.0, -1.0],
        };
        let m = p.masses();
        let d = p.log_density(0.3).unwrap().exp();
        assert!((d - 4.0 * m[1]).abs() < 1e-12);
    }

    #[test]
    fn bins_cover_unit_interval() {
        assert_eq!(bin_of(1e-9, 50).unwrap(), 0);
        assert_eq!(bin_of(0.5, 50).unwrap(), 25);
        assert_eq!(bin_of(1.0 - 1e-16, 50).unwrap(), 49);
        assert!(bin_of(0.0, 50).is_err());
        assert!(bin_of(1.0, 50).is_err());
    }

    #[test]
    fn clamp_validation() {
        assert!(ClampConfig { u_min: 0.5, u_max: 0.4 }.validate().is_err());
        assert_eq!(ClampConfig::default().apply(0.999), 0.99);
    }
}
