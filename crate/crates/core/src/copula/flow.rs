//! Deep sigmoidal flow marginals.
//!
//! Each layer maps `x` to `Σ_j w_j σ(a_j x + b_j)` with `w = softmax(logits)`
//! and `a = exp(a_raw)`. Inner layers return the logit of that mixture, the last
//! layer returns the mixture itself, which is the CDF. Everything is evaluated
//! in log space so tails do not round to 0 or 1 prematurely.

use crate::error::{Error, Result};
use crate::graph::{log_sigmoid, logsumexp, Graph, Var};
use crate::params::{Init, Mlp, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub layers: usize,
    pub dim: usize,
    pub feedforward_layers: usize,
    pub feedforward_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 2,
            dim: 8,
            feedforward_layers: 2,
            feedforward_dim: 8,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.feedforward_dim == 0 {
            return Err(Error::Invalid("flow layers, dim and feedforward_dim must be positive".into()));
        }
        Ok(())
    }

    /// Width of one token's parameter row.
    pub fn param_width(&self) -> usize {
        3 * self.dim * self.layers
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    log_a: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    log_w: Vec<f64>,
}

/// Marginal flow of one token, built from its parameter row.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalFlow {
    layers: Vec<Layer>,
}

/// Log-space outputs of a flow evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowEval {
    pub log_u: f64,
    pub log_one_minus_u: f64,
    pub log_pdf: f64,
}

impl MarginalFlow {
    /// `row` holds, per layer, `dim` entries each of `a_raw`, `b` and mixture logits.
    pub fn from_row(row: &[f64], layers: usize, dim: usize) -> Result<Self> {
        if layers == 0 || dim == 0 || row.len() != 3 * layers * dim {
            return Err(Error::Invalid(format!(
                "flow row of length {} does not fit {layers} layers of width {dim}",
                row.len()
            )));
        }
        let layers = row
            .chunks(3 * dim)
            .map(|c| {
                let log_a = c[..dim].to_vec();
                let logits = &c[2 * dim..];
                let lse = logsumexp(logits);
                Layer {
                    a: log_a.iter().map(|v| v.exp()).collect(),
                    log_a,
                    b: c[dim..2 * dim].to_vec(),
                    log_w: logits.iter().map(|l| l - lse).collect(),
                }
            })
            .collect();
        Ok(MarginalFlow { layers })
    }

    /// Single sigmoid with slope `a` and offset `b`.
    pub fn sigmoid(a: f64, b: f64) -> Self {
        MarginalFlow::from_row(&[a.ln(), b, 0.0], 1, 1).unwrap()
    }

    pub fn eval(&self, x: f64) -> Result<FlowEval> {
        if !x.is_finite() {
            return Err(Error::Domain {
                op: "marginal_cdf",
                msg: format!("non-finite input {x}"),
            });
        }
        let mut y = x;
        let mut log_pdf = 0.0;
        let last = self.layers.len() - 1;
        let mut out = (0.0, 0.0);
        let mut tp = Vec::new();
        let mut tn = Vec::new();
        let mut td = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            tp.clear();
            tn.clear();
            td.clear();
            for j in 0..l.a.len() {
                let z = l.a[j] * y + l.b[j];
                let (lp, ln) = (log_sigmoid(z), log_sigmoid(-z));
                tp.push(l.log_w[j] + lp);
                tn.push(l.log_w[j] + ln);
                td.push(l.log_w[j] + l.log_a[j] + lp + ln);
            }
            let (log_s, log_1ms, log_d) = (logsumexp(&tp), logsumexp(&tn), logsumexp(&td));
            if li == last {
                log_pdf += log_d;
                out = (log_s, log_1ms);
            } else {
                log_pdf += log_d - log_s - log_1ms;
                y = log_s - log_1ms;
            }
        }
        Ok(FlowEval {
            log_u: out.0,
            log_one_minus_u: out.1,
            log_pdf,
        })
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.log_u.exp())
    }

    /// `log(F / (1 - F))`, resolved where `F` itself rounds to 0 or 1.
    pub fn cdf_logit(&self, x: f64) -> Result<f64> {
        let e = self.eval(x)?;
        Ok(e.log_u - e.log_one_minus_u)
    }

    pub fn log_pdf(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.log_pdf)
    }

    pub fn pdf(&self, x: f64) -> Result<f64> {
        Ok(self.log_pdf(x)?.exp())
    }

    /// Solves `F(x) = u` by bracketing, then safeguarded Newton steps.
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain {
                op: "marginal_inverse_cdf",
                msg: format!("u={u} outside (0,1)"),
            });
        }
        let f = |x: f64| self.cdf(x);
        let (mut lo, mut hi) = (-1.0, 1.0);
        let mut n = 0;
        while f(lo)? > u {
            lo *= 2.0;
            n += 1;
            if n > 1100 {
                return Err(Error::Convergence(u));
            }
        }
        n = 0;
        while f(hi)? < u {
            hi *= 2.0;
            n += 1;
            if n > 1100 {
                return Err(Error::Convergence(u));
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..500 {
            let e = self.eval(x)?;
            let r = e.log_u.exp() - u;
            if r.abs() <= 1e-14 {
                return Ok(x);
            }
            if r < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let step = x - r / e.log_pdf.exp();
            let next = if step > lo && step < hi && step.is_finite() {
                step
            } else {
                0.5 * (lo + hi)
            };
            if next == x || hi - lo <= f64::EPSILON * x.abs().max(1e-300) {
                break;
            }
            x = next;
        }
        if (f(x)? - u).abs() < 1e-10 {
            Ok(x)
        } else {
            Err(Error::Convergence(u))
        }
    }
}

/// Maps encoded tokens to per-token flow parameter rows.
#[derive(Clone, Debug)]
pub struct FlowConditioner {
    pub cfg: FlowConfig,
    pub net: Mlp,
}

impl FlowConditioner {
    pub fn new(init: &mut Init, cfg: &FlowConfig, token_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let net = Mlp::new(
            init,
            "flow",
            token_dim,
            cfg.feedforward_dim,
            cfg.feedforward_layers,
            cfg.param_width(),
        );
        // start near a smooth, spread-out mixture
        for w in &mut init.store.get_mut(net.head.weight).data {
            *w *= 0.1;
        }
        let k = cfg.dim;
        let bias = &mut init.store.get_mut(net.head.bias).data;
        for l in 0..cfg.layers {
            for j in 0..k {
                bias[l * 3 * k + k + j] = if k == 1 {
                    0.0
                } else {
                    -2.0 + 4.0 * j as f64 / (k - 1) as f64
                };
            }
        }
        Ok(FlowConditioner { cfg: cfg.clone(), net })
    }

    pub fn params(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        self.net.forward(g, store, tokens)
    }
}

/// Flow on the tape: `params` is `[M, 3*dim*layers]`, `x` one input per row.
/// Returns `(u, log_pdf)` as `[M, 1]` columns.
pub fn flow_forward(g: &mut Graph, params: Var, x: Var, layers: usize, dim: usize) -> Result<(Var, Var)> {
    let mut y = x;
    let mut log_pdf: Option<Var> = None;
    let mut u = None;
    for l in 0..layers {
        let base = 3 * dim * l;
        let a_raw = g.slice(params, 1, base, dim)?;
        let b = g.slice(params, 1, base + dim, dim)?;
        let logits = g.slice(params, 1, base + 2 * dim, dim)?;
        let a = g.exp(a_raw);
        let log_w = g.log_softmax(logits);
        let ay = g.mul(a, y)?;
        let z = g.add(ay, b)?;
        let lp = g.log_sigmoid(z);
        let nz = g.neg(z);
        let ln = g.log_sigmoid(nz);
        let tp = g.add(log_w, lp)?;
        let tn = g.add(log_w, ln)?;
        let log_s = g.logsumexp(tp);
        let log_1ms = g.logsumexp(tn);
        let td = g.add(tp, ln)?;
        let td = g.add(td, a_raw)?;
        let log_d = g.logsumexp(td);
        let term = if l + 1 == layers {
            u = Some(g.exp(log_s));
            log_d
        } else {
            y = g.sub(log_s, log_1ms)?;
            let t = g.sub(log_d, log_s)?;
            g.sub(t, log_1ms)?
        };
        log_pdf = Some(match log_pdf {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    match (u, log_pdf) {
        (Some(u), Some(lp)) => Ok((u, lp)),
        _ => Err(Error::Invalid("flow needs at least one layer".into())),
    }
}
