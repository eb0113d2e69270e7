//! Copula decoder: flow marginals, attentional copula, joint likelihood and
//! sequential sampling.

mod attention;
mod flow;
mod samples;

use std::collections::HashSet;
use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use attention::{
    bin_of, copula_log_density, AttentionalCopula, ClampConfig, CopulaConditionalParams, CopulaConfig,
    TokenProjections,
};
pub use flow::{flow_forward, FlowConditioner, FlowConfig, FlowEval, MarginalFlow};
pub use samples::ForecastSamples;

use crate::data::SeriesFrame;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::guard::{guard_point, GuardConfig, GuardDecision, GuardRecord};
use crate::params::{Init, ParamStore};
use crate::scheduler::PermutationPlan;
use crate::tensor::Tensor;

const PROBE_STREAM_KEY: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub flow: FlowConditioner,
    pub copula: AttentionalCopula,
    pub clamp: ClampConfig,
}

/// Terms of the joint log-density over the missing points of one task.
#[derive(Clone, Debug)]
pub struct JointNll {
    /// `-(copula + marginal) / n_points`.
    pub loss: Var,
    pub copula: Var,
    pub marginal: Var,
    /// Per missing point in inference order, `[S, 1]`.
    pub copula_terms: Var,
    pub marginal_terms: Var,
    /// Clamped `u` of every token, `[N, 1]`.
    pub u: Var,
    pub logits: Var,
    pub n_points: usize,
}

/// Replaces the guard's probe draws for `(draw, point id)` when it returns
/// values. Used to exercise the guard deterministically.
pub type ProbeInjection = Arc<dyn Fn(usize, usize) -> Option<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
pub struct SampleOptions {
    pub n_draws: usize,
    pub seed: u64,
    pub guard: GuardConfig,
    pub probe_injection: Option<ProbeInjection>,
}

impl SampleOptions {
    pub fn new(n_draws: usize, seed: u64, guard: GuardConfig) -> Self {
        SampleOptions {
            n_draws,
            seed,
            guard,
            probe_injection: None,
        }
    }
}

impl std::fmt::Debug for SampleOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SampleOptions")
            .field("n_draws", &self.n_draws)
            .field("seed", &self.seed)
            .field("guard", &self.guard)
            .field("probe_injection", &self.probe_injection.is_some())
            .finish()
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub samples: ForecastSamples,
    /// Realized `u` per draw and missing point; `NaN` where the guard masked.
    pub u: Vec<Vec<f64>>,
    /// Conditioning ids actually used, per draw and missing point.
    pub windows: Vec<Vec<Vec<usize>>>,
    pub guard_log: Vec<GuardRecord>,
}

impl Decoder {
    pub fn new(
        init: &mut Init,
        token_dim: usize,
        flow: &FlowConfig,
        copula: &CopulaConfig,
        clamp: ClampConfig,
    ) -> Result<Self> {
        clamp.validate()?;
        Ok(Decoder {
            flow: FlowConditioner::new(init, flow, token_dim)?,
            copula: AttentionalCopula::new(init, copula, token_dim)?,
            clamp,
        })
    }

    /// Negative joint log-density of the missing points' true values, averaged
    /// per point. Every point needs a value.
    pub fn joint_nll(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frame: &SeriesFrame,
        tokens: Var,
        plan: &PermutationPlan,
    ) -> Result<JointNll> {
        let n = frame.points.len();
        let mut xs = Vec::with_capacity(n);
        for (i, p) in frame.points.iter().enumerate() {
            xs.push(frame.standardized(p).ok_or_else(|| {
                Error::Data(format!("point {i} (variable {}, step {}) has no value to score", p.variable, p.timestamp))
            })?);
        }
        let missing: Vec<usize> = plan.missing_order().to_vec();
        if missing.is_empty() {
            return Err(Error::Invalid("task has no points to infer".into()));
        }
        let s = missing.len();
        let fc = &self.flow.cfg;
        let params = self.flow.params(g, store, tokens)?;
        let x = g.constant(Tensor::matrix(n, 1, xs)?);
        let (u_raw, log_pdf) = flow_forward(g, params, x, fc.layers, fc.dim)?;
        let u = g.clamp(u_raw, self.clamp.u_min, self.clamp.u_max);

        let miss = Rc::new(missing.clone());
        let query_tokens = g.gather_rows(tokens, miss.clone())?;
        let proj = self.copula.project(g, store, query_tokens, tokens)?;
        let windows = Rc::new(missing.iter().map(|&i| plan.windows[i].clone()).collect());
        let logits = self.copula.logits(g, store, &proj, u, windows)?;
        let log_mass = g.log_softmax(logits);
        let r = self.copula.cfg.resolution;
        let uv = g.value(u);
        let bins = missing
            .iter()
            .map(|&i| bin_of(uv.data[i], r))
            .collect::<Result<Vec<_>>>()?;
        let picked = g.gather_cols(log_mass, bins)?;
        let copula_terms = g.add_scalar(picked, (r as f64).ln());
        let marginal_terms = g.gather_rows(log_pdf, miss)?;
        let copula = g.sum(copula_terms);
        let marginal = g.sum(marginal_terms);
        let total = g.add(copula, marginal)?;
        let loss = g.scale(total, -1.0 / s as f64);
        if !g.value(loss).data[0].is_finite() {
            let ct = &g.value(copula_terms).data;
            let mt = &g.value(marginal_terms).data;
            let k = (0..s).find(|&k| !ct[k].is_finite() || !mt[k].is_finite()).unwrap_or(0);
            return Err(Error::NonFinite {
                what: "joint_nll".into(),
                at: format!("point {}", missing[k]),
            });
        }
        Ok(JointNll {
            loss,
            copula,
            marginal,
            copula_terms,
            marginal_terms,
            u,
            logits,
            n_points: s,
        })
    }

    /// Draws the missing points sequentially along the plan. `tokens` are the
    /// encoded token rows of `frame`.
    pub fn sample_missing(
        &self,
        store: &ParamStore,
        frame: &SeriesFrame,
        tokens: &Tensor,
        plan: &PermutationPlan,
        opts: &SampleOptions,
    ) -> Result<SampleOutput> {
        if opts.n_draws == 0 {
            return Err(Error::Invalid("n_draws must be at least 1".into()));
        }
        if opts.guard.enabled {
            opts.guard.validate()?;
        }
        let n = frame.points.len();
        let d_count = opts.n_draws;
        let fc = &self.flow.cfg;
        let r = self.copula.cfg.resolution;

        let mut g0 = Graph::inference();
        let t = g0.constant(tokens.clone());
        let params = self.flow.params(&mut g0, store, t)?;
        let proj = self.copula.project(&mut g0, store, t, t)?;
        let proj = TokenProjections {
            query: g0.value(proj.query).clone(),
            keys: proj.keys.iter().map(|&k| g0.value(k).clone()).collect(),
            values: proj.values.iter().map(|&v| g0.value(v).clone()).collect(),
        };
        let prow = g0.value(params);
        let flows = (0..n)
            .map(|i| MarginalFlow::from_row(prow.row(i), fc.layers, fc.dim))
            .collect::<Result<Vec<_>>>()?;
        drop(g0);

        let mut base_u = vec![None; n];
        for (i, p) in frame.points.iter().enumerate() {
            if p.mask {
                let x = frame.standardized(p).unwrap();
                base_u[i] = Some(self.clamp.apply(flows[i].cdf(x)?));
            }
        }
        let tau = frame.standardized_variance();
        let missing = plan.missing_order().to_vec();
        let mut known = vec![base_u; d_count];
        let mut excluded: Vec<HashSet<usize>> = vec![HashSet::new(); d_count];
        let mut main: Vec<ChaCha8Rng> = (0..d_count).map(|d| stream(opts.seed, d)).collect();
        let mut probe: Vec<ChaCha8Rng> = (0..d_count).map(|d| stream(opts.seed ^ PROBE_STREAM_KEY, d)).collect();

        let mut values = vec![vec![0.0; missing.len()]; d_count];
        let mut realized = vec![vec![f64::NAN; missing.len()]; d_count];
        let mut used = vec![Vec::with_capacity(missing.len()); d_count];
        let mut guard_log = Vec::new();

        for (k, &i) in missing.iter().enumerate() {
            let mut mem_rows = Vec::new();
            let mut mem_u = Vec::new();
            let mut windows = Vec::with_capacity(d_count);
            for d in 0..d_count {
                let w = if excluded[d].is_empty() {
                    plan.windows[i].clone()
                } else {
                    plan.window_excluding(i, &excluded[d])
                };
                let start = mem_rows.len();
                for &j in &w {
                    mem_rows.push(j);
                    mem_u.push(known[d][j].ok_or_else(|| {
                        Error::Invalid(format!("window of point {i} references unrealized point {j}"))
                    })?);
                }
                windows.push((start..mem_rows.len()).collect::<Vec<_>>());
                used[d].push(w);
            }
            let mut g = Graph::inference();
            let logits =
                self.copula
                    .logits_from_tensors(&mut g, store, &proj, &vec![i; d_count], &mem_rows, &mem_u, Rc::new(windows))?;
            let lt = g.value(logits);
            let p = &frame.points[i];
            let stats = frame.stats[p.variable];
            for d in 0..d_count {
                let masses = CopulaConditionalParams {
                    logits: lt.row(d).to_vec(),
                }
                .masses();
                let draw = |rng: &mut ChaCha8Rng| -> Result<(f64, f64)> {
                    let u = self.clamp.apply(draw_u(&masses, r, rng));
                    Ok((u, flows[i].inverse_cdf(u)?))
                };
                let (u, x) = draw(&mut main[d])?;
                let mut value = x;
                let mut accepted = true;
                if opts.guard.enabled {
                    let injected = opts.probe_injection.as_ref().and_then(|f| f(d, i));
                    let out = match injected {
                        Some(vals) => {
                            let mut it = vals.into_iter();
                            guard_point(
                                || it.next().ok_or_else(|| Error::Invalid("injected probe ran out of draws".into())),
                                tau[p.variable],
                                &opts.guard,
                            )?
                        }
                        None => {
                            let mut first = Some(x);
                            let prb = &mut probe[d];
                            guard_point(
                                || match first.take() {
                                    Some(v) => Ok(v),
                                    None => Ok(draw(prb)?.1),
                                },
                                tau[p.variable],
                                &opts.guard,
                            )?
                        }
                    };
                    if let GuardDecision::Mask(mean) = out.decision {
                        value = mean;
                        accepted = false;
                    }
                    guard_log.push(GuardRecord {
                        draw: d,
                        point: i,
                        tau: tau[p.variable],
                        variance: out.variance,
                        masked: !accepted,
                    });
                }
                if accepted {
                    known[d][i] = Some(u);
                    realized[d][k] = u;
                } else {
                    excluded[d].insert(i);
                }
                values[d][k] = stats.invert(value);
            }
        }
        let samples = ForecastSamples {
            variables: missing.iter().map(|&i| frame.points[i].variable).collect(),
            timestamps: missing.iter().map(|&i| frame.axis.label(frame.points[i].timestamp)).collect(),
            steps: missing.iter().map(|&i| frame.points[i].timestamp).collect(),
            point_ids: missing,
            values,
        };
        Ok(SampleOutput {
            samples,
            u: realized,
            windows: used,
            guard_log,
        })
    }
}

fn stream(seed: u64, d: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(d as u64);
    rng
}

/// Picks a bin by its mass, then a uniform position inside it.
fn draw_u(masses: &[f64], r: usize, rng: &mut ChaCha8Rng) -> f64 {
    let t: f64 = rng.random();
    let mut acc = 0.0;
    let mut bin = r - 1;
    for (b, m) in masses.iter().enumerate() {
        acc += m;
        if t < acc {
            bin = b;
            break;
        }
    }
    let w: f64 = rng.random();
    let u = (bin as f64 + w) / r as f64;
    // keep strictly inside (0,1) for the inverse
    u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}
