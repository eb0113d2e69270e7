//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::rc::Rc;

use percdf::copula::{ClampConfig, CopulaConfig, FlowConfig};
use percdf::data::{SeriesFrame, TimePoint};
use percdf::embedding::EmbedConfig;
use percdf::encoder::{GlobalEncoderConfig, PerceiverConfig};
use percdf::graph::{Graph, Var};
use percdf::memscale::Stage;
use percdf::model::{EncoderConfig, ModelConfig, SchedulerConfig};
use percdf::scheduler::{PermutationMode, WindowPolicy};
use percdf::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small enough for finite differences and 100k-draw sampling.
pub fn tiny_model(resolution: usize) -> ModelConfig {
    ModelConfig {
        embed: EmbedConfig {
            series_embed_dim: 2,
            token_dim: 8,
            input_encoder_layers: 1,
            positional_base: 10_000.0,
            dropout: 0.0,
        },
        encoder: EncoderConfig::Perceiver(PerceiverConfig {
            num_latents: 3,
            latent_dim: 8,
            attention_layers: 1,
            self_heads: 2,
            cross_heads: 2,
            decoder_heads: 2,
            dropout: 0.0,
        }),
        flow: FlowConfig {
            layers: 2,
            dim: 3,
            feedforward_layers: 1,
            feedforward_dim: 6,
        },
        copula: CopulaConfig {
            layers: 1,
            heads: 2,
            attention_dim: 3,
            feedforward_dim: 6,
            feedforward_layers: 1,
            resolution,
        },
        clamp: ClampConfig::default(),
        scheduler: SchedulerConfig {
            mode: PermutationMode::Midpoint,
            window: WindowPolicy::Local(2),
        },
    }
}

pub fn tiny_global() -> GlobalEncoderConfig {
    GlobalEncoderConfig {
        attention_layers: 2,
        heads: 2,
        attention_dim: 3,
        feedforward_dim: 6,
        dropout: 0.0,
    }
}

/// Random-walk values with each point observed with probability `p_obs`.
pub fn random_mask_frame(r: &mut ChaCha8Rng, n_vars: usize, n_steps: usize, p_obs: f64) -> SeriesFrame {
    let mut points = Vec::new();
    for v in 0..n_vars {
        let mut x = 0.0;
        for t in 0..n_steps {
            x += r.random_range(-1.0..1.0);
            let mut p = TimePoint::observed(v, t, x);
            p.mask = r.random::<f64>() < p_obs;
            points.push(p);
        }
    }
    SeriesFrame::new(n_vars, n_steps, points).unwrap()
}

/// Depth by simulated binary search inside the gap around each missing step:
/// the probe at `lo + (hi - lo) / 2` either hits the step or halves the gap.
pub fn brute_depths(frame: &SeriesFrame) -> Vec<i64> {
    let mut depth = vec![-1; frame.points.len()];
    let mut observed = vec![vec![false; frame.n_steps]; frame.n_variables];
    let mut present = vec![vec![false; frame.n_steps]; frame.n_variables];
    for p in &frame.points {
        present[p.variable][p.timestamp] = true;
        observed[p.variable][p.timestamp] = p.mask;
    }
    for (i, p) in frame.points.iter().enumerate() {
        if p.mask {
            continue;
        }
        let (v, t) = (p.variable, p.timestamp);
        let blocked = |s: usize| !present[v][s] || observed[v][s];
        // the gap is the maximal run of missing steps containing t
        let mut lo = t;
        while lo > 0 && !blocked(lo - 1) {
            lo -= 1;
        }
        let mut hi = t;
        while hi + 1 < frame.n_steps && !blocked(hi + 1) {
            hi += 1;
        }
        let mut d = 0;
        loop {
            let m = lo + (hi - lo) / 2;
            if m == t {
                break;
            }
            if t < m {
                hi = m - 1;
            } else {
                lo = m + 1;
            }
            d += 1;
        }
        depth[i] = d;
    }
    depth
}

/// Unbiased pairwise CRPS, straight from the definition.
pub fn crps_pairwise(draws: &[f64], y: f64) -> f64 {
    let m = draws.len() as f64;
    let a = draws.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    let mut b = 0.0;
    for x in draws {
        for z in draws {
            b += (x - z).abs();
        }
    }
    a - b / (2.0 * m * (m - 1.0))
}

/// Scaled relative error used by every gradient check.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// Random computation graphs for gradient checking.

#[derive(Clone, Debug)]
enum Step {
    MatMul(usize),
    AddLeaf(usize),
    SubLeaf(usize),
    MulLeaf(usize),
    Square,
    Scale(f64),
    AddScalar(f64),
    Neg,
    Sigmoid,
    LogSigmoid,
    ExpHalf,
    LogOnePlusSquare,
    Softmax,
    LogSoftmax,
    LogSumExp,
    SumLastdim,
    LayerNorm,
    ConcatLeaf(usize),
    Slice(usize, usize),
    GatherRows(Vec<usize>),
    GatherCols(Vec<usize>),
    Attention { k: usize, v: usize, heads: usize, windows: Option<Vec<Vec<usize>>> },
    ResidualSigmoid,
}

/// A random program over a handful of input leaves ending in a weighted sum.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub leaves: Vec<Tensor>,
    steps: Vec<Step>,
    weights: Tensor,
}

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

impl RandomGraph {
    pub fn generate(seed: u64) -> Self {
        let mut r = rng(seed);
        let mut rows = r.random_range(1..4usize);
        let mut cols = [2usize, 4, 6][r.random_range(0..3)];
        let mut leaves = vec![random_tensor(&mut r, rows, cols)];
        let mut steps = Vec::new();
        let n_steps = r.random_range(2..7);
        for _ in 0..n_steps {
            let pick = r.random_range(0..23);
            let mut leaf = |r: &mut ChaCha8Rng, rr: usize, cc: usize| {
                leaves.push(random_tensor(r, rr, cc));
                leaves.len() - 1
            };
            let step = match pick {
                0 => {
                    let c2 = r.random_range(1..5);
                    let id = leaf(&mut r, cols, c2);
                    cols = c2;
                    Step::MatMul(id)
                }
                1 => Step::AddLeaf(leaf(&mut r, rows, cols)),
                2 => Step::SubLeaf(leaf(&mut r, 1, cols)),
                3 => {
                    let rr = if r.random() { 1 } else { rows };
                    Step::MulLeaf(leaf(&mut r, rr, cols))
                }
                4 => Step::Square,
                5 => Step::Scale(r.random_range(-2.0..2.0)),
                6 => Step::AddScalar(r.random_range(-1.0..1.0)),
                7 => Step::Neg,
                8 => Step::Sigmoid,
                9 => Step::LogSigmoid,
                10 => Step::ExpHalf,
                11 => Step::LogOnePlusSquare,
                12 => Step::Softmax,
                13 => Step::LogSoftmax,
                14 => {
                    cols = 1;
                    Step::LogSumExp
                }
                15 => {
                    cols = 1;
                    Step::SumLastdim
                }
                16 if cols >= 2 => Step::LayerNorm,
                17 => {
                    let c2 = r.random_range(1..3);
                    let id = leaf(&mut r, rows, c2);
                    cols += c2;
                    Step::ConcatLeaf(id)
                }
                18 if cols >= 2 => {
                    let len = r.random_range(1..cols);
                    let start = r.random_range(0..=cols - len);
                    cols = len;
                    Step::Slice(start, len)
                }
                19 => {
                    let n = r.random_range(1..5);
                    let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..rows)).collect();
                    rows = n;
                    Step::GatherRows(idx)
                }
                20 => {
                    let idx: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
                    cols = 1;
                    Step::GatherCols(idx)
                }
                21 => {
                    let heads = if cols % 2 == 0 && r.random() { 2 } else { 1 };
                    let p = r.random_range(1..5);
                    let dv = heads * r.random_range(1..3);
                    let k = leaf(&mut r, p, cols);
                    let v = leaf(&mut r, p, dv);
                    let windows = if r.random() {
                        Some(
                            (0..rows)
                                .map(|_| {
                                    let mut w: Vec<usize> = (0..p).filter(|_| r.random::<f64>() < 0.6).collect();
                                    if w.is_empty() {
                                        w.push(r.random_range(0..p));
                                    }
                                    w
                                })
                                .collect(),
                        )
                    } else {
                        None
                    };
                    cols = dv;
                    Step::Attention { k, v, heads, windows }
                }
                _ => Step::ResidualSigmoid,
            };
            steps.push(step);
        }
        let weights = random_tensor(&mut r, rows, cols);
        RandomGraph { leaves, steps, weights }
    }

    /// Builds the program on `g` with `leaves` as inputs and returns the loss.
    pub fn build(&self, g: &mut Graph, leaves: &[Var]) -> Var {
        let mut x = leaves[0];
        for s in &self.steps {
            x = match s {
                Step::MatMul(l) => g.matmul(x, leaves[*l]).unwrap(),
                Step::AddLeaf(l) => g.add(x, leaves[*l]).unwrap(),
                Step::SubLeaf(l) => g.sub(x, leaves[*l]).unwrap(),
                Step::MulLeaf(l) => g.mul(x, leaves[*l]).unwrap(),
                Step::Square => g.mul(x, x).unwrap(),
                Step::Scale(c) => g.scale(x, *c),
                Step::AddScalar(c) => g.add_scalar(x, *c),
                Step::Neg => g.neg(x),
                Step::Sigmoid => g.sigmoid(x),
                Step::LogSigmoid => g.log_sigmoid(x),
                Step::ExpHalf => {
                    let h = g.scale(x, 0.5);
                    g.exp(h)
                }
                Step::LogOnePlusSquare => {
                    let sq = g.mul(x, x).unwrap();
                    let p = g.add_scalar(sq, 1.0);
                    g.log(p).unwrap()
                }
                Step::Softmax => g.softmax(x),
                Step::LogSoftmax => g.log_softmax(x),
                Step::LogSumExp => g.logsumexp(x),
                Step::SumLastdim => g.sum_lastdim(x),
                Step::LayerNorm => g.layernorm(x),
                Step::ConcatLeaf(l) => g.concat(&[x, leaves[*l]], 1).unwrap(),
                Step::Slice(a, n) => g.slice(x, 1, *a, *n).unwrap(),
                Step::GatherRows(idx) => g.gather_rows(x, Rc::new(idx.clone())).unwrap(),
                Step::GatherCols(idx) => g.gather_cols(x, idx.clone()).unwrap(),
                Step::Attention { k, v, heads, windows } => g
                    .attention(
                        x,
                        leaves[*k],
                        leaves[*v],
                        *heads,
                        windows.clone().map(Rc::new),
                        Stage::Decoder,
                    )
                    .unwrap(),
                Step::ResidualSigmoid => {
                    let s = g.sigmoid(x);
                    g.add(x, s).unwrap()
                }
            };
        }
        let w = g.constant(self.weights.clone());
        let y = g.mul(x, w).unwrap();
        g.sum(y)
    }

    pub fn loss_at(&self, leaves: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let l = self.build(&mut g, &vars);
        g.value(l).item()
    }

    /// Analytic gradients of every leaf.
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.leaves.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let l = self.build(&mut g, &vars);
        g.backward(l).unwrap();
        vars.iter()
            .zip(&self.leaves)
            .map(|(v, t)| g.grad(*v).map_or(vec![0.0; t.len()], |s| s.to_vec()))
            .collect()
    }

    /// Largest scaled relative error against central differences.
    pub fn max_error(&self, h: f64) -> f64 {
        let analytic = self.gradients();
        let mut worst: f64 = 0.0;
        for (li, t) in self.leaves.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = self.leaves.clone();
                plus[li].data[j] += h;
                let mut minus = self.leaves.clone();
                minus[li].data[j] -= h;
                let num = (self.loss_at(&plus) - self.loss_at(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(analytic[li][j], num));
            }
        }
        worst
    }
}
