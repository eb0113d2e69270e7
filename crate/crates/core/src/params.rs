//! Named parameter storage and the small layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of learned tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Builds parameters with deterministic initialization.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std > 0");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.store.add(name, Tensor::new(shape.to_vec(), vec![value; n]).unwrap())
    }

    pub fn values(&mut self, name: &str, data: Vec<f64>) -> ParamId {
        self.store.add(name, Tensor::vector(data))
    }
}

/// Per-forward state: training flag and the dropout stream.
pub struct Ctx {
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        use rand::SeedableRng;
        Ctx {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Ctx {
            training: true,
            rng,
        }
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        let std = (1.0 / inp.max(1) as f64).sqrt();
        Linear {
            weight: init.normal(&format!("{name}.weight"), &[inp, out], std),
            bias: init.constant(&format!("{name}.bias"), &[out], 0.0),
            inp,
            out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Layer normalization with a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: init.constant(&format!("{name}.gain"), &[dim], 1.0),
            shift: init.constant(&format!("{name}.shift"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layernorm(x);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul(n, gain)?;
        g.add(y, shift)
    }
}

/// Two-layer ReLU feedforward: `dim -> hidden -> dim`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            l1: Linear::new(init, &format!("{name}.l1"), dim, hidden),
            l2: Linear::new(init, &format!("{name}.l2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h);
        self.l2.forward(g, store, h)
    }
}

/// ReLU multilayer perceptron: `layers` hidden layers of width `hidden`, then a
/// linear read-out to `out`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub head: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, inp: usize, hidden: usize, layers: usize, out: usize) -> Self {
        let mut dims = inp;
        let mut hs = Vec::with_capacity(layers);
        for l in 0..layers {
            hs.push(Linear::new(init, &format!("{name}.h{l}"), dims, hidden));
            dims = hidden;
        }
        Mlp {
            hidden: hs,
            head: Linear::new(init, &format!("{name}.out"), dims, out),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.hidden {
            h = l.forward(g, store, h)?;
            h = g.relu(h);
        }
        self.head.forward(g, store, h)
    }
}
