//! Minibatch training with RMSProp.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{Checkpoint, RngState};

use crate::data::{make_forecast_task, SeriesFrame, WindowTask};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::{Ctx, ParamStore};
use crate::scheduler::{build_permutation, PermutationMode};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub permutation_mode: PermutationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            batches_per_epoch: 512,
            batch_size: 24,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            grad_clip: None,
            seed: 0,
            permutation_mode: PermutationMode::Midpoint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0) {
            bad.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.epochs == 0 {
            bad.push("epochs must be at least 1".to_string());
        }
        if self.batches_per_epoch == 0 || self.batch_size == 0 {
            bad.push("batches_per_epoch and batch_size must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            bad.push(format!("rmsprop_decay {} not in [0,1)", self.rmsprop_decay));
        }
        if !(self.rmsprop_epsilon > 0.0) {
            bad.push("rmsprop_epsilon must be positive".to_string());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            bad.push("grad_clip must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(bad.join("; ")))
        }
    }
}

/// Running mean of squared gradients, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmsPropState {
    pub square_avg: Vec<Vec<f64>>,
}

impl RmsPropState {
    pub fn new(store: &ParamStore) -> Self {
        RmsPropState {
            square_avg: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }
}

/// `s <- rho*s + (1-rho)*g^2`, `p <- p - lr*g/(sqrt(s)+eps)`. `grads` is aligned
/// with the store; tensors without a gradient are left untouched.
pub fn rmsprop_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut RmsPropState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (idx, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            let id = crate::params::ParamId(idx);
            return Err(Error::NonFinite {
                what: "gradient".into(),
                at: format!("{}[{k}]", store.name(id)),
            });
        }
    }
    let rho = cfg.rmsprop_decay;
    for (idx, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = &mut store.get_mut(crate::params::ParamId(idx)).data;
        let s = &mut state.square_avg[idx];
        for j in 0..g.len() {
            s[j] = rho * s[j] + (1.0 - rho) * g[j] * g[j];
            p[j] -= cfg.learning_rate * g[j] / (s[j].sqrt() + cfg.rmsprop_epsilon);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Loss and parameter gradients of one task.
pub fn task_gradients(
    model: &Model,
    store: &ParamStore,
    task: &SeriesFrame,
    plan_seed: u64,
    mode: PermutationMode,
    ctx: &mut Ctx,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let plan = build_permutation(task, mode, model.cfg.scheduler.window, plan_seed)?;
    let mut g = Graph::new();
    let nll = model.nll(&mut g, store, task, &plan, ctx)?;
    g.backward(nll.loss)?;
    let mut grads = vec![None; store.len()];
    for (id, gr) in g.param_grads() {
        grads[id.0] = Some(gr.to_vec());
    }
    Ok((g.value(nll.loss).item(), grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub nll: f64,
}

/// Everything training mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub optimizer: RmsPropState,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(store: ParamStore, seed: u64) -> Self {
        TrainState {
            optimizer: RmsPropState::new(&store),
            store,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LossRecord>,
    pub epoch_means: Vec<f64>,
}

/// Runs `cfg.epochs` epochs starting from `state.epoch`. Window offsets are
/// drawn uniformly over every valid position of `frame`.
pub fn train(
    model: &Model,
    state: &mut TrainState,
    frame: &SeriesFrame,
    window: &WindowTask,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    window.validate()?;
    if window.len() > frame.n_steps {
        return Err(Error::Invalid(format!(
            "training window {} exceeds series length {}",
            window.len(),
            frame.n_steps
        )));
    }
    let max_offset = frame.n_steps - window.len();
    let mut log = Vec::new();
    let mut epoch_means = Vec::new();
    let first = state.epoch;
    for epoch in first..first + cfg.epochs {
        let mut sum = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let jobs: Vec<(usize, u64, u64)> = (0..cfg.batch_size)
                .map(|_| {
                    (
                        state.rng.random_range(0..=max_offset),
                        state.rng.random(),
                        state.rng.random(),
                    )
                })
                .collect();
            let store = &state.store;
            let results = jobs
                .par_iter()
                .map(|&(off, plan_seed, drop_seed)| {
                    let crop = frame.crop(off, window.len())?;
                    let task = make_forecast_task(&crop, window)?.without_unknown();
                    let mut ctx = Ctx::train(ChaCha8Rng::seed_from_u64(drop_seed));
                    task_gradients(model, store, &task, plan_seed, cfg.permutation_mode, &mut ctx)
                })
                .collect::<Vec<Result<_>>>();
            let mut total: Vec<Option<Vec<f64>>> = vec![None; state.store.len()];
            let mut loss = 0.0;
            let scale = 1.0 / cfg.batch_size as f64;
            for (k, r) in results.into_iter().enumerate() {
                let (l, grads) = r.map_err(|e| match e {
                    Error::NonFinite { what, at } => Error::NonFinite {
                        what,
                        at: format!("{at} (epoch {epoch}, batch {batch}, window offset {})", jobs[k].0),
                    },
                    other => other,
                })?;
                loss += l * scale;
                for (slot, g) in total.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale),
                        None => *slot = Some(g.into_iter().map(|v| v * scale).collect()),
                    }
                }
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut total, c);
            }
            rmsprop_step(&mut state.store, &total, &mut state.optimizer, cfg)?;
            log.push(LossRecord { epoch, batch, nll: loss });
            sum += loss;
        }
        let mean = sum / cfg.batches_per_epoch as f64;
        epoch_means.push(mean);
        state.epoch = epoch + 1;
        on_epoch(epoch, mean);
    }
    Ok(TrainReport { log, epoch_means })
}

pub fn write_loss_log(log: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("epoch,batch,nll\n");
    for r in log {
        body += &format!("{},{},{}\n", r.epoch, r.batch, r.nll);
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_scalar(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(vec![v]));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = one_scalar(0.7);
        let mut st = RmsPropState::new(&s);
        rmsprop_step(&mut s, &[Some(vec![0.0])], &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(s.get(crate::params::ParamId(0)).data, vec![0.7]);
    }

    #[test]
    fn hand_computed_step() {
        let mut s = one_scalar(0.0);
        let mut st = RmsPropState::new(&s);
        rmsprop_step(&mut s, &[Some(vec![1.0])], &mut st, &TrainConfig::default()).unwrap();
        // s = 0.9*0 + 0.1*1
        assert!((st.square_avg[0][0] - 0.1).abs() < 1e-15);
        let want = -1e-3 / (0.1f64.sqrt() + 1e-8);
        assert!((s.get(crate::params::ParamId(0)).data[0] - want).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = one_scalar(0.0);
        let mut st = RmsPropState::new(&s);
        let err = rmsprop_step(&mut s, &[Some(vec![f64::NAN])], &mut st, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("p[0]"));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None, Some(vec![12.0])];
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        let after = g.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
