//! Peak-memory accounting and scaling sweeps.
//!
//! Memory is measured as exact counts of attention-score entries and
//! activation scalars on the tape of one likelihood pass, so results do not
//! depend on allocator or hardware.

mod ledger;

use std::path::Path;

use rayon::prelude::*;

pub use ledger::{MemoryLedger, Stage};

use crate::data::{make_forecast_task, random_walk, WindowTask};
use crate::encoder::GlobalEncoderConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{EncoderConfig, Model, ModelConfig, SchedulerConfig};
use crate::params::Ctx;
use crate::scheduler::{PermutationMode, WindowPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Perceiver,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderWindows {
    LocalMidpoint,
    GlobalRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: &'static str,
    pub encoder: EncoderKind,
    pub windows: DecoderWindows,
}

impl VariantSpec {
    pub const PERCEIVER_CDF: VariantSpec = VariantSpec {
        name: "perceiver-CDF",
        encoder: EncoderKind::Perceiver,
        windows: DecoderWindows::LocalMidpoint,
    };
    pub const TACTIS: VariantSpec = VariantSpec {
        name: "TACTiS",
        encoder: EncoderKind::Global,
        windows: DecoderWindows::GlobalRandom,
    };
    pub const TACTIS_PE: VariantSpec = VariantSpec {
        name: "TACTiS-PE",
        encoder: EncoderKind::Perceiver,
        windows: DecoderWindows::GlobalRandom,
    };
    pub const TACTIS_MI: VariantSpec = VariantSpec {
        name: "TACTiS-MI",
        encoder: EncoderKind::Global,
        windows: DecoderWindows::LocalMidpoint,
    };

    pub fn all() -> [VariantSpec; 4] {
        [Self::PERCEIVER_CDF, Self::TACTIS, Self::TACTIS_PE, Self::TACTIS_MI]
    }

    pub fn parse(name: &str) -> Result<VariantSpec> {
        Self::all()
            .into_iter()
            .find(|v| v.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Invalid(format!("unknown variant {name:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    PredLen,
    CondLen,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::PredLen => "pred_len",
            SweepAxis::CondLen => "cond_len",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pred" | "pred_len" => Ok(SweepAxis::PredLen),
            "cond" | "cond_len" => Ok(SweepAxis::CondLen),
            other => Err(Error::Invalid(format!("unknown sweep axis {other:?}"))),
        }
    }
}

pub const DEFAULT_SWEEP: [usize; 5] = [10, 20, 40, 80, 160];

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingConfig {
    /// Model used by perceiver variants; its local window is used by the
    /// midpoint variants.
    pub model: ModelConfig,
    /// Encoder used by the global variants.
    pub global: GlobalEncoderConfig,
    pub n_variables: usize,
    pub base_observed: usize,
    pub base_predicted: usize,
    pub seed: u64,
}

impl ScalingConfig {
    pub fn new(model: ModelConfig, global: GlobalEncoderConfig) -> Self {
        ScalingConfig {
            model,
            global,
            n_variables: 10,
            base_observed: 10,
            base_predicted: 10,
            seed: 0,
        }
    }

    fn variant_model(&self, v: &VariantSpec) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if v.encoder == EncoderKind::Global {
            m.encoder = EncoderConfig::Global(self.global.clone());
        } else if !matches!(m.encoder, EncoderConfig::Perceiver(_)) {
            return Err(Error::Invalid("scaling base model must use the perceiver encoder".into()));
        }
        let local = match m.scheduler.window {
            WindowPolicy::Local(k) => k,
            WindowPolicy::Global => 5,
        };
        m.scheduler = match v.windows {
            DecoderWindows::LocalMidpoint => SchedulerConfig {
                mode: PermutationMode::Midpoint,
                window: WindowPolicy::Local(local),
            },
            DecoderWindows::GlobalRandom => SchedulerConfig {
                mode: PermutationMode::Random,
                window: WindowPolicy::Global,
            },
        };
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub variant: String,
    pub axis: SweepAxis,
    pub value: usize,
    pub ledger: MemoryLedger,
}

/// Ledger of one likelihood pass for a variant with `observed`/`predicted` steps.
pub fn measure(cfg: &ScalingConfig, variant: &VariantSpec, observed: usize, predicted: usize) -> Result<MemoryLedger> {
    let mc = cfg.variant_model(variant)?;
    let (model, store) = Model::new(&mc, cfg.n_variables, cfg.seed)?;
    let window = WindowTask::new(observed, predicted)?;
    let series = random_walk(cfg.n_variables, window.len(), cfg.seed, 0.0)?;
    let task = make_forecast_task(&series, &window)?;
    let plan = model.plan(&task, cfg.seed)?;
    let mut g = Graph::inference();
    model.nll(&mut g, &store, &task, &plan, &mut Ctx::eval())?;
    let mut ledger = g.ledger_with_activations();
    ledger.parameter_scalars = store.scalar_count() as u64;
    Ok(ledger)
}

/// One pass per (variant, sweep value); other dimensions stay at the base.
pub fn run_scaling(
    cfg: &ScalingConfig,
    axis: SweepAxis,
    values: &[usize],
    variants: &[VariantSpec],
) -> Result<Vec<ScalingRow>> {
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("sweep values must be strictly ascending".into()));
    }
    let cells: Vec<(VariantSpec, usize)> = variants
        .iter()
        .flat_map(|v| values.iter().map(move |&x| (*v, x)))
        .collect();
    cells
        .par_iter()
        .map(|(v, x)| {
            let (obs, pred) = match axis {
                SweepAxis::PredLen => (cfg.base_observed, *x),
                SweepAxis::CondLen => (*x, cfg.base_predicted),
            };
            Ok(ScalingRow {
                variant: v.name.to_string(),
                axis,
                value: *x,
                ledger: measure(cfg, v, obs, pred)?,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "variant,axis,value,encoder_cross_scores,encoder_self_scores,decoder_scores,activation_scalars,total";

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.ledger;
        s += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.axis.name(),
            r.value,
            l.encoder_cross_scores,
            l.encoder_self_scores,
            l.decoder_scores,
            l.activation_scalars,
            l.total()
        );
    }
    s
}

pub fn write_scaling_csv(rows: &[ScalingRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scaling_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_scaling_csv(path: impl AsRef<Path>) -> Result<Vec<ScalingRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Csv {
            row: i + 2,
            msg: format!("malformed scaling row {line:?}"),
        };
        if f.len() != 8 {
            return Err(bad());
        }
        let n = |k: usize| f[k].parse::<u64>().map_err(|_| bad());
        let ledger = MemoryLedger {
            encoder_cross_scores: n(3)?,
            encoder_self_scores: n(4)?,
            decoder_scores: n(5)?,
            activation_scalars: n(6)?,
            parameter_scalars: 0,
        };
        if ledger.total() != n(7)? {
            return Err(bad());
        }
        rows.push(ScalingRow {
            variant: f[0].to_string(),
            axis: SweepAxis::parse(f[1])?,
            value: n(2)? as usize,
            ledger,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return Err(Error::Invalid(format!("slope fit needs at least 4 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Invalid("slope fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Slope of total ledger scalars for one variant along one axis.
pub fn fit_slope(rows: &[ScalingRow], variant: &str, axis: SweepAxis) -> Result<f64> {
    let sel: Vec<&ScalingRow> = rows.iter().filter(|r| r.variant == variant && r.axis == axis).collect();
    let xs: Vec<f64> = sel.iter().map(|r| r.value as f64).collect();
    let ys: Vec<f64> = sel.iter().map(|r| r.ledger.total() as f64).collect();
    log_log_slope(&xs, &ys)
}
