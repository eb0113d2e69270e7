//! Output variance testing during sequential sampling.
//!
//! A point whose probe draws vary far more than its variable's history is
//! reported but kept out of every later conditioning window.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GuardConfig {
    pub enabled: bool,
    pub probe_draws: usize,
    pub threshold_multiplier: f64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            enabled: true,
            probe_draws: 16,
            threshold_multiplier: 4.0,
        }
    }
}

impl GuardConfig {
    pub fn disabled() -> Self {
        GuardConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probe_draws < 2 {
            return Err(Error::Invalid(format!("probe_draws {} must be at least 2", self.probe_draws)));
        }
        if !(self.threshold_multiplier > 0.0) {
            return Err(Error::Invalid("threshold_multiplier must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GuardDecision {
    Accept(f64),
    /// Carries the probe mean, which is what gets reported for the point.
    Mask(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuardOutcome {
    pub decision: GuardDecision,
    pub variance: f64,
}

/// Draws `probe_draws` values from `sampler`; masks when their sample variance
/// exceeds `threshold_multiplier * tau`, otherwise accepts the first draw.
pub fn guard_point<F>(mut sampler: F, tau: f64, cfg: &GuardConfig) -> Result<GuardOutcome>
where
    F: FnMut() -> Result<f64>,
{
    let draws = (0..cfg.probe_draws).map(|_| sampler()).collect::<Result<Vec<f64>>>()?;
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let variance = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let decision = if variance > cfg.threshold_multiplier * tau {
        GuardDecision::Mask(mean)
    } else {
        GuardDecision::Accept(draws[0])
    };
    Ok(GuardOutcome { decision, variance })
}

/// One guard evaluation during sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct GuardRecord {
    pub draw: usize,
    pub point: usize,
    pub tau: f64,
    pub variance: f64,
    pub masked: bool,
}

pub fn write_guard_csv(records: &[GuardRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut body = String::from("draw,point_id,tau,probe_variance,decision\n");
    for r in records {
        body += &format!(
            "{},{},{},{},{}\n",
            r.draw,
            r.point,
            r.tau,
            r.variance,
            if r.masked { "mask" } else { "accept" }
        );
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
