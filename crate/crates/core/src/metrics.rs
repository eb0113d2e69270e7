//! Forecast scoring: RMSE of the conditional mean, CRPS, thresholded event
//! accuracy and held-out likelihood.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::copula::ForecastSamples;
use crate::data::SeriesFrame;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::{Ctx, ParamStore};
use crate::scheduler::PermutationPlan;

/// Truth value for every sampled point, matched on (variable, timestamp label).
pub fn truth_for(samples: &ForecastSamples, truth: &SeriesFrame) -> Result<Vec<f64>> {
    let mut by_key: HashMap<(usize, String), Option<f64>> = HashMap::new();
    for p in &truth.points {
        by_key.insert((p.variable, truth.axis.label(p.timestamp)), p.value);
    }
    (0..samples.n_points())
        .map(|k| {
            let key = (samples.variables[k], samples.timestamps[k].clone());
            by_key.get(&key).copied().flatten().ok_or_else(|| {
                Error::Data(format!(
                    "no truth value for variable {} at {}",
                    samples.variables[k], samples.timestamps[k]
                ))
            })
        })
        .collect()
}

fn check_len(samples: &ForecastSamples, truth: &[f64]) -> Result<()> {
    if truth.len() != samples.n_points() {
        return Err(Error::Invalid(format!(
            "{} truth values for {} sampled points",
            truth.len(),
            samples.n_points()
        )));
    }
    if samples.n_draws() == 0 {
        return Err(Error::Invalid("no draws".into()));
    }
    Ok(())
}

/// `sqrt(mean_k (mean_draws x_k - y_k)^2)`.
pub fn rmse_cm(samples: &ForecastSamples, truth: &[f64]) -> Result<f64> {
    check_len(samples, truth)?;
    if truth.is_empty() {
        return Err(Error::Invalid("no points to score".into()));
    }
    let se: f64 = truth
        .iter()
        .enumerate()
        .map(|(k, y)| (samples.mean(k) - y).powi(2))
        .sum();
    Ok((se / truth.len() as f64).sqrt())
}

/// `E|X - y| - E|X - X'| / 2` with the pairwise mean over distinct draws.
pub fn crps_point(draws: &[f64], y: f64) -> Result<f64> {
    let m = draws.len();
    if m < 2 {
        return Err(Error::Invalid(format!("CRPS needs at least 2 draws, got {m}")));
    }
    // deviations from y keep a point mass on the truth at exactly zero
    let mut s: Vec<f64> = draws.iter().map(|x| x - y).collect();
    let abs_err = s.iter().map(|d| d.abs()).sum::<f64>() / m as f64;
    s.sort_by(f64::total_cmp);
    // Σ_{i<j} (s_j - s_i) = Σ_k s_k (2k - m + 1)
    let pair_sum: f64 = s
        .iter()
        .enumerate()
        .map(|(k, v)| v * (2.0 * k as f64 - m as f64 + 1.0))
        .sum();
    let spread = 2.0 * pair_sum / (m * (m - 1)) as f64;
    Ok((abs_err - 0.5 * spread).max(0.0))
}

/// Per-variable scale: mean absolute truth, or 1 when that is zero.
fn variable_scales(samples: &ForecastSamples, truth: &[f64]) -> HashMap<usize, f64> {
    let mut acc: HashMap<usize, (f64, usize)> = HashMap::new();
    for (k, y) in truth.iter().enumerate() {
        let e = acc.entry(samples.variables[k]).or_default();
        e.0 += y.abs();
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(v, (s, n))| {
            let m = s / n as f64;
            (v, if m > 0.0 { m } else { 1.0 })
        })
        .collect()
}

/// Mean over points of CRPS divided by its variable's mean absolute truth.
pub fn crps(samples: &ForecastSamples, truth: &[f64]) -> Result<f64> {
    check_len(samples, truth)?;
    if truth.is_empty() {
        return Err(Error::Invalid("no points to score".into()));
    }
    let scales = variable_scales(samples, truth);
    let mut total = 0.0;
    for (k, &y) in truth.iter().enumerate() {
        total += crps_point(&samples.draws(k), y)? / scales[&samples.variables[k]];
    }
    Ok(total / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparator {
    Gt,
    Ge,
    Lt,
    Le,
}

impl Comparator {
    pub fn holds(&self, x: f64, t: f64) -> bool {
        match self {
            Comparator::Gt => x > t,
            Comparator::Ge => x >= t,
            Comparator::Lt => x < t,
            Comparator::Le => x <= t,
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
        }
    }
}

/// An event such as "variable 0 exceeds 700".
#[derive(Clone, Debug, PartialEq)]
pub struct EventRule {
    pub name: String,
    pub variable: usize,
    pub comparator: Comparator,
    pub threshold: f64,
}

impl EventRule {
    /// Parses `[name=]<variable><op><threshold>` with op one of `> >= < <=`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("cannot parse event rule {text:?}; expected e.g. high=0>700"));
        let (name, body) = match text.split_once('=') {
            Some((n, b)) if !n.contains(['<', '>']) => (n.trim().to_string(), b.trim()),
            _ => (text.trim().to_string(), text.trim()),
        };
        let pos = body.find(['<', '>']).ok_or_else(bad)?;
        let variable = body[..pos].trim().parse().map_err(|_| bad())?;
        let rest = &body[pos..];
        let (comparator, skip) = if rest.starts_with(">=") {
            (Comparator::Ge, 2)
        } else if rest.starts_with("<=") {
            (Comparator::Le, 2)
        } else if rest.starts_with('>') {
            (Comparator::Gt, 1)
        } else {
            (Comparator::Lt, 1)
        };
        let threshold = rest[skip..].trim().parse().map_err(|_| bad())?;
        Ok(EventRule {
            name,
            variable,
            comparator,
            threshold,
        })
    }

    pub fn describe(&self) -> String {
        format!("{}{}{}", self.variable, self.comparator.symbol(), self.threshold)
    }
}

/// Fraction of the rule variable's points where the majority vote over draws
/// matches the true event. Ties count as an event.
pub fn event_accuracy(samples: &ForecastSamples, rule: &EventRule, truth: &[f64]) -> Result<f64> {
    check_len(samples, truth)?;
    let points: Vec<usize> = (0..samples.n_points())
        .filter(|&k| samples.variables[k] == rule.variable)
        .collect();
    if points.is_empty() {
        return Err(Error::Invalid(format!("rule variable {} has no forecast points", rule.variable)));
    }
    let mut correct = 0;
    for &k in &points {
        let votes = samples
            .values
            .iter()
            .filter(|row| rule.comparator.holds(row[k], rule.threshold))
            .count();
        let predicted = 2 * votes >= samples.n_draws();
        if predicted == rule.comparator.holds(truth[k], rule.threshold) {
            correct += 1;
        }
    }
    Ok(correct as f64 / points.len() as f64)
}

/// Per-point joint negative log-likelihood, through the training code path.
pub fn eval_nll(model: &Model, store: &ParamStore, task: &SeriesFrame, plan: &PermutationPlan) -> Result<f64> {
    let mut g = Graph::inference();
    let nll = model.nll(&mut g, store, task, plan, &mut Ctx::eval())?;
    Ok(g.value(nll.loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariableScores {
    pub variable: usize,
    pub points: usize,
    pub rmse_cm: f64,
    pub crps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Present only when a model was available to score the likelihood.
    pub nll: Option<f64>,
    pub rmse_cm: f64,
    pub crps: f64,
    pub per_variable: Vec<VariableScores>,
    pub n_samples: usize,
    pub events: Vec<(EventRule, f64)>,
}

impl EvalReport {
    pub fn compute(samples: &ForecastSamples, truth: &[f64], rules: &[EventRule], nll: Option<f64>) -> Result<Self> {
        let mut vars: Vec<usize> = samples.variables.clone();
        vars.sort_unstable();
        vars.dedup();
        let mut per_variable = Vec::with_capacity(vars.len());
        for v in vars {
            let ks: Vec<usize> = (0..samples.n_points()).filter(|&k| samples.variables[k] == v).collect();
            let sub = ForecastSamples {
                point_ids: Vec::new(),
                variables: ks.iter().map(|&k| samples.variables[k]).collect(),
                steps: Vec::new(),
                timestamps: ks.iter().map(|&k| samples.timestamps[k].clone()).collect(),
                values: samples.values.iter().map(|row| ks.iter().map(|&k| row[k]).collect()).collect(),
            };
            let t: Vec<f64> = ks.iter().map(|&k| truth[k]).collect();
            per_variable.push(VariableScores {
                variable: v,
                points: ks.len(),
                rmse_cm: rmse_cm(&sub, &t)?,
                crps: crps(&sub, &t)?,
            });
        }
        let events = rules
            .iter()
            .map(|r| Ok((r.clone(), event_accuracy(samples, r, truth)?)))
            .collect::<Result<Vec<_>>>()?;
        let report = EvalReport {
            nll,
            rmse_cm: rmse_cm(samples, truth)?,
            crps: crps(samples, truth)?,
            per_variable,
            n_samples: samples.n_draws(),
            events,
        };
        let finite = report.rmse_cm.is_finite() && report.crps.is_finite() && report.nll.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite {
                what: "evaluation metric".into(),
                at: "report".into(),
            });
        }
        Ok(report)
    }

    /// Rows `metric,scope,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,scope,value\n");
        if let Some(n) = self.nll {
            let _ = writeln!(s, "nll,all,{n}");
        }
        let _ = writeln!(s, "rmse_cm,all,{}", self.rmse_cm);
        let _ = writeln!(s, "crps,all,{}", self.crps);
        let _ = writeln!(s, "n_samples,all,{}", self.n_samples);
        for v in &self.per_variable {
            let _ = writeln!(s, "rmse_cm,variable_{},{}", v.variable, v.rmse_cm);
            let _ = writeln!(s, "crps,variable_{},{}", v.variable, v.crps);
        }
        for (r, acc) in &self.events {
            let _ = writeln!(s, "event_accuracy,{},{}", r.name, acc);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24}{:>14}", "metric", "value");
        if let Some(n) = self.nll {
            let _ = writeln!(s, "{:<24}{:>14.6}", "nll", n);
        }
        let _ = writeln!(s, "{:<24}{:>14.6}", "rmse_cm", self.rmse_cm);
        let _ = writeln!(s, "{:<24}{:>14.6}", "crps", self.crps);
        let _ = writeln!(s, "{:<24}{:>14}", "draws", self.n_samples);
        for (r, acc) in &self.events {
            let _ = writeln!(s, "{:<24}{:>14.4}", format!("event {} ({})", r.name, r.describe()), acc);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10}{:>8}{:>14}{:>14}", "variable", "points", "rmse_cm", "crps");
        for v in &self.per_variable {
            let _ = writeln!(s, "{:<10}{:>8}{:>14.6}{:>14.6}", v.variable, v.points, v.rmse_cm, v.crps);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
