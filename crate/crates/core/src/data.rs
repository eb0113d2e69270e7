//! Series ingestion, synthetic generators and forecast-window construction.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use chrono::{Datelike, Months, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One observation quadruple. `value` is `None` when the source had no data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePoint {
    pub value: Option<f64>,
    pub variable: usize,
    pub timestamp: usize,
    /// `true` when observed, `false` when the point is to be inferred.
    pub mask: bool,
}

impl TimePoint {
    pub fn observed(variable: usize, timestamp: usize, value: f64) -> Self {
        TimePoint {
            value: Some(value),
            variable,
            timestamp,
            mask: true,
        }
    }

    pub fn is_missing(&self) -> bool {
        !self.mask
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization { mean: 0.0, std: 1.0 }
    }
}

impl Standardization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Mapping between integer steps and the labels found in the source file.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeAxis {
    Integer { start: i64, step: i64 },
    DateTime { start: NaiveDateTime, step_secs: i64, date_only: bool },
    Monthly { start: NaiveDate },
}

impl Default for TimeAxis {
    fn default() -> Self {
        TimeAxis::Integer { start: 0, step: 1 }
    }
}

impl TimeAxis {
    pub fn label(&self, step: usize) -> String {
        match self {
            TimeAxis::Integer { start, step: dt } => (start + dt * step as i64).to_string(),
            TimeAxis::DateTime {
                start,
                step_secs,
                date_only,
            } => {
                let t = *start + chrono::Duration::seconds(step_secs * step as i64);
                if *date_only {
                    t.format("%Y-%m-%d").to_string()
                } else {
                    t.format("%Y-%m-%d %H:%M:%S").to_string()
                }
            }
            TimeAxis::Monthly { start } => (*start + Months::new(step as u32)).format("%Y-%m-%d").to_string(),
        }
    }

    /// Inverse of [`TimeAxis::label`]; fails for labels off the grid.
    pub fn step_of(&self, label: &str) -> Result<usize> {
        let off = || Error::Data(format!("timestamp {label:?} is not on the sampling grid"));
        match self {
            TimeAxis::Integer { start, step } => {
                let v: i64 = label.trim().parse().map_err(|_| off())?;
                let d = v - start;
                if d < 0 || d % step != 0 {
                    return Err(off());
                }
                Ok((d / step) as usize)
            }
            TimeAxis::DateTime { start, step_secs, .. } => {
                let t = parse_datetime(label).ok_or_else(off)?;
                let d = (t - *start).num_seconds();
                if d < 0 || d % step_secs != 0 {
                    return Err(off());
                }
                Ok((d / step_secs) as usize)
            }
            TimeAxis::Monthly { start } => {
                let t = parse_datetime(label).ok_or_else(off)?.date();
                let months = (t.year() - start.year()) * 12 + t.month() as i32 - start.month() as i32;
                if months < 0 || t.day() != start.day() {
                    return Err(off());
                }
                Ok(months as usize)
            }
        }
    }

    /// The same axis re-based so that old step `offset` becomes step 0.
    pub fn shifted(&self, offset: usize) -> TimeAxis {
        match self {
            TimeAxis::Integer { start, step } => TimeAxis::Integer {
                start: start + step * offset as i64,
                step: *step,
            },
            TimeAxis::DateTime {
                start,
                step_secs,
                date_only,
            } => TimeAxis::DateTime {
                start: *start + chrono::Duration::seconds(step_secs * offset as i64),
                step_secs: *step_secs,
                date_only: *date_only,
            },
            TimeAxis::Monthly { start } => TimeAxis::Monthly {
                start: *start + Months::new(offset as u32),
            },
        }
    }
}

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d", "%m/%d/%Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return d.and_hms_opt(0, 0, 0);
        }
    }
    None
}

/// A multivariate series as a flat list of points plus per-variable scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    pub n_variables: usize,
    pub n_steps: usize,
    pub points: Vec<TimePoint>,
    pub stats: Vec<Standardization>,
    pub series_ids: Vec<String>,
    pub axis: TimeAxis,
}

impl SeriesFrame {
    /// Validates the points and computes standardization from observed values.
    pub fn new(n_variables: usize, n_steps: usize, points: Vec<TimePoint>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &points {
            if p.variable >= n_variables || p.timestamp >= n_steps {
                return Err(Error::Data(format!(
                    "point (variable {}, step {}) outside {n_variables}x{n_steps} frame",
                    p.variable, p.timestamp
                )));
            }
            if !seen.insert((p.variable, p.timestamp)) {
                return Err(Error::Data(format!(
                    "duplicate point (variable {}, step {})",
                    p.variable, p.timestamp
                )));
            }
            if p.mask && p.value.is_none() {
                return Err(Error::Data(format!(
                    "observed point (variable {}, step {}) has no value",
                    p.variable, p.timestamp
                )));
            }
        }
        let mut frame = SeriesFrame {
            n_variables,
            n_steps,
            points,
            stats: vec![Standardization::default(); n_variables],
            series_ids: (0..n_variables).map(|i| format!("s{i}")).collect(),
            axis: TimeAxis::default(),
        };
        frame.stats = frame.compute_stats(0..n_steps);
        Ok(frame)
    }

    /// Per-variable z-score parameters from observed points with steps in `range`.
    pub fn compute_stats(&self, range: std::ops::Range<usize>) -> Vec<Standardization> {
        let mut vals = vec![Vec::new(); self.n_variables];
        for p in &self.points {
            if p.mask && range.contains(&p.timestamp) {
                vals[p.variable].push(p.value.unwrap());
            }
        }
        vals.iter()
            .map(|v| {
                if v.is_empty() {
                    return Standardization::default();
                }
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                if v.len() < 2 {
                    return Standardization { mean, std: 1.0 };
                }
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                Standardization { mean, std }
            })
            .collect()
    }

    pub fn standardized(&self, p: &TimePoint) -> Option<f64> {
        p.value.map(|v| self.stats[p.variable].apply(v))
    }

    pub fn observed_count(&self) -> usize {
        self.points.iter().filter(|p| p.mask).count()
    }

    pub fn missing_ids(&self) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| !self.points[i].mask).collect()
    }

    pub fn observed_ids(&self) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| self.points[i].mask).collect()
    }

    /// Point ids of each variable, sorted by timestamp.
    pub fn by_variable(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_variables];
        for (i, p) in self.points.iter().enumerate() {
            out[p.variable].push(i);
        }
        for ids in &mut out {
            ids.sort_by_key(|&i| self.points[i].timestamp);
        }
        out
    }

    pub fn lookup(&self) -> HashMap<(usize, usize), usize> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p.variable, p.timestamp), i))
            .collect()
    }

    /// Sample variance of each variable's observed values in standardized units.
    pub fn standardized_variance(&self) -> Vec<f64> {
        let mut vals = vec![Vec::new(); self.n_variables];
        for p in self.points.iter().filter(|p| p.mask) {
            vals[p.variable].push(self.standardized(p).unwrap());
        }
        vals.iter()
            .map(|v| {
                if v.len() < 2 {
                    return 1.0;
                }
                let n = v.len() as f64;
                let m = v.iter().sum::<f64>() / n;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
            })
            .collect()
    }

    /// Steps `offset..offset+len`, re-indexed to start at zero.
    pub fn crop(&self, offset: usize, len: usize) -> Result<SeriesFrame> {
        if offset + len > self.n_steps || len == 0 {
            return Err(Error::Invalid(format!(
                "crop {offset}+{len} outside {} steps",
                self.n_steps
            )));
        }
        let points = self
            .points
            .iter()
            .filter(|p| p.timestamp >= offset && p.timestamp < offset + len)
            .map(|p| TimePoint {
                timestamp: p.timestamp - offset,
                ..*p
            })
            .collect();
        let mut f = SeriesFrame::new(self.n_variables, len, points)?;
        f.series_ids = self.series_ids.clone();
        f.axis = self.axis.shifted(offset);
        Ok(f)
    }

    /// Drops to-be-inferred points that carry no value (nothing to score).
    pub fn without_unknown(&self) -> SeriesFrame {
        let mut f = self.clone();
        f.points.retain(|p| p.mask || p.value.is_some());
        f
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Long-format rows `series_id,timestamp,value`, sorted by series then time.
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let fail = |e: csv::Error| Error::Data(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["series_id", "timestamp", "value"]).map_err(fail)?;
        let mut order: Vec<&TimePoint> = self.points.iter().collect();
        order.sort_by_key(|p| (p.variable, p.timestamp));
        for p in order {
            let v = p.value.filter(|_| p.mask).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([self.series_ids[p.variable].as_str(), &self.axis.label(p.timestamp), &v])
                .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Column names of a long-format series file.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub series: String,
    pub timestamp: String,
    pub value: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            series: "series_id".into(),
            timestamp: "timestamp".into(),
            value: "value".into(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let (cs, ct, cv) = (col(&schema.series)?, col(&schema.timestamp)?, col(&schema.value)?);

    let mut rows: Vec<(String, String, Option<f64>, usize)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Csv {
            row: line,
            msg: e.to_string(),
        })?;
        let get = |c: usize| rec.get(c).unwrap_or("").to_string();
        let raw = get(cv);
        let value = if raw.is_empty() {
            None
        } else {
            Some(raw.parse::<f64>().map_err(|_| Error::Csv {
                row: line,
                msg: format!("non-numeric value {raw:?}"),
            })?)
        };
        rows.push((get(cs), get(ct), value, line));
    }
    let labels: Vec<&str> = rows.iter().map(|r| r.1.as_str()).collect();
    let (axis, steps) = infer_axis(&labels)?;
    let n_steps = steps.iter().max().map_or(0, |m| m + 1);

    let mut series_ids: Vec<String> = Vec::new();
    let mut series_index: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), (Option<f64>, usize)> = HashMap::new();
    for ((sid, _, value, line), &step) in rows.iter().zip(&steps) {
        let var = *series_index.entry(sid.clone()).or_insert_with(|| {
            series_ids.push(sid.clone());
            series_ids.len() - 1
        });
        if let Some((_, first)) = cells.insert((var, step), (*value, *line)) {
            return Err(Error::Csv {
                row: *line,
                msg: format!(
                    "duplicate (series {sid:?}, timestamp {:?}); first seen on row {first}",
                    axis.label(step)
                ),
            });
        }
    }
    let n_vars = series_ids.len();
    let mut points = Vec::with_capacity(n_vars * n_steps);
    for var in 0..n_vars {
        for t in 0..n_steps {
            let value = cells.get(&(var, t)).and_then(|c| c.0);
            points.push(TimePoint {
                value,
                variable: var,
                timestamp: t,
                mask: value.is_some(),
            });
        }
    }
    let mut frame = SeriesFrame::new(n_vars, n_steps, points)?;
    frame.series_ids = series_ids;
    frame.axis = axis;
    Ok(frame)
}

fn infer_axis(labels: &[&str]) -> Result<(TimeAxis, Vec<usize>)> {
    if labels.is_empty() {
        return Ok((TimeAxis::default(), Vec::new()));
    }
    let irregular = || Error::Data("timestamps are not on a constant sampling interval".into());
    if let Ok(ints) = labels.iter().map(|s| s.trim().parse::<i64>()).collect::<std::result::Result<Vec<_>, _>>() {
        let distinct: BTreeSet<i64> = ints.iter().copied().collect();
        let start = *distinct.iter().next().unwrap();
        let step = distinct
            .iter()
            .zip(distinct.iter().skip(1))
            .map(|(a, b)| b - a)
            .min()
            .unwrap_or(1);
        if distinct.iter().any(|v| (v - start) % step != 0) {
            return Err(irregular());
        }
        let steps = ints.iter().map(|v| ((v - start) / step) as usize).collect();
        return Ok((TimeAxis::Integer { start, step }, steps));
    }
    let mut times = Vec::with_capacity(labels.len());
    for (i, s) in labels.iter().enumerate() {
        times.push(parse_datetime(s).ok_or_else(|| Error::Csv {
            row: i + 2,
            msg: format!("unparseable timestamp {s:?}"),
        })?);
    }
    let distinct: BTreeSet<NaiveDateTime> = times.iter().copied().collect();
    let start = *distinct.iter().next().unwrap();
    let date_only = distinct.iter().all(|t| t.time() == chrono::NaiveTime::MIN);
    let secs: Vec<i64> = distinct.iter().map(|t| (*t - start).num_seconds()).collect();
    let step = secs.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(86_400);
    if secs.iter().all(|s| s % step == 0) {
        let axis = TimeAxis::DateTime {
            start,
            step_secs: step,
            date_only,
        };
        let steps = times.iter().map(|t| ((*t - start).num_seconds() / step) as usize).collect();
        return Ok((axis, steps));
    }
    // Calendar months are not a constant number of seconds.
    let axis = TimeAxis::Monthly { start: start.date() };
    let steps = labels
        .iter()
        .map(|l| axis.step_of(l).map_err(|_| irregular()))
        .collect::<Result<Vec<_>>>()?;
    Ok((axis, steps))
}

/// Gaussian random walks starting at zero; each point masked with probability `missing_rate`.
pub fn random_walk(n_variables: usize, n_steps: usize, seed: u64, missing_rate: f64) -> Result<SeriesFrame> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Invalid(format!("missing rate {missing_rate} not in [0,1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_variables * n_steps);
    for c in 0..n_variables {
        let mut x = 0.0;
        for t in 0..n_steps {
            if t > 0 {
                let eps: f64 = rng.sample(StandardNormal);
                x += eps;
            }
            points.push(TimePoint::observed(c, t, x));
        }
    }
    if missing_rate > 0.0 {
        for p in &mut points {
            p.mask = rng.random::<f64>() >= missing_rate;
        }
    }
    SeriesFrame::new(n_variables, n_steps, points)
}

/// Noisy sinusoids with a random phase per variable.
pub fn sinusoid(n_variables: usize, n_steps: usize, period: f64, noise: f64, seed: u64) -> Result<SeriesFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_variables * n_steps);
    for c in 0..n_variables {
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        for t in 0..n_steps {
            let eps: f64 = rng.sample(StandardNormal);
            let v = (std::f64::consts::TAU * t as f64 / period + phase).sin() + noise * eps;
            points.push(TimePoint::observed(c, t, v));
        }
    }
    SeriesFrame::new(n_variables, n_steps, points)
}

/// Conditioning length `observed_steps`, horizon `predict_steps`, evaluation stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowTask {
    pub observed_steps: usize,
    pub predict_steps: usize,
    pub stride: usize,
}

impl WindowTask {
    pub fn new(observed_steps: usize, predict_steps: usize) -> Result<Self> {
        let w = WindowTask {
            observed_steps,
            predict_steps,
            stride: predict_steps.max(1),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed_steps == 0 || self.predict_steps == 0 || self.stride == 0 {
            return Err(Error::Invalid(format!(
                "window needs H >= 1, S >= 1 and stride >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observed_steps + self.predict_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Crops the last `H + S` steps and re-masks the final `S` as to-be-inferred.
/// Standardization comes from observed points of the first `H` steps only.
pub fn make_forecast_task(frame: &SeriesFrame, window: &WindowTask) -> Result<SeriesFrame> {
    window.validate()?;
    if window.len() > frame.n_steps {
        return Err(Error::Invalid(format!(
            "window {}+{} exceeds {} steps",
            window.observed_steps, window.predict_steps, frame.n_steps
        )));
    }
    let mut f = frame.crop(frame.n_steps - window.len(), window.len())?;
    for p in &mut f.points {
        if p.timestamp >= window.observed_steps {
            p.mask = false;
        }
    }
    f.stats = f.compute_stats(0..window.observed_steps);
    Ok(f)
}

/// Conditions on the last `H` steps and appends `S` unknown steps after them.
pub fn forecast_beyond(frame: &SeriesFrame, window: &WindowTask) -> Result<SeriesFrame> {
    window.validate()?;
    if window.observed_steps > frame.n_steps {
        return Err(Error::Invalid(format!(
            "conditioning length {} exceeds {} steps",
            window.observed_steps, frame.n_steps
        )));
    }
    let h = window.observed_steps;
    let mut f = frame.crop(frame.n_steps - h, h)?;
    f.n_steps = window.len();
    for v in 0..f.n_variables {
        for t in h..window.len() {
            f.points.push(TimePoint {
                value: None,
                variable: v,
                timestamp: t,
                mask: false,
            });
        }
    }
    Ok(f)
}
