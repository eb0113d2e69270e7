use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Draws for every missing point, in original series units.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSamples {
    /// Point ids in the sampled frame; empty when read back from CSV.
    pub point_ids: Vec<usize>,
    pub variables: Vec<usize>,
    pub steps: Vec<usize>,
    pub timestamps: Vec<String>,
    /// `values[draw][point]`.
    pub values: Vec<Vec<f64>>,
}

impl ForecastSamples {
    pub fn n_draws(&self) -> usize {
        self.values.len()
    }

    pub fn n_points(&self) -> usize {
        self.variables.len()
    }

    /// All draws of point `k`.
    pub fn draws(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[k]).collect()
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.values.iter().map(|row| row[k]).sum::<f64>() / self.n_draws() as f64
    }

    /// Empirical quantile with linear interpolation between order statistics.
    pub fn quantile(&self, k: usize, q: f64) -> f64 {
        let mut v = self.draws(k);
        v.sort_by(f64::total_cmp);
        let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }

    /// Columns `draw,variable_index,timestamp,value`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = String::from("draw,variable_index,timestamp,value\n");
        for (d, row) in self.values.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                body += &format!("{d},{},{},{v}\n", self.variables[k], self.timestamps[k]);
            }
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut index: HashMap<(usize, String), usize> = HashMap::new();
        let mut variables = Vec::new();
        let mut timestamps = Vec::new();
        let mut values: Vec<Vec<(usize, f64)>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let row = line + 2;
            let rec = rec.map_err(|e| Error::Csv { row, msg: e.to_string() })?;
            if rec.len() != 4 {
                return Err(Error::Csv {
                    row,
                    msg: format!("expected 4 fields, found {}", rec.len()),
                });
            }
            let num = |i: usize| -> Result<f64> {
                rec[i].trim().parse::<f64>().map_err(|_| Error::Csv {
                    row,
                    msg: format!("unparseable number {:?}", &rec[i]),
                })
            };
            let draw = num(0)? as usize;
            let var = num(1)? as usize;
            let key = (var, rec[2].trim().to_string());
            let k = *index.entry(key.clone()).or_insert_with(|| {
                variables.push(var);
                timestamps.push(key.1.clone());
                variables.len() - 1
            });
            if values.len() <= draw {
                values.resize_with(draw + 1, Vec::new);
            }
            values[draw].push((k, num(3)?));
        }
        let n = variables.len();
        let mut dense = Vec::with_capacity(values.len());
        for (d, row) in values.into_iter().enumerate() {
            let mut out = vec![f64::NAN; n];
            for (k, v) in row {
                out[k] = v;
            }
            if out.iter().any(|v| v.is_nan()) {
                return Err(Error::Data(format!("{}: draw {d} does not cover every point", path.display())));
            }
            dense.push(out);
        }
        if dense.is_empty() {
            return Err(Error::Data(format!("{}: no samples", path.display())));
        }
        Ok(ForecastSamples {
            point_ids: Vec::new(),
            variables,
            steps: Vec::new(),
            timestamps,
            values: dense,
        })
    }
}
