//! Inference orderings and conditioning windows.
//!
//! Observed points always come first. Missing points are then ordered either
//! by midpoint depth (recursive bisection of every gap, shallow first), by a
//! uniform shuffle, or by midpoint depth constrained so that each newly
//! inferred point lies within `k_max` steps of something already known.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SeriesFrame;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PermutationMode {
    Midpoint,
    Random,
    MidpointMaxInterval(usize),
}

impl PermutationMode {
    pub fn parse(s: &str, k_max: usize) -> Result<Self> {
        match s {
            "midpoint" => Ok(PermutationMode::Midpoint),
            "random" => Ok(PermutationMode::Random),
            "midpoint_max_interval" => Ok(PermutationMode::MidpointMaxInterval(k_max)),
            other => Err(Error::Invalid(format!("unknown permutation mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PermutationMode::Midpoint => "midpoint",
            PermutationMode::Random => "random",
            PermutationMode::MidpointMaxInterval(_) => "midpoint_max_interval",
        }
    }

    /// Plain midpoint for short horizons, bounded interval beyond 64 steps.
    pub fn default_for_horizon(predict_steps: usize) -> Self {
        if predict_steps > 64 {
            PermutationMode::MidpointMaxInterval(3)
        } else {
            PermutationMode::Midpoint
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowPolicy {
    /// Every preceding point.
    Global,
    /// `k` nearest preceding points per variable on each side in time.
    Local(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationPlan {
    pub order: Vec<usize>,
    /// Rank of each point id in `order`.
    pub position: Vec<usize>,
    /// `-1` for observed points.
    pub depth: Vec<i64>,
    /// Conditioning ids per point; empty for observed points.
    pub windows: Vec<Vec<usize>>,
    pub mode: PermutationMode,
    pub policy: WindowPolicy,
    pub n_observed: usize,
    by_variable: Vec<Vec<usize>>,
    timestamps: Vec<usize>,
    variables: Vec<usize>,
}

/// Midpoint depth of every point: observed `-1`, each gap's midpoint `0`,
/// midpoints of the two halves `1`, and so on.
pub fn assign_depths(frame: &SeriesFrame) -> Vec<i64> {
    let mut depth = vec![-1; frame.points.len()];
    for ids in frame.by_variable() {
        let mut i = 0;
        while i < ids.len() {
            if frame.points[ids[i]].mask {
                i += 1;
                continue;
            }
            let start = i;
            while i < ids.len() && !frame.points[ids[i]].mask {
                i += 1;
            }
            bisect(&ids[start..i], 0, &mut depth);
        }
    }
    depth
}

fn bisect(run: &[usize], d: i64, depth: &mut [i64]) {
    if run.is_empty() {
        return;
    }
    let mid = (run.len() - 1) / 2;
    depth[run[mid]] = d;
    bisect(&run[..mid], d + 1, depth);
    bisect(&run[mid + 1..], d + 1, depth);
}

pub fn build_permutation(
    frame: &SeriesFrame,
    mode: PermutationMode,
    policy: WindowPolicy,
    seed: u64,
) -> Result<PermutationPlan> {
    if let WindowPolicy::Local(0) = policy {
        return Err(Error::Invalid("local window needs k >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = assign_depths(frame);
    let observed = frame.observed_ids();
    let mut missing = frame.missing_ids();
    match mode {
        PermutationMode::Random => missing.shuffle(&mut rng),
        PermutationMode::Midpoint | PermutationMode::MidpointMaxInterval(_) => {
            missing = depth_order(&missing, &depth, &mut rng);
        }
    }
    if let PermutationMode::MidpointMaxInterval(k_max) = mode {
        missing = bounded_interval_order(frame, &missing, k_max);
    }
    let n_observed = observed.len();
    let mut order = observed;
    order.extend(missing);
    let mut position = vec![usize::MAX; frame.points.len()];
    for (r, &id) in order.iter().enumerate() {
        position[id] = r;
    }
    let mut plan = PermutationPlan {
        order,
        position,
        depth,
        windows: vec![Vec::new(); frame.points.len()],
        mode,
        policy,
        n_observed,
        by_variable: frame.by_variable(),
        timestamps: frame.points.iter().map(|p| p.timestamp).collect(),
        variables: frame.points.iter().map(|p| p.variable).collect(),
    };
    let none = HashSet::new();
    let windows: Vec<(usize, Vec<usize>)> = plan
        .missing_order()
        .iter()
        .map(|&i| (i, plan.window_excluding(i, &none)))
        .collect();
    for (i, w) in windows {
        plan.windows[i] = w;
    }
    Ok(plan)
}

fn depth_order(missing: &[usize], depth: &[i64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let max_depth = missing.iter().map(|&i| depth[i]).max().unwrap_or(-1);
    let mut out = Vec::with_capacity(missing.len());
    for d in 0..=max_depth {
        let mut level: Vec<usize> = missing.iter().copied().filter(|&i| depth[i] == d).collect();
        level.shuffle(rng);
        out.extend(level);
    }
    out
}

/// Reorders `priority` so each chosen point is within `k_max` steps of an
/// already-known point of its variable, taking the highest-priority eligible
/// point each time. Variables with nothing known fall back to priority order.
fn bounded_interval_order(frame: &SeriesFrame, priority: &[usize], k_max: usize) -> Vec<usize> {
    let mut known: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); frame.n_variables];
    for p in frame.points.iter().filter(|p| p.mask) {
        known[p.variable].insert(p.timestamp);
    }
    let near = |known: &BTreeSet<usize>, t: usize| {
        let below = known.range(..=t).next_back().map(|&s| t - s);
        let above = known.range(t..).next().map(|&s| s - t);
        match (below, above) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    };
    let mut remaining: Vec<usize> = priority.to_vec();
    let mut out = Vec::with_capacity(priority.len());
    while !remaining.is_empty() {
        let pick = remaining
            .iter()
            .position(|&i| {
                let p = &frame.points[i];
                near(&known[p.variable], p.timestamp).is_some_and(|d| d <= k_max)
            })
            .unwrap_or(0);
        let id = remaining.remove(pick);
        let p = &frame.points[id];
        known[p.variable].insert(p.timestamp);
        out.push(id);
    }
    out
}

impl PermutationPlan {
    pub fn missing_order(&self) -> &[usize] {
        &self.order[self.n_observed..]
    }

    pub fn precedes(&self, a: usize, b: usize) -> bool {
        self.position[a] < self.position[b]
    }

    /// Conditioning set for `i`, skipping ids in `excluded`.
    pub fn window_excluding(&self, i: usize, excluded: &HashSet<usize>) -> Vec<usize> {
        match self.policy {
            WindowPolicy::Global => self.order[..self.position[i]]
                .iter()
                .copied()
                .filter(|j| !excluded.contains(j))
                .collect(),
            WindowPolicy::Local(k) => self.local_window(i, k, excluded),
        }
    }

    /// Per variable, the `k` nearest predecessors at or before `t_i` and the `k`
    /// nearest after it. Equal timestamps count as the past side.
    pub fn local_window(&self, i: usize, k: usize, excluded: &HashSet<usize>) -> Vec<usize> {
        let t = self.timestamps[i];
        let rank = self.position[i];
        let eligible = |j: usize| j != i && self.position[j] < rank && !excluded.contains(&j);
        let mut out = Vec::new();
        for ids in &self.by_variable {
            let split = ids.partition_point(|&j| self.timestamps[j] <= t);
            let mut taken = 0;
            for &j in ids[..split].iter().rev() {
                if taken == k {
                    break;
                }
                if eligible(j) {
                    out.push(j);
                    taken += 1;
                }
            }
            taken = 0;
            for &j in &ids[split..] {
                if taken == k {
                    break;
                }
                if eligible(j) {
                    out.push(j);
                    taken += 1;
                }
            }
        }
        out
    }

    pub fn total_window_size(&self) -> usize {
        self.missing_order().iter().map(|&i| self.windows[i].len()).sum()
    }

    pub fn variable_of(&self, i: usize) -> usize {
        self.variables[i]
    }

    /// Diagnostic dump: `point_id,variable,timestamp,depth,position,window_size`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = String::from("point_id,variable,timestamp,depth,position,window_size\n");
        for &id in &self.order {
            body += &format!(
                "{id},{},{},{},{},{}\n",
                self.variables[id],
                self.timestamps[id],
                self.depth[id],
                self.position[id],
                self.windows[id].len()
            );
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimePoint;

    fn frame_with_observed(n_steps: usize, observed: &[usize]) -> SeriesFrame {
        let pts = (0..n_steps)
            .map(|t| TimePoint {
                value: Some(t as f64),
                variable: 0,
                timestamp: t,
                mask: observed.contains(&t),
            })
            .collect();
        SeriesFrame::new(1, n_steps, pts).unwrap()
    }

    #[test]
    fn worked_depth_example() {
        let f = frame_with_observed(9, &[0, 8]);
        let d = assign_depths(&f);
        assert_eq!(d, vec![-1, 2, 1, 2, 0, 2, 1, 2, -1]);
    }

    #[test]
    fn single_gap_and_full_observation() {
        let f = frame_with_observed(3, &[0, 2]);
        assert_eq!(assign_depths(&f), vec![-1, 0, -1]);
        let f = frame_with_observed(4, &[0, 1, 2, 3]);
        assert_eq!(assign_depths(&f), vec![-1; 4]);
    }

    #[test]
    fn midpoint_order_respects_depth() {
        let f = frame_with_observed(9, &[0, 8]);
        for seed in 0..20 {
            let plan = build_permutation(&f, PermutationMode::Midpoint, WindowPolicy::Global, seed).unwrap();
            let miss = plan.missing_order();
            assert_eq!(miss[0], 4);
            let mut second: Vec<_> = miss[1..3].to_vec();
            second.sort();
            assert_eq!(second, vec![2, 6]);
            let mut third: Vec<_> = miss[3..].to_vec();
            third.sort();
            assert_eq!(third, vec![1, 3, 5, 7]);
        }
    }

    #[test]
    fn random_mode_differs_across_seeds() {
        let f = frame_with_observed(30, &[0, 29]);
        let a = build_permutation(&f, PermutationMode::Random, WindowPolicy::Global, 1).unwrap();
        let b = build_permutation(&f, PermutationMode::Random, WindowPolicy::Global, 2).unwrap();
        assert_ne!(a.order, b.order);
        assert_eq!(&a.order[..2], &[0, 29]);
        assert_eq!(&b.order[..2], &[0, 29]);
    }

    #[test]
    fn bounded_interval_starts_near_history() {
        let f = frame_with_observed(1344, &(0..672).collect::<Vec<_>>());
        let plan = build_permutation(&f, PermutationMode::MidpointMaxInterval(3), WindowPolicy::Local(5), 0).unwrap();
        let first = plan.missing_order()[0];
        assert!(f.points[first].timestamp <= 671 + 3);
        // every inferred point is within 3 steps of something known before it
        let mut known: BTreeSet<usize> = (0..672).collect();
        for &i in plan.missing_order() {
            let t = f.points[i].timestamp;
            let d = known.iter().map(|&s| s.abs_diff(t)).min().unwrap();
            assert!(d <= 3);
            known.insert(t);
        }
    }

    #[test]
    fn local_window_with_observed_neighbours() {
        let f = frame_with_observed(9, &[0, 1, 2, 3, 5, 6, 7, 8]);
        let plan = build_permutation(&f, PermutationMode::Midpoint, WindowPolicy::Local(2), 0).unwrap();
        let mut w = plan.windows[4].clone();
        w.sort();
        assert_eq!(w, vec![2, 3, 5, 6]);
    }

    #[test]
    fn first_missing_point_can_have_empty_window() {
        let f = frame_with_observed(12, &[0]);
        let plan = build_permutation(&f, PermutationMode::Random, WindowPolicy::Local(1), 3).unwrap();
        // nothing but point 0 precedes; a far-away first pick still sees it on its past side
        let first = plan.missing_order()[0];
        assert_eq!(plan.windows[first], vec![0]);
        let f = SeriesFrame::new(
            1,
            3,
            vec![TimePoint {
                value: Some(0.0),
                variable: 0,
                timestamp: 1,
                mask: false,
            }],
        )
        .unwrap();
        let plan = build_permutation(&f, PermutationMode::Midpoint, WindowPolicy::Local(2), 0).unwrap();
        assert!(plan.windows[0].is_empty());
    }

    #[test]
    fn unknown_mode_rejected() {
        assert!(PermutationMode::parse("zigzag", 3).is_err());
    }
}
