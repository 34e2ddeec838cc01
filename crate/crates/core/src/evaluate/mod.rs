//! Fidelity metrics between a real and a generated dataset.
//!
//! Seven distributional metrics are scored with Jensen-Shannon divergence
//! (base 2, so every value sits in [0, 1]) and two count-query metrics with
//! average relative error. Start-conditioned metrics condition on the most
//! frequent starting cells of the real dataset; query sets are derived from
//! the real dataset once and applied to both sides.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geo::{cell_center, distance_m, CellId, GridSpec};
use crate::preprocess::{Dataset, Trajectory};
use crate::rng;
use crate::{Error, Result};

/// Everything the evaluator needs beyond the two datasets.
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub seed: u64,
    /// Bins for the travel-distance and diameter histograms.
    pub n_bins: usize,
    /// Floor for the ARE denominators.
    pub phi: f64,
    pub n_density_queries: usize,
    pub max_patterns: usize,
    pub n_starts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            n_bins: 20,
            phi: 5.0,
            n_density_queries: 500,
            max_patterns: 200,
            n_starts: 30,
        }
    }
}

/// Queries derived from the real dataset.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// Random cell subsets for the trajectory-density counts.
    pub density_queries: Vec<Vec<usize>>,
    /// Most frequent contiguous cell patterns of length >= 3.
    pub patterns: Vec<Vec<usize>>,
    /// Most frequent starting cells.
    pub starts: Vec<usize>,
}

/// Equal-width bins partitioning `[0, d_max]`.
#[derive(Debug, Clone, Copy)]
pub struct HistogramSpec {
    pub d_max: f64,
    pub n_bins: usize,
}

impl HistogramSpec {
    pub fn bin(&self, value: f64) -> usize {
        if self.d_max <= 0.0 {
            return 0;
        }
        ((value / self.d_max * self.n_bins as f64).floor() as usize).min(self.n_bins - 1)
    }
}

/// The nine discrepancies plus skip bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    pub waypoint: f64,
    pub destination: f64,
    pub transition: f64,
    pub travel_distance: f64,
    pub diameter: f64,
    pub route: f64,
    pub density_t: f64,
    pub traj_density: f64,
    pub traj_pattern: f64,
    /// Start cells skipped because one side had no matching trajectories
    /// (summed over the start-conditioned metrics).
    pub skipped_starts: usize,
    /// Time points skipped because one side had no occupant.
    pub skipped_times: usize,
}

impl MetricReport {
    pub fn text_block(&self) -> String {
        format!(
            "waypoint {}\ndestination {}\ntransition {}\ntravel_distance {}\ndiameter {}\nroute {}\ndensity_t {}\ntraj_density {}\ntraj_pattern {}\nskipped_starts {}\nskipped_times {}\n",
            self.waypoint,
            self.destination,
            self.transition,
            self.travel_distance,
            self.diameter,
            self.route,
            self.density_t,
            self.traj_density,
            self.traj_pattern,
            self.skipped_starts,
            self.skipped_times,
        )
    }

    pub fn csv_header() -> &'static str {
        "waypoint,destination,transition,travel_distance,diameter,route,density_t,traj_density,traj_pattern"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.waypoint,
            self.destination,
            self.transition,
            self.travel_distance,
            self.diameter,
            self.route,
            self.density_t,
            self.traj_density,
            self.traj_pattern,
        )
    }
}

/// Base-2 Jensen-Shannon divergence between same-support distributions.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "JS support mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            total += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            total += 0.5 * qi * (qi / m).ln();
        }
    }
    Ok(total / std::f64::consts::LN_2)
}

fn js_binary(p: f64, q: f64) -> f64 {
    js_divergence(&[p, 1.0 - p], &[q, 1.0 - q]).unwrap()
}

/// Average relative error with a floored denominator.
pub fn are(real_counts: &[f64], gen_counts: &[f64], phi: f64) -> f64 {
    assert_eq!(real_counts.len(), gen_counts.len());
    assert!(phi > 0.0);
    let total: f64 = real_counts
        .iter()
        .zip(gen_counts)
        .map(|(r, g)| (r - g).abs() / r.max(phi))
        .sum();
    total / real_counts.len() as f64
}

/// Derive the start cells, density queries, and frequent patterns from the
/// real dataset.
pub fn build_query_set(real: &Dataset, config: &EvalConfig) -> QuerySet {
    let n_cells = real.grid.n_poi();
    // Top starting cells by first-visit occurrence, ties broken by id.
    let mut start_counts: HashMap<usize, usize> = HashMap::new();
    for t in &real.trajectories {
        *start_counts.entry(t.visits()[0].cell).or_default() += 1;
    }
    let mut starts: Vec<(usize, usize)> = start_counts.into_iter().collect();
    starts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let starts: Vec<usize> = starts
        .into_iter()
        .take(config.n_starts)
        .map(|(cell, _)| cell)
        .collect();

    // Random cell subsets; sizes uniform in [1, max(1, n_cells / 20)].
    let mut r = rng::stream(rng::derive_seed(config.seed, "density-queries"));
    let max_size = (n_cells / 20).max(1);
    let all_cells: Vec<usize> = (0..n_cells).collect();
    let density_queries: Vec<Vec<usize>> = (0..config.n_density_queries)
        .map(|_| {
            let size = r.gen_range(1..=max_size);
            let mut cells = all_cells.clone();
            cells.shuffle(&mut r);
            cells.truncate(size);
            cells.sort_unstable();
            cells
        })
        .collect();

    // Frequent contiguous patterns of length >= 3, counted once per
    // trajectory, ties broken lexicographically.
    let mut pattern_counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for t in &real.trajectories {
        for pattern in windows_of(t, 3, t.len()) {
            *pattern_counts.entry(pattern).or_default() += 1;
        }
    }
    let mut patterns: Vec<(Vec<usize>, usize)> = pattern_counts.into_iter().collect();
    patterns.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let patterns: Vec<Vec<usize>> = patterns
        .into_iter()
        .take(config.max_patterns)
        .map(|(p, _)| p)
        .collect();

    QuerySet {
        density_queries,
        patterns,
        starts,
    }
}

/// Distinct contiguous cell windows of lengths `min_len..=max_len`.
fn windows_of(t: &Trajectory, min_len: usize, max_len: usize) -> HashSet<Vec<usize>> {
    let cells: Vec<usize> = t.visits().iter().map(|v| v.cell).collect();
    let mut out = HashSet::new();
    for len in min_len..=max_len.min(cells.len()) {
        for start in 0..=cells.len() - len {
            out.insert(cells[start..start + len].to_vec());
        }
    }
    out
}

/// Count-query vector: how many trajectories touch each query set.
pub fn density_counts(ds: &Dataset, queries: &[Vec<usize>]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| {
            let q: HashSet<usize> = q.iter().copied().collect();
            ds.trajectories
                .iter()
                .filter(|t| t.visits().iter().any(|v| q.contains(&v.cell)))
                .count() as f64
        })
        .collect()
}

/// Count-query vector: how many trajectories contain each contiguous
/// pattern.
pub fn pattern_counts(ds: &Dataset, patterns: &[Vec<usize>]) -> Vec<f64> {
    let wanted: HashSet<&[usize]> = patterns.iter().map(|p| p.as_slice()).collect();
    let min_len = patterns.iter().map(|p| p.len()).min().unwrap_or(3);
    let max_len = patterns.iter().map(|p| p.len()).max().unwrap_or(3);
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    for t in &ds.trajectories {
        for pattern in windows_of(t, min_len, max_len) {
            if let Some(&key) = wanted.get(pattern.as_slice()) {
                *counts.entry(key).or_default() += 1;
            }
        }
    }
    patterns
        .iter()
        .map(|p| counts.get(p.as_slice()).copied().unwrap_or(0) as f64)
        .collect()
}

/// Which start-conditioned statistic to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMetric {
    Waypoint,
    Destination,
    Transition,
    Route,
}

/// Per-start distributions for one metric.
///
/// Waypoint/route produce one presence probability per cell (a binary
/// distribution each); destination/transition produce one distribution over
/// all cells.
pub enum StartDistribution {
    Presence(Vec<f64>),
    OverCells(Vec<f64>),
}

/// Extract the distribution for one start cell, or `None` when no
/// trajectory qualifies.
pub fn start_conditioned(
    ds: &Dataset,
    metric: StartMetric,
    start: usize,
) -> Result<Option<StartDistribution>> {
    let n_cells = ds.grid.n_poi();
    let matching: Vec<&Trajectory> = ds
        .trajectories
        .iter()
        .filter(|t| t.visits()[0].cell == start)
        .collect();
    let qualifying: Vec<&&Trajectory> = match metric {
        StartMetric::Transition => matching.iter().filter(|t| t.len() >= 2).collect(),
        _ => matching.iter().collect(),
    };
    if qualifying.is_empty() {
        return Ok(None);
    }
    let denom = qualifying.len() as f64;
    match metric {
        StartMetric::Waypoint => {
            let mut presence = vec![0.0; n_cells];
            for t in qualifying {
                let cells: HashSet<usize> = t.visits().iter().map(|v| v.cell).collect();
                for c in cells {
                    presence[c] += 1.0;
                }
            }
            for p in presence.iter_mut() {
                *p /= denom;
            }
            Ok(Some(StartDistribution::Presence(presence)))
        }
        StartMetric::Route => {
            let side = ds.grid.width();
            let mut presence = vec![0.0; n_cells];
            for t in qualifying {
                let mut cells: HashSet<usize> = HashSet::new();
                for pair in t.visits().windows(2) {
                    for c in raster_segment(pair[0].cell, pair[1].cell, side) {
                        cells.insert(c);
                    }
                }
                if t.len() == 1 {
                    cells.insert(t.visits()[0].cell);
                }
                for c in cells {
                    presence[c] += 1.0;
                }
            }
            for p in presence.iter_mut() {
                *p /= denom;
            }
            Ok(Some(StartDistribution::Presence(presence)))
        }
        StartMetric::Destination => {
            let mut dist = vec![0.0; n_cells];
            for t in qualifying {
                dist[t.visits().last().unwrap().cell] += 1.0;
            }
            for p in dist.iter_mut() {
                *p /= denom;
            }
            Ok(Some(StartDistribution::OverCells(dist)))
        }
        StartMetric::Transition => {
            let mut dist = vec![0.0; n_cells];
            for t in qualifying {
                dist[t.visits()[1].cell] += 1.0;
            }
            for p in dist.iter_mut() {
                *p /= denom;
            }
            Ok(Some(StartDistribution::OverCells(dist)))
        }
    }
}

/// 8-connected raster of the segment between two cell centers, endpoints
/// included (Bresenham).
pub fn raster_segment(from: usize, to: usize, side: usize) -> Vec<usize> {
    let (mut r0, mut c0) = ((from / side) as isize, (from % side) as isize);
    let (r1, c1) = ((to / side) as isize, (to % side) as isize);
    let dr = (r1 - r0).abs();
    let dc = (c1 - c0).abs();
    let sr = if r0 < r1 { 1 } else { -1 };
    let sc = if c0 < c1 { 1 } else { -1 };
    let mut err = dc - dr;
    let mut cells = Vec::new();
    loop {
        cells.push(r0 as usize * side + c0 as usize);
        if r0 == r1 && c0 == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 > -dr {
            err -= dr;
            c0 += sc;
        }
        if e2 < dc {
            err += dc;
            r0 += sr;
        }
    }
    cells
}

fn cell_distance(grid: &GridSpec, a: usize, b: usize) -> f64 {
    let d = grid.depth();
    let ca = cell_center(grid, CellId::new(a, d).unwrap()).unwrap();
    let cb = cell_center(grid, CellId::new(b, d).unwrap()).unwrap();
    distance_m(ca.0, ca.1, cb.0, cb.1)
}

/// Per-trajectory scalar for the histogram metrics.
pub fn trajectory_scalar(grid: &GridSpec, t: &Trajectory, diameter: bool) -> f64 {
    if diameter {
        let mut max = 0.0f64;
        let visits = t.visits();
        for i in 0..visits.len() {
            for j in i + 1..visits.len() {
                max = max.max(cell_distance(grid, visits[i].cell, visits[j].cell));
            }
        }
        max
    } else {
        t.visits()
            .windows(2)
            .map(|p| cell_distance(grid, p[0].cell, p[1].cell))
            .sum()
    }
}

/// Normalized histogram of a per-trajectory scalar.
pub fn scalar_histogram(
    grid: &GridSpec,
    ds: &Dataset,
    spec: &HistogramSpec,
    diameter: bool,
) -> Vec<f64> {
    let mut hist = vec![0.0; spec.n_bins];
    for t in &ds.trajectories {
        hist[spec.bin(trajectory_scalar(grid, t, diameter))] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        for h in hist.iter_mut() {
            *h /= total;
        }
    }
    hist
}

/// Occupancy distribution over cells at one integer time point: trajectory
/// `i` occupies `v[i]` while `t_i < t < t_{i+1}`.
pub fn density_at(ds: &Dataset, t: usize) -> Option<Vec<f64>> {
    let n_cells = ds.grid.n_poi();
    let mut counts = vec![0.0; n_cells];
    let mut total = 0.0;
    for traj in &ds.trajectories {
        let visits = traj.visits();
        for i in 0..visits.len().saturating_sub(1) {
            if visits[i].slot < t && visits[i + 1].slot > t {
                counts[visits[i].cell] += 1.0;
                total += 1.0;
                break;
            }
        }
    }
    if total == 0.0 {
        return None;
    }
    for c in counts.iter_mut() {
        *c /= total;
    }
    Some(counts)
}

fn presence_js(real: &[f64], gen: &[f64]) -> f64 {
    let n = real.len() as f64;
    real.iter()
        .zip(gen)
        .map(|(&p, &q)| js_binary(p, q))
        .sum::<f64>()
        / n
}

/// Compute all nine discrepancies between a real and a generated dataset
/// over the same grid.
pub fn full_report(real: &Dataset, gen: &Dataset, config: &EvalConfig) -> Result<MetricReport> {
    if real.grid != gen.grid {
        return Err(Error::Dimension("datasets use different grids".into()));
    }
    if real.is_empty() || gen.is_empty() {
        return Err(Error::Range("cannot evaluate an empty dataset".into()));
    }
    let queries = build_query_set(real, config);
    let mut skipped_starts = 0usize;

    let mut start_metric = |metric: StartMetric| -> Result<f64> {
        let mut values = Vec::new();
        for &start in &queries.starts {
            let (a, b) = (
                start_conditioned(real, metric, start)?,
                start_conditioned(gen, metric, start)?,
            );
            match (a, b) {
                (Some(StartDistribution::Presence(p)), Some(StartDistribution::Presence(q))) => {
                    values.push(presence_js(&p, &q));
                }
                (Some(StartDistribution::OverCells(p)), Some(StartDistribution::OverCells(q))) => {
                    values.push(js_divergence(&p, &q)?);
                }
                _ => skipped_starts += 1,
            }
        }
        if values.is_empty() {
            return Ok(0.0);
        }
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    };

    let waypoint = start_metric(StartMetric::Waypoint)?;
    let destination = start_metric(StartMetric::Destination)?;
    let transition = start_metric(StartMetric::Transition)?;
    let route = start_metric(StartMetric::Route)?;

    let scalar_metric = |diameter: bool| -> f64 {
        let d_max = real
            .trajectories
            .iter()
            .map(|t| trajectory_scalar(&real.grid, t, diameter))
            .fold(0.0f64, f64::max);
        let spec = HistogramSpec {
            d_max,
            n_bins: config.n_bins,
        };
        let p = scalar_histogram(&real.grid, real, &spec, diameter);
        let q = scalar_histogram(&real.grid, gen, &spec, diameter);
        js_divergence(&p, &q).unwrap()
    };
    let travel_distance = scalar_metric(false);
    let diameter = scalar_metric(true);

    let mut skipped_times = 0usize;
    let mut density_values = Vec::new();
    let n_time = real.n_time.max(gen.n_time);
    for t in 0..=n_time {
        match (density_at(real, t), density_at(gen, t)) {
            (Some(p), Some(q)) => density_values.push(js_divergence(&p, &q)?),
            (None, None) => {}
            _ => skipped_times += 1,
        }
    }
    let density_t = if density_values.is_empty() {
        0.0
    } else {
        density_values.iter().sum::<f64>() / density_values.len() as f64
    };

    let traj_density = are(
        &density_counts(real, &queries.density_queries),
        &density_counts(gen, &queries.density_queries),
        config.phi,
    );
    let traj_pattern = if queries.patterns.is_empty() {
        0.0
    } else {
        are(
            &pattern_counts(real, &queries.patterns),
            &pattern_counts(gen, &queries.patterns),
            config.phi,
        )
    };

    Ok(MetricReport {
        waypoint,
        destination,
        transition,
        travel_distance,
        diameter,
        route,
        density_t,
        traj_density,
        traj_pattern,
        skipped_starts,
        skipped_times,
    })
}
