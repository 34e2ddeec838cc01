//! Stay-point extraction from raw GPS traces, discretization to grid
//! trajectories, and the synthetic ablation datasets.

pub mod io;

use rand::Rng;

use crate::geo::{self, GridSpec};
use crate::rng;
use crate::{Error, Result};

/// One raw GPS fix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub lat: f64,
    pub lon: f64,
    /// Unix timestamp, seconds.
    pub time: i64,
}

/// An ordered raw GPS trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub id: String,
    pub points: Vec<RawPoint>,
}

impl RawTrajectory {
    pub fn new(id: impl Into<String>, points: Vec<RawPoint>) -> Result<Self> {
        for pair in points.windows(2) {
            if pair[1].time <= pair[0].time {
                return Err(Error::Range(format!(
                    "timestamps must be strictly increasing, got {} then {}",
                    pair[0].time, pair[1].time
                )));
            }
        }
        Ok(RawTrajectory {
            id: id.into(),
            points,
        })
    }
}

/// A dwell: the trace stayed within the radius around this centroid from
/// `arrival` to `departure`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StayPoint {
    pub lat: f64,
    pub lon: f64,
    pub arrival: i64,
    pub departure: i64,
}

/// One visit of a discretized trajectory: a finest-resolution cell index and
/// a time-slot index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Visit {
    pub cell: usize,
    pub slot: usize,
}

/// A discretized trajectory. Invariants: length >= 1, no consecutive repeated
/// cell, non-decreasing slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory(pub Vec<Visit>);

impl Trajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn visits(&self) -> &[Visit] {
        &self.0
    }

    /// Check the representation invariants against a grid size and slot count.
    pub fn validate(&self, n_cells: usize, n_time: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        for v in &self.0 {
            if v.cell >= n_cells {
                return Err(Error::InvalidCell(format!("cell {} >= {n_cells}", v.cell)));
            }
            if v.slot >= n_time {
                return Err(Error::Range(format!("slot {} >= {n_time}", v.slot)));
            }
        }
        for pair in self.0.windows(2) {
            if pair[0].cell == pair[1].cell {
                return Err(Error::InvalidCell(format!(
                    "consecutive repeated cell {}",
                    pair[0].cell
                )));
            }
            if pair[1].slot < pair[0].slot {
                return Err(Error::Range(format!(
                    "slots decrease: {} then {}",
                    pair[0].slot, pair[1].slot
                )));
            }
        }
        Ok(())
    }
}

/// A discretized dataset: the grid, the number of time slots, and the
/// trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub n_time: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.trajectories {
            t.validate(self.grid.n_poi(), self.n_time)?;
        }
        Ok(())
    }
}

/// Extract stay points: maximal forward windows that stay within `radius_m`
/// meters of the window anchor for at least `min_duration_min` minutes.
/// Centroid is the arithmetic mean of the member fixes.
pub fn extract_stay_points(
    raw: &RawTrajectory,
    radius_m: f64,
    min_duration_min: f64,
) -> Vec<StayPoint> {
    let pts = &raw.points;
    let min_duration_s = min_duration_min * 60.0;
    let mut stays = Vec::new();
    let mut i = 0;
    while i < pts.len() {
        let anchor = pts[i];
        let mut j = i + 1;
        while j < pts.len()
            && geo::distance_m(anchor.lat, anchor.lon, pts[j].lat, pts[j].lon) <= radius_m
        {
            j += 1;
        }
        // Window is [i, j); j points at the first fix that left the radius.
        let duration = (pts[j - 1].time - pts[i].time) as f64;
        if duration >= min_duration_s {
            let count = (j - i) as f64;
            let lat = pts[i..j].iter().map(|p| p.lat).sum::<f64>() / count;
            let lon = pts[i..j].iter().map(|p| p.lon).sum::<f64>() / count;
            stays.push(StayPoint {
                lat,
                lon,
                arrival: pts[i].time,
                departure: pts[j - 1].time,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    stays
}

/// Discretize ordered stay points onto the grid and `n_time` slots over the
/// half-open horizon `[t_start, t_end)`, collapsing consecutive equal cells
/// (keeping the first arrival's slot).
pub fn discretize(
    stays: &[StayPoint],
    spec: &GridSpec,
    n_time: usize,
    horizon: (i64, i64),
) -> Result<Trajectory> {
    let (t0, t1) = horizon;
    if t1 <= t0 {
        return Err(Error::Range(format!("empty horizon [{t0}, {t1})")));
    }
    let span = (t1 - t0) as f64;
    let mut visits: Vec<Visit> = Vec::new();
    for s in stays {
        if s.arrival < t0 || s.arrival >= t1 {
            return Err(Error::Range(format!(
                "stay arrival {} outside horizon [{t0}, {t1})",
                s.arrival
            )));
        }
        let cell = geo::latlng_to_cell(spec, s.lat, s.lon)?;
        let slot = (((s.arrival - t0) as f64 / span * n_time as f64).floor() as usize)
            .min(n_time - 1);
        match visits.last() {
            Some(last) if last.cell == cell.index => {} // collapse, keep first slot
            _ => visits.push(Visit {
                cell: cell.index,
                slot,
            }),
        }
    }
    if visits.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let traj = Trajectory(visits);
    traj.validate(spec.n_poi(), n_time)?;
    Ok(traj)
}

/// Grid used by the synthetic ablation datasets: geography is irrelevant to
/// them, so a unit box is attached.
pub fn synthetic_grid(w: usize) -> Result<GridSpec> {
    GridSpec::with_width(0.0, 0.0, 1.0, 1.0, w)
}

/// Length-2 trajectories with both cells uniform over the grid and the
/// second resampled on collision, so transitions carry no structure at all.
pub fn gen_random_dataset(w: usize, n: usize, seed: u64) -> Result<Dataset> {
    let grid = synthetic_grid(w)?;
    let n_cells = grid.n_poi();
    let n_time = 2;
    let mut trajectories = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = rng::stream(rng::derive_seed(seed, &format!("random-traj-{k}")));
        let first = rng.gen_range(0..n_cells);
        let mut second = rng.gen_range(0..n_cells);
        while second == first {
            second = rng.gen_range(0..n_cells);
        }
        trajectories.push(Trajectory(vec![
            Visit {
                cell: first,
                slot: 0,
            },
            Visit {
                cell: second,
                slot: 1,
            },
        ]));
    }
    let ds = Dataset {
        grid,
        n_time,
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}

/// Length-3 straight columns: the first cell sits on an even row no higher
/// than `w - 3` (so the column fits), and each following cell is one row up.
pub fn gen_straight_dataset(w: usize, n: usize, seed: u64) -> Result<Dataset> {
    if w < 4 {
        return Err(Error::Range(format!("straight dataset needs w >= 4, got {w}")));
    }
    let grid = synthetic_grid(w)?;
    let n_time = 3;
    let start_rows: Vec<usize> = (0..=(w - 3)).filter(|r| r % 2 == 0).collect();
    let mut trajectories = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = rng::stream(rng::derive_seed(seed, &format!("straight-traj-{k}")));
        let row = start_rows[rng.gen_range(0..start_rows.len())];
        let col = rng.gen_range(0..w);
        let first = row * w + col;
        trajectories.push(Trajectory(vec![
            Visit {
                cell: first,
                slot: 0,
            },
            Visit {
                cell: first + w,
                slot: 1,
            },
            Visit {
                cell: first + 2 * w,
                slot: 2,
            },
        ]));
    }
    let ds = Dataset {
        grid,
        n_time,
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}
