//! Grid discretization of geographic space and the multi-resolution cell
//! hierarchy.
//!
//! A map bounding box is divided into `w x w` cells with `w = 2^d`. Cell ids
//! are 0-based, `id = row * side + col`, rows indexing latitude from the
//! south edge and columns longitude from the west edge. Coarser resolutions
//! `i < d` divide the same box `2^i x 2^i`; `up_res` maps a cell to the cell
//! covering it at a coarser level.

mod lap;

pub use lap::solve_assignment;

use crate::{Error, Result};

/// Mean-Earth-radius equirectangular distance in meters. Adequate at city
/// scale and keeps the crate free of a geodesy dependency.
pub fn distance_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const EARTH_RADIUS_M: f64 = 6_371_000.0;
    let mean_lat = 0.5 * (lat1 + lat2);
    let x = (lon2 - lon1).to_radians() * mean_lat.to_radians().cos();
    let y = (lat2 - lat1).to_radians();
    EARTH_RADIUS_M * (x * x + y * y).sqrt()
}

/// Uniform `2^d x 2^d` grid over a bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
    depth: u8,
}

impl GridSpec {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64, depth: u8) -> Result<Self> {
        if !(max_lat > min_lat && max_lon > min_lon) {
            return Err(Error::Range(format!(
                "bounding box must have positive area, got lat [{min_lat}, {max_lat}] lon [{min_lon}, {max_lon}]"
            )));
        }
        if depth > 15 {
            return Err(Error::Range(format!("depth {depth} too large")));
        }
        Ok(GridSpec {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
            depth,
        })
    }

    /// Construct from the side length `w`, which must be a power of two.
    pub fn with_width(
        min_lat: f64,
        min_lon: f64,
        max_lat: f64,
        max_lon: f64,
        w: usize,
    ) -> Result<Self> {
        if w == 0 || !w.is_power_of_two() {
            return Err(Error::Range(format!("width {w} is not a power of two")));
        }
        GridSpec::new(min_lat, min_lon, max_lat, max_lon, w.trailing_zeros() as u8)
    }

    /// Finest resolution level `d`.
    pub fn depth(&self) -> u8 {
        self.depth
    }

    /// Cells per side at the finest resolution, `w = 2^d`.
    pub fn width(&self) -> usize {
        1 << self.depth
    }

    /// Cell count at the finest resolution, `w^2 = 4^d`.
    pub fn n_poi(&self) -> usize {
        self.width() * self.width()
    }

    pub fn lat_extent(&self) -> f64 {
        self.max_lat - self.min_lat
    }

    pub fn lon_extent(&self) -> f64 {
        self.max_lon - self.min_lon
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon
    }
}

/// A cell index together with its resolution level.
///
/// `index` lies in `[0, 4^res)`; `row = index / 2^res`, `col = index % 2^res`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellId {
    pub index: usize,
    pub res: u8,
}

impl CellId {
    pub fn new(index: usize, res: u8) -> Result<Self> {
        let cell = CellId { index, res };
        if index >= cell.n_cells() {
            return Err(Error::InvalidCell(format!(
                "index {index} out of range for resolution {res}"
            )));
        }
        Ok(cell)
    }

    pub fn from_row_col(row: usize, col: usize, res: u8) -> Result<Self> {
        let side = 1usize << res;
        if row >= side || col >= side {
            return Err(Error::InvalidCell(format!(
                "row/col ({row}, {col}) out of range for resolution {res}"
            )));
        }
        Ok(CellId {
            index: row * side + col,
            res,
        })
    }

    pub fn side(&self) -> usize {
        1 << self.res
    }

    pub fn n_cells(&self) -> usize {
        self.side() * self.side()
    }

    pub fn row(&self) -> usize {
        self.index / self.side()
    }

    pub fn col(&self) -> usize {
        self.index % self.side()
    }
}

/// Map a point to the finest-resolution cell containing it.
///
/// Cells are half-open `[low, high)` in both axes with the top/right boundary
/// folded into the last cell, so every point of the box maps to exactly one
/// cell.
pub fn latlng_to_cell(spec: &GridSpec, lat: f64, lon: f64) -> Result<CellId> {
    if !spec.contains(lat, lon) {
        return Err(Error::OutOfBounds { lat, lon });
    }
    let w = spec.width();
    let row_f = (lat - spec.min_lat) / spec.lat_extent() * w as f64;
    let col_f = (lon - spec.min_lon) / spec.lon_extent() * w as f64;
    let row = (row_f.floor() as usize).min(w - 1);
    let col = (col_f.floor() as usize).min(w - 1);
    CellId::from_row_col(row, col, spec.depth())
}

/// Map a cell to the cell covering it at a coarser resolution.
pub fn up_res(cell: CellId, target: u8) -> Result<CellId> {
    if target > cell.res {
        return Err(Error::InvalidResolution(format!(
            "cannot up-map resolution {} to finer resolution {target}",
            cell.res
        )));
    }
    let shift = cell.res - target;
    CellId::from_row_col(cell.row() >> shift, cell.col() >> shift, target)
}

/// Center of a cell's rectangle at any resolution.
pub fn cell_center(spec: &GridSpec, cell: CellId) -> Result<(f64, f64)> {
    if cell.res > spec.depth() {
        return Err(Error::InvalidResolution(format!(
            "cell resolution {} exceeds grid depth {}",
            cell.res,
            spec.depth()
        )));
    }
    let side = cell.side() as f64;
    let lat = spec.min_lat + (cell.row() as f64 + 0.5) / side * spec.lat_extent();
    let lon = spec.min_lon + (cell.col() as f64 + 0.5) / side * spec.lon_extent();
    Ok((lat, lon))
}

/// Minimum-cost injective assignment of scattered POIs to grid cells.
#[derive(Debug, Clone)]
pub struct PoiAssignment {
    /// `cells[i]` is the finest-resolution cell assigned to POI `i`.
    pub cells: Vec<CellId>,
    /// The grid the assignment was computed against.
    pub grid: GridSpec,
    /// Dimensions of the cost matrix that was solved (`n_poi x 4^d`).
    pub cost_dims: (usize, usize),
    /// Total assignment cost in meters.
    pub total_cost: f64,
}

/// Assign each scattered POI to a distinct finest-resolution cell minimizing
/// total POI-to-cell-center distance.
///
/// `depth: None` picks the smallest `d` with `|pois| <= 4^d`. The covering
/// grid extends the POIs' bounding box by half a cell per side, so the
/// extreme POIs sit on the outermost cell centers rather than on the box
/// edge; degenerate extents get a small pad.
pub fn assign_scattered_pois(pois: &[(f64, f64)], depth: Option<u8>) -> Result<PoiAssignment> {
    assert!(!pois.is_empty(), "no POIs to assign");
    let d = match depth {
        Some(d) => {
            let cells = 1usize << (2 * d as usize);
            if pois.len() > cells {
                return Err(Error::Capacity {
                    n_pois: pois.len(),
                    n_cells: cells,
                    depth: d,
                });
            }
            d
        }
        None => {
            let mut d = 0u8;
            while (1usize << (2 * d as usize)) < pois.len() {
                d += 1;
            }
            d
        }
    };

    let mut min_lat = f64::INFINITY;
    let mut max_lat = f64::NEG_INFINITY;
    let mut min_lon = f64::INFINITY;
    let mut max_lon = f64::NEG_INFINITY;
    for &(lat, lon) in pois {
        min_lat = min_lat.min(lat);
        max_lat = max_lat.max(lat);
        min_lon = min_lon.min(lon);
        max_lon = max_lon.max(lon);
    }
    const PAD: f64 = 1e-6;
    let side = 1usize << d;
    let expand = |lo: f64, hi: f64| -> (f64, f64) {
        if hi - lo < PAD {
            (lo - PAD, hi + PAD)
        } else if side == 1 {
            (lo, hi)
        } else {
            let half_cell = (hi - lo) / (side - 1) as f64 / 2.0;
            (lo - half_cell, hi + half_cell)
        }
    };
    let (min_lat, max_lat) = expand(min_lat, max_lat);
    let (min_lon, max_lon) = expand(min_lon, max_lon);
    let grid = GridSpec::new(min_lat, min_lon, max_lat, max_lon, d)?;

    let n = pois.len();
    let m = grid.n_poi();
    let mut cost = vec![0.0f64; n * m];
    for (i, &(lat, lon)) in pois.iter().enumerate() {
        for j in 0..m {
            let cell = CellId::new(j, d)?;
            let (clat, clon) = cell_center(&grid, cell)?;
            cost[i * m + j] = distance_m(lat, lon, clat, clon);
        }
    }

    let (assignment, total_cost) = solve_assignment(&cost, n, m);
    let cells = assignment
        .into_iter()
        .map(|j| CellId::new(j, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(PoiAssignment {
        cells,
        grid,
        cost_dims: (n, m),
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(depth: u8) -> GridSpec {
        GridSpec::new(0.0, 0.0, 1.0, 1.0, depth).unwrap()
    }

    #[test]
    fn min_corner_is_cell_zero() {
        for w in [1, 2, 16] {
            let spec = GridSpec::with_width(0.0, 0.0, 1.0, 1.0, w).unwrap();
            let cell = latlng_to_cell(&spec, 0.0, 0.0).unwrap();
            assert_eq!(cell.index, 0);
            assert_eq!((cell.row(), cell.col()), (0, 0));
        }
    }

    #[test]
    fn center_maps_to_upper_right_cell_at_w2() {
        // Half-open lower-left convention: the midpoint belongs to row 1, col 1.
        let spec = unit_grid(1);
        let cell = latlng_to_cell(&spec, 0.5, 0.5).unwrap();
        assert_eq!((cell.row(), cell.col()), (1, 1));
        assert_eq!(cell.index, 3);
    }

    #[test]
    fn max_corner_folds_into_last_cell() {
        let spec = unit_grid(2);
        let cell = latlng_to_cell(&spec, 1.0, 1.0).unwrap();
        assert_eq!((cell.row(), cell.col()), (3, 3));
    }

    #[test]
    fn outside_bbox_is_an_error() {
        let spec = unit_grid(2);
        assert!(matches!(
            latlng_to_cell(&spec, 1.5, 0.5),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn up_res_identity_and_corners() {
        let origin = CellId::new(0, 4).unwrap();
        for target in 0..=4 {
            assert_eq!(up_res(origin, target).unwrap().index, 0);
        }
        // w=16: far corner 255 -> (3,3) at resolution 2.
        let far = CellId::new(255, 4).unwrap();
        let up = up_res(far, 2).unwrap();
        assert_eq!((up.row(), up.col()), (3, 3));
        assert_eq!(up.index, 15);
        // Same-resolution up-map is the identity.
        assert_eq!(up_res(far, 4).unwrap(), far);
    }

    #[test]
    fn up_res_row_col_arithmetic() {
        // w=16, cell 37 = (row 2, col 5) -> resolution 2 cell (0, 1) = 1.
        let cell = CellId::new(37, 4).unwrap();
        assert_eq!((cell.row(), cell.col()), (2, 5));
        let up = up_res(cell, 2).unwrap();
        assert_eq!(up.index, 1);
    }

    #[test]
    fn up_res_rejects_finer_target() {
        let cell = CellId::new(0, 2).unwrap();
        assert!(up_res(cell, 3).is_err());
    }

    #[test]
    fn single_cell_center_is_bbox_center() {
        let spec = GridSpec::new(10.0, 20.0, 12.0, 21.0, 0).unwrap();
        let (lat, lon) = cell_center(&spec, CellId::new(0, 0).unwrap()).unwrap();
        assert!((lat - 11.0).abs() < 1e-12);
        assert!((lon - 20.5).abs() < 1e-12);
    }

    #[test]
    fn w2_cell_zero_center_is_quarter_point() {
        let spec = unit_grid(1);
        let (lat, lon) = cell_center(&spec, CellId::new(0, 1).unwrap()).unwrap();
        assert!((lat - 0.25).abs() < 1e-12);
        assert!((lon - 0.25).abs() < 1e-12);
    }

    #[test]
    fn centers_round_trip_through_latlng_to_cell() {
        let spec = unit_grid(3);
        for i in 0..spec.n_poi() {
            let cell = CellId::new(i, 3).unwrap();
            let (lat, lon) = cell_center(&spec, cell).unwrap();
            assert_eq!(latlng_to_cell(&spec, lat, lon).unwrap(), cell);
        }
    }

    #[test]
    fn centers_are_distinct_and_evenly_spaced() {
        let spec = unit_grid(3);
        let w = spec.width();
        let step = 1.0 / w as f64;
        let mut centers = Vec::new();
        for i in 0..spec.n_poi() {
            let c = cell_center(&spec, CellId::new(i, 3).unwrap()).unwrap();
            centers.push(c);
        }
        for (i, a) in centers.iter().enumerate() {
            for b in centers.iter().skip(i + 1) {
                assert!(a != b);
            }
        }
        // Neighbors along a row differ by exactly one step in lon.
        for row in 0..w {
            for col in 0..w - 1 {
                let a = centers[row * w + col];
                let b = centers[row * w + col + 1];
                assert!((b.1 - a.1 - step).abs() < 1e-12);
                assert!((b.0 - a.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn up_res_fibers_have_equal_size() {
        // Each resolution-b cell covers exactly 4^(a-b) resolution-a cells.
        let (a, b) = (4u8, 2u8);
        let mut counts = vec![0usize; 1 << (2 * b as usize)];
        for i in 0..(1usize << (2 * a as usize)) {
            let up = up_res(CellId::new(i, a).unwrap(), b).unwrap();
            counts[up.index] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1 << (2 * (a - b) as usize)));
    }

    #[test]
    fn four_pois_at_cell_centers_cost_zero() {
        let spec = unit_grid(1);
        let pois: Vec<(f64, f64)> = (0..4)
            .map(|i| cell_center(&spec, CellId::new(i, 1).unwrap()).unwrap())
            .collect();
        let assign = assign_scattered_pois(&pois, Some(1)).unwrap();
        assert!(assign.total_cost < 1e-6);
        let mut seen = std::collections::HashSet::new();
        for c in &assign.cells {
            assert!(seen.insert(c.index));
        }
    }

    #[test]
    fn single_poi_goes_to_nearest_center() {
        let assign = assign_scattered_pois(&[(0.3, 0.3)], Some(1)).unwrap();
        assert_eq!(assign.cells.len(), 1);
        assert_eq!(assign.cost_dims, (1, 4));
        // Degenerate bbox is padded; all four centers are equidistant-ish and
        // the cost is tiny.
        assert!(assign.total_cost < 1.0);
    }

    #[test]
    fn capacity_error_when_pois_exceed_cells() {
        let pois = vec![(0.0, 0.0), (0.1, 0.1), (0.2, 0.2), (0.3, 0.3), (0.4, 0.4)];
        assert!(matches!(
            assign_scattered_pois(&pois, Some(1)),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn auto_depth_is_minimal() {
        let pois: Vec<(f64, f64)> = (0..5).map(|i| (i as f64 * 0.1, 0.0)).collect();
        let assign = assign_scattered_pois(&pois, None).unwrap();
        // 5 POIs need 4^2 = 16 cells.
        assert_eq!(assign.grid.depth(), 2);
    }

    #[test]
    fn equirectangular_distance_sane() {
        // One degree of latitude is ~111 km.
        let d = distance_m(0.0, 0.0, 1.0, 0.0);
        assert!((d - 111_195.0).abs() < 100.0);
    }
}
