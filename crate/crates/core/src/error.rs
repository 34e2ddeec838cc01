//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A geographic point fell outside the grid's bounding box.
    #[error("point ({lat}, {lon}) outside bounding box")]
    OutOfBounds { lat: f64, lon: f64 },

    /// A cell id or resolution was invalid for the grid it was used with.
    #[error("invalid cell: {0}")]
    InvalidCell(String),

    /// Requested resolution is not available (e.g. coarser-than-coarsest).
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),

    /// More scattered POIs than cells at the requested depth.
    #[error("capacity exceeded: {n_pois} POIs > {n_cells} cells at depth {depth}")]
    Capacity {
        n_pois: usize,
        n_cells: usize,
        depth: u8,
    },

    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Value out of the permitted range (slots, indices, histogram bins).
    #[error("out of range: {0}")]
    Range(String),

    /// A privacy parameter was non-positive or otherwise unusable.
    #[error("invalid privacy parameter: {0}")]
    Privacy(String),

    /// No noise multiplier on the search grid satisfies the budget.
    #[error("infeasible noise plan: {0}")]
    Infeasible(String),

    /// Every visit of a discretized trajectory collapsed away.
    #[error("trajectory collapsed to zero visits")]
    EmptyTrajectory,

    /// Malformed dataset / checkpoint / config file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
