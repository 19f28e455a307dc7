//! Uniform G x G partition of the dataset's bounding region.
//!
//! The region is the componentwise min/max over all dataset locations,
//! treated as a flat surface in raw degrees. Coordinates on or past the
//! upper boundary clamp into the last cell so the id space is exactly
//! G * G.

use crate::error::{PasrError, Result};
use crate::geocode::GeoCoordinate;

const DEGENERATE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
}

/// Componentwise min/max over a non-empty set of coordinates.
/// Degenerate axes (single point) are widened by a tiny epsilon so the
/// cell division stays well defined.
pub fn fit_bounds(locations: &[GeoCoordinate]) -> Result<RegionBounds> {
    if locations.is_empty() {
        return Err(PasrError::EmptyInput("fit_bounds needs at least one location"));
    }
    let mut b = RegionBounds {
        lat_min: f64::INFINITY,
        lat_max: f64::NEG_INFINITY,
        lon_min: f64::INFINITY,
        lon_max: f64::NEG_INFINITY,
    };
    for c in locations {
        b.lat_min = b.lat_min.min(c.lat());
        b.lat_max = b.lat_max.max(c.lat());
        b.lon_min = b.lon_min.min(c.lon());
        b.lon_max = b.lon_max.max(c.lon());
    }
    if b.lat_max - b.lat_min < DEGENERATE_EPS {
        b.lat_min -= DEGENERATE_EPS;
        b.lat_max += DEGENERATE_EPS;
    }
    if b.lon_max - b.lon_min < DEGENERATE_EPS {
        b.lon_min -= DEGENERATE_EPS;
        b.lon_max += DEGENERATE_EPS;
    }
    Ok(b)
}

/// Map a coordinate to its (row, col) cell. Out-of-bounds coordinates
/// clamp to the edge cells; test-time locations may sit on the border.
pub fn map_to_cell(coord: &GeoCoordinate, bounds: &RegionBounds, intervals: usize) -> GridCell {
    debug_assert!(intervals >= 1);
    let g = intervals as f64;
    let row = ((coord.lat() - bounds.lat_min) / (bounds.lat_max - bounds.lat_min) * g).floor();
    let col = ((coord.lon() - bounds.lon_min) / (bounds.lon_max - bounds.lon_min) * g).floor();
    let clamp = |v: f64| -> usize {
        if v < 0.0 {
            0
        } else if v >= g {
            intervals - 1
        } else {
            v as usize
        }
    };
    GridCell { row: clamp(row), col: clamp(col) }
}
