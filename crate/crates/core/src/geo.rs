//! Spherical geometry: locations, great-circle distance, lat/lon grids and
//! radius clustering.
//!
//! Distances use the haversine formula on a sphere of radius
//! [`EARTH_RADIUS_KM`]. The integration domain used by posterior maps is the
//! configured bounding box; nothing outside it carries probability mass.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// A point on the sphere in degrees. Longitude is kept in `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    lat: f64,
    lon: f64,
}

impl Location {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::data(format!("non-finite coordinate ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::data(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(Location {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Clamp raw regression output into a valid location.
    pub fn clamped(lat: f64, lon: f64) -> Self {
        let lat = if lat.is_nan() { 0.0 } else { lat.clamp(-90.0, 90.0) };
        let lon = if lon.is_nan() {
            0.0
        } else {
            // Keep within [-180, 180) without wrapping across the antimeridian.
            lon.clamp(-180.0, 180.0 - 1e-9)
        };
        Location { lat, lon }
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// Haversine great-circle distance in kilometres.
pub fn great_circle_distance(a: &Location, b: &Location) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let s1 = (dphi / 2.0).sin();
    let s2 = (dlambda / 2.0).sin();
    let h = (s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2).clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Chordal (straight-line through the sphere) distance in kilometres.
pub fn chordal_distance(a: &Location, b: &Location) -> f64 {
    let central = great_circle_distance(a, b) / EARTH_RADIUS_KM;
    2.0 * EARTH_RADIUS_KM * (central / 2.0).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let bbox = BoundingBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        bbox.validate()?;
        Ok(bbox)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lat_min, self.lat_max, self.lon_min, self.lon_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("bounding box has non-finite bounds"));
        }
        if !(self.lat_min < self.lat_max) {
            return Err(Error::config(format!(
                "bounding box needs lat_min < lat_max, got {} and {}",
                self.lat_min, self.lat_max
            )));
        }
        if !(self.lon_min < self.lon_max) {
            return Err(Error::config(format!(
                "bounding box needs lon_min < lon_max, got {} and {}",
                self.lon_min, self.lon_max
            )));
        }
        if self.lat_min < -90.0 || self.lat_max > 90.0 {
            return Err(Error::config("bounding box latitude outside [-90, 90]"));
        }
        if self.lon_min < -180.0 || self.lon_max > 180.0 {
            return Err(Error::config("bounding box longitude outside [-180, 180]"));
        }
        Ok(())
    }
}

/// Discretised integration domain: cell centres with area weights summing
/// to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    cells: Vec<Location>,
    cell_weight: Vec<f64>,
    resolution_deg: f64,
}

impl SpatialGrid {
    /// Build a grid from explicit cells. Weights are renormalised.
    pub fn from_cells(cells: Vec<Location>, weights: Vec<f64>, resolution_deg: f64) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::config("grid has no cells"));
        }
        if cells.len() != weights.len() {
            return Err(Error::config(format!(
                "grid has {} cells but {} weights",
                cells.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("grid weights must be strictly positive"));
        }
        let total: f64 = weights.iter().sum();
        let cell_weight = weights.iter().map(|w| w / total).collect();
        Ok(SpatialGrid {
            cells,
            cell_weight,
            resolution_deg,
        })
    }

    pub fn cells(&self) -> &[Location] {
        &self.cells
    }

    pub fn weights(&self) -> &[f64] {
        &self.cell_weight
    }

    pub fn resolution_deg(&self) -> f64 {
        self.resolution_deg
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Regular lat/lon lattice of cell centres over `bbox`, weighted by
/// `cos(lat)` of each centre.
pub fn build_grid(bbox: &BoundingBox, resolution_deg: f64) -> Result<SpatialGrid> {
    bbox.validate()?;
    if !(resolution_deg.is_finite() && resolution_deg > 0.0) {
        return Err(Error::config(format!(
            "grid resolution must be positive, got {resolution_deg}"
        )));
    }
    // Only whole cells are kept; the small epsilon absorbs float error in
    // extents that are exact multiples of the resolution.
    let n_lat = ((bbox.lat_max - bbox.lat_min) / resolution_deg + 1e-9).floor() as usize;
    let n_lon = ((bbox.lon_max - bbox.lon_min) / resolution_deg + 1e-9).floor() as usize;
    if n_lat == 0 || n_lon == 0 {
        return Err(Error::config(format!(
            "bounding box is smaller than one {resolution_deg}° cell"
        )));
    }
    let mut cells = Vec::with_capacity(n_lat * n_lon);
    let mut weights = Vec::with_capacity(n_lat * n_lon);
    for i in 0..n_lat {
        let lat = bbox.lat_min + (i as f64 + 0.5) * resolution_deg;
        let w = lat.to_radians().cos().max(1e-12);
        for k in 0..n_lon {
            let lon = bbox.lon_min + (k as f64 + 0.5) * resolution_deg;
            cells.push(Location::new(lat, lon)?);
            weights.push(w);
        }
    }
    SpatialGrid::from_cells(cells, weights, resolution_deg)
}

/// Indices of every point within `radius_km` of `points[seed_index]`,
/// always including the seed itself.
pub fn cluster_by_radius(points: &[Location], seed_index: usize, radius_km: f64) -> BTreeSet<usize> {
    let seed = &points[seed_index];
    let mut out: BTreeSet<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| great_circle_distance(seed, p) <= radius_km)
        .map(|(i, _)| i)
        .collect();
    out.insert(seed_index);
    out
}
