//! Deterministic geometric primitives shared by scene generation, the
//! geometric feature extractor, denoising, and the metric suite.
//!
//! Conventions used throughout the crate:
//! - Normalized map coordinates `(x, y)` live in `[0,1]²`; `x` is lateral
//!   (grid columns), `y` is longitudinal (grid rows).
//! - Pixel `(r, c)` has its center at normalized
//!   `((c + 0.5) / W, (r + 0.5) / H)`.
//! - Masks are `Array2<f64>` with shape `(H, W)`.
//! - Tie-breaking for pixel selections is always the lowest row-major index.

mod chamfer;
mod embed;
mod noise;
mod orderings;
mod raster;
mod resample;
mod sampling;

pub use chamfer::chamfer_distance;
pub use embed::sinusoidal_embedding;
pub use noise::perturb_instance;
pub use orderings::equivalent_orderings;
pub use raster::rasterize_instance;
pub use resample::resample_polyline;
pub use sampling::{farthest_point_sampling, max_survival};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Soft mask over the BEV grid, values in `[0, 1]`.
pub type Mask = Array2<f64>;

/// BEV grid geometry: pixel extents plus the metric perception range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height_px: usize,
    pub width_px: usize,
    /// Lateral (x) range in meters, strictly ordered.
    pub range_lat_m: (f64, f64),
    /// Longitudinal (y) range in meters, strictly ordered.
    pub range_lon_m: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            height_px: 64,
            width_px: 32,
            range_lat_m: (-15.0, 15.0),
            range_lon_m: (-30.0, 30.0),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height_px < 4 || self.width_px < 4 {
            return Err(CoreError::InvalidConfig(format!(
                "grid must be at least 4x4, got {}x{}",
                self.height_px, self.width_px
            )));
        }
        if self.range_lat_m.0 >= self.range_lat_m.1 || self.range_lon_m.0 >= self.range_lon_m.1 {
            return Err(CoreError::InvalidConfig(
                "grid ranges must be strictly ordered".into(),
            ));
        }
        Ok(())
    }

    pub fn meters_per_px_x(&self) -> f64 {
        (self.range_lat_m.1 - self.range_lat_m.0) / self.width_px as f64
    }

    pub fn meters_per_px_y(&self) -> f64 {
        (self.range_lon_m.1 - self.range_lon_m.0) / self.height_px as f64
    }

    /// Normalized `[0,1]²` point to meters.
    pub fn to_meters(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.range_lat_m.0 + p[0] * (self.range_lat_m.1 - self.range_lat_m.0),
            self.range_lon_m.0 + p[1] * (self.range_lon_m.1 - self.range_lon_m.0),
        ]
    }

    /// Grid for a dyadically downsampled scale (`factor` = 2^(S-l)).
    pub fn downsampled(&self, factor: usize) -> (usize, usize) {
        (self.height_px / factor, self.width_px / factor)
    }
}

/// Map element classes, in the fixed index order used by class heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassId {
    PedestrianCrossing,
    Divider,
    Boundary,
}

pub const NUM_CLASSES: usize = 3;

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [
        ClassId::PedestrianCrossing,
        ClassId::Divider,
        ClassId::Boundary,
    ];

    pub fn index(self) -> usize {
        match self {
            ClassId::PedestrianCrossing => 0,
            ClassId::Divider => 1,
            ClassId::Boundary => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::PedestrianCrossing => "pedestrian_crossing",
            ClassId::Divider => "divider",
            ClassId::Boundary => "boundary",
        }
    }

    /// Pedestrian crossings are closed polygons; line classes are open.
    pub fn is_closed(self) -> bool {
        self == ClassId::PedestrianCrossing
    }
}

/// One vectorized map element: class, ordered normalized points, topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapInstance {
    pub class_id: ClassId,
    /// Ordered `(x, y)` pairs in `[0,1]²`.
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

impl MapInstance {
    pub fn new(class_id: ClassId, points: Vec<[f64; 2]>) -> Self {
        Self {
            class_id,
            points,
            closed: class_id.is_closed(),
        }
    }

    /// Checks the type invariants for a fixed point count `n_p`.
    pub fn validate(&self, n_p: usize) -> Result<()> {
        if self.points.len() != n_p {
            return Err(CoreError::InvalidConfig(format!(
                "instance has {} points, expected {}",
                self.points.len(),
                n_p
            )));
        }
        if self.closed != self.class_id.is_closed() {
            return Err(CoreError::InvalidConfig(
                "topology does not match class".into(),
            ));
        }
        for p in &self.points {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(CoreError::InvalidConfig(format!(
                    "point ({}, {}) outside [0,1]^2",
                    p[0], p[1]
                )));
            }
        }
        if polyline_length(&self.points, self.closed) <= 0.0 {
            return Err(CoreError::DegeneratePolyline);
        }
        Ok(())
    }
}

/// Total arc length of a piecewise-linear curve.
pub fn polyline_length(points: &[[f64; 2]], closed: bool) -> f64 {
    let mut len = 0.0;
    for w in points.windows(2) {
        len += dist(w[0], w[1]);
    }
    if closed && points.len() >= 2 {
        len += dist(*points.last().unwrap(), points[0]);
    }
    len
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Map-noise magnitudes, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub point_jitter_sigma: f64,
    pub global_shift_sigma: f64,
    pub global_scale_sigma: f64,
    pub enabled: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            point_jitter_sigma: 0.02,
            global_shift_sigma: 0.02,
            global_scale_sigma: 0.05,
            enabled: true,
        }
    }
}

impl NoiseConfig {
    pub fn disabled() -> Self {
        Self {
            point_jitter_sigma: 0.0,
            global_shift_sigma: 0.0,
            global_scale_sigma: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_jitter_sigma < 0.0
            || self.global_shift_sigma < 0.0
            || self.global_scale_sigma < 0.0
        {
            return Err(CoreError::InvalidConfig("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}
