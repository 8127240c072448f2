//! The five-member transformation ensemble: four nested spatial families
//! (projective ⊃ affine ⊃ similarity ⊃ euclidean) plus one photometric
//! family (color/contrast/brightness/sharpness, "CCBS").
//!
//! Conventions used throughout:
//! - Images live on a normalized, center-origin grid: pixel centers sit at
//!   x = (2j+1)/W - 1 and y = (2i+1)/H - 1, both in (-1, 1).
//! - Spatial transforms are 3x3 homographies acting on column vectors
//!   (x, y, 1)ᵀ, bottom-right entry pinned to exactly 1.
//! - Angles are stored in degrees in parameter vectors and converted to
//!   radians only when a matrix is built.

mod ccbs;
mod family;
mod spatial;
mod target;
mod warp;

pub use ccbs::{apply_ccbs, sample_ccbs, PhotometricTransform};
pub use family::{builtin_families, family_by_name, AnyTransform, TransformFamily, FAMILY_NAMES};
pub use spatial::{
    apply_point, classify, compose, fit_projective, invert, matrix_from_params, sample_spatial,
    SpatialKind, SpatialTransform,
};
pub use target::{
    ccbs_from_target, spatial_from_target, target_vector_ccbs, target_vector_spatial,
    TransformTarget,
};
pub use warp::warp;

use ndarray::Array3;

/// H x W x C pixel grid with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Self {
        Self { pixels }
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self { pixels: Array3::from_elem((h, w, c), value) }
    }

    /// (height, width, channels)
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.pixels.dim();
        (d.0, d.1, d.2)
    }

    pub fn clamp_unit(&mut self) {
        self.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("{kind} parameter {index} = {value} outside [{lo}, {hi}]")]
    OutOfRange { kind: &'static str, index: usize, value: f64, lo: f64, hi: f64 },
    #[error("{kind} expects {expected} parameters, got {got}")]
    WrongArity { kind: &'static str, expected: usize, got: usize },
    #[error("displaced corners are degenerate, homography solve is singular")]
    DegenerateCorners,
    #[error("transform matrix is singular")]
    Singular,
    #[error("transform carries no generating parameters")]
    MissingParams,
    #[error("unknown transform family {0:?}")]
    UnknownFamily(String),
}
