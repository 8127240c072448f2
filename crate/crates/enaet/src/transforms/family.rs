use rand::RngCore;

use super::ccbs::{apply_ccbs, sample_ccbs, PhotometricTransform};
use super::spatial::{sample_spatial, SpatialKind, SpatialTransform};
use super::target::{target_vector_ccbs, target_vector_spatial, TransformTarget};
use super::warp::warp;
use super::{Image, TransformError};

/// A sampled transform from either branch of the ensemble.
#[derive(Debug, Clone)]
pub enum AnyTransform {
    Spatial(SpatialTransform),
    Photometric(PhotometricTransform),
}

impl AnyTransform {
    /// Generating parameters in sampling order, for logging and sidecars.
    pub fn raw_params(&self) -> Vec<f64> {
        match self {
            AnyTransform::Spatial(t) => t.params.clone().unwrap_or_default(),
            AnyTransform::Photometric(t) => t.magnitudes().to_vec(),
        }
    }
}

/// One member of the transformation ensemble: knows how to sample itself,
/// apply a sample to an image, and encode a sample as a regression target.
pub trait TransformFamily {
    fn name(&self) -> &'static str;
    /// Regression-target length.
    fn dof(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore) -> AnyTransform;
    fn apply(&self, image: &Image, t: &AnyTransform) -> Result<Image, TransformError>;
    fn target(&self, t: &AnyTransform) -> Result<TransformTarget, TransformError>;
}

struct SpatialFamily {
    kind: SpatialKind,
}

impl TransformFamily for SpatialFamily {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn dof(&self) -> usize {
        self.kind.dof()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> AnyTransform {
        AnyTransform::Spatial(sample_spatial(self.kind, rng))
    }

    fn apply(&self, image: &Image, t: &AnyTransform) -> Result<Image, TransformError> {
        match t {
            AnyTransform::Spatial(s) => warp(image, s),
            AnyTransform::Photometric(_) => Err(TransformError::UnknownFamily(
                "photometric sample passed to a spatial family".into(),
            )),
        }
    }

    fn target(&self, t: &AnyTransform) -> Result<TransformTarget, TransformError> {
        match t {
            AnyTransform::Spatial(s) => target_vector_spatial(s),
            AnyTransform::Photometric(_) => Err(TransformError::UnknownFamily(
                "photometric sample passed to a spatial family".into(),
            )),
        }
    }
}

struct CcbsFamily;

impl TransformFamily for CcbsFamily {
    fn name(&self) -> &'static str {
        "ccbs"
    }

    fn dof(&self) -> usize {
        4
    }

    fn sample(&self, rng: &mut dyn RngCore) -> AnyTransform {
        AnyTransform::Photometric(sample_ccbs(rng))
    }

    fn apply(&self, image: &Image, t: &AnyTransform) -> Result<Image, TransformError> {
        match t {
            AnyTransform::Photometric(p) => Ok(apply_ccbs(image, p)),
            AnyTransform::Spatial(_) => Err(TransformError::UnknownFamily(
                "spatial sample passed to the ccbs family".into(),
            )),
        }
    }

    fn target(&self, t: &AnyTransform) -> Result<TransformTarget, TransformError> {
        match t {
            AnyTransform::Photometric(p) => target_vector_ccbs(p),
            AnyTransform::Spatial(_) => Err(TransformError::UnknownFamily(
                "spatial sample passed to the ccbs family".into(),
            )),
        }
    }
}

/// Ensemble order; also the order of the per-family loss weights.
pub const FAMILY_NAMES: [&str; 5] = ["projective", "affine", "similarity", "euclidean", "ccbs"];

/// The full ensemble in canonical order.
pub fn builtin_families() -> Vec<Box<dyn TransformFamily>> {
    FAMILY_NAMES.iter().map(|n| family_by_name(n).unwrap()).collect()
}

pub fn family_by_name(name: &str) -> Result<Box<dyn TransformFamily>, TransformError> {
    match name {
        "projective" => Ok(Box::new(SpatialFamily { kind: SpatialKind::Projective })),
        "affine" => Ok(Box::new(SpatialFamily { kind: SpatialKind::Affine })),
        "similarity" => Ok(Box::new(SpatialFamily { kind: SpatialKind::Similarity })),
        "euclidean" => Ok(Box::new(SpatialFamily { kind: SpatialKind::Euclidean })),
        "ccbs" => Ok(Box::new(CcbsFamily)),
        other => Err(TransformError::UnknownFamily(other.to_string())),
    }
}
