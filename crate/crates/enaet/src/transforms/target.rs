use super::ccbs::{PhotometricTransform, CCBS_RANGE};
use super::spatial::{SpatialKind, SpatialTransform};
use super::TransformError;

/// Regression target: each generating parameter affinely rescaled from its
/// sampling interval to [-1, 1], in parameter-vector order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformTarget {
    pub values: Vec<f64>,
}

fn encode(p: f64, lo: f64, hi: f64) -> f64 {
    2.0 * (p - lo) / (hi - lo) - 1.0
}

fn decode(v: f64, lo: f64, hi: f64) -> f64 {
    lo + (v + 1.0) * (hi - lo) / 2.0
}

pub fn target_vector_spatial(t: &SpatialTransform) -> Result<TransformTarget, TransformError> {
    let params = t.params.as_ref().ok_or(TransformError::MissingParams)?;
    let ranges = t.kind.param_ranges();
    if params.len() != ranges.len() {
        return Err(TransformError::WrongArity {
            kind: t.kind.name(),
            expected: ranges.len(),
            got: params.len(),
        });
    }
    let values = params
        .iter()
        .zip(ranges)
        .enumerate()
        .map(|(i, (&p, &(lo, hi)))| {
            if (lo..=hi).contains(&p) {
                Ok(encode(p, lo, hi))
            } else {
                Err(TransformError::OutOfRange { kind: t.kind.name(), index: i, value: p, lo, hi })
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(TransformTarget { values })
}

pub fn spatial_from_target(
    kind: SpatialKind,
    target: &TransformTarget,
) -> Result<SpatialTransform, TransformError> {
    let ranges = kind.param_ranges();
    if target.values.len() != ranges.len() {
        return Err(TransformError::WrongArity {
            kind: kind.name(),
            expected: ranges.len(),
            got: target.values.len(),
        });
    }
    let params: Vec<f64> = target
        .values
        .iter()
        .zip(ranges)
        .map(|(&v, &(lo, hi))| decode(v, lo, hi))
        .collect();
    SpatialTransform::from_params(kind, params)
}

pub fn target_vector_ccbs(t: &PhotometricTransform) -> Result<TransformTarget, TransformError> {
    t.validate()?;
    let (lo, hi) = CCBS_RANGE;
    Ok(TransformTarget {
        values: t.magnitudes().into_iter().map(|m| encode(m, lo, hi)).collect(),
    })
}

pub fn ccbs_from_target(target: &TransformTarget) -> Result<PhotometricTransform, TransformError> {
    if target.values.len() != 4 {
        return Err(TransformError::WrongArity {
            kind: "ccbs",
            expected: 4,
            got: target.values.len(),
        });
    }
    let (lo, hi) = CCBS_RANGE;
    let m: Vec<f64> = target.values.iter().map(|&v| decode(v, lo, hi)).collect();
    let t = PhotometricTransform { color: m[0], contrast: m[1], brightness: m[2], sharpness: m[3] };
    t.validate()?;
    Ok(t)
}
