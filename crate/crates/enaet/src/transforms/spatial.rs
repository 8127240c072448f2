use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, RngCore};

use super::TransformError;

/// Spatial family, ordered from most to least general.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SpatialKind {
    Projective,
    Affine,
    Similarity,
    Euclidean,
}

impl SpatialKind {
    pub fn name(self) -> &'static str {
        match self {
            SpatialKind::Projective => "projective",
            SpatialKind::Affine => "affine",
            SpatialKind::Similarity => "similarity",
            SpatialKind::Euclidean => "euclidean",
        }
    }

    /// Degrees of freedom = length of the parameter vector.
    pub fn dof(self) -> usize {
        match self {
            SpatialKind::Projective => 8,
            SpatialKind::Affine => 6,
            SpatialKind::Similarity => 4,
            SpatialKind::Euclidean => 3,
        }
    }

    /// Sampling interval for each parameter, in vector order.
    ///
    /// Parameter layouts:
    /// - euclidean:  [theta_deg, b1, b2]
    /// - similarity: [scale, theta_deg, b1, b2]
    /// - affine:     [scale_x, scale_y, shear_deg, theta_deg, b1, b2]
    /// - projective: [dx1, dy1, dx2, dy2, dx3, dy3, dx4, dy4] corner offsets
    ///   for corners TL(-1,-1), TR(1,-1), BR(1,1), BL(-1,1)
    ///
    /// Translations and corner offsets are in normalized image units.
    pub fn param_ranges(self) -> &'static [(f64, f64)] {
        const ROT: (f64, f64) = (-180.0, 180.0);
        const TRANS: (f64, f64) = (-0.2, 0.2);
        const SCALE: (f64, f64) = (0.8, 1.2);
        const SHEAR: (f64, f64) = (-30.0, 30.0);
        const CORNER: (f64, f64) = (-0.125, 0.125);
        match self {
            SpatialKind::Projective => &[CORNER; 8],
            SpatialKind::Affine => &[SCALE, SCALE, SHEAR, ROT, TRANS, TRANS],
            SpatialKind::Similarity => &[SCALE, ROT, TRANS, TRANS],
            SpatialKind::Euclidean => &[ROT, TRANS, TRANS],
        }
    }

    /// Pure matrix builder; does not range-check. Composition order is
    /// scale -> shear -> rotate -> translate (projective solves corners
    /// directly). Only projective construction can fail.
    pub fn matrix(self, params: &[f64]) -> Result<Matrix3<f64>, TransformError> {
        if params.len() != self.dof() {
            return Err(TransformError::WrongArity {
                kind: self.name(),
                expected: self.dof(),
                got: params.len(),
            });
        }
        Ok(match self {
            SpatialKind::Euclidean => {
                let (s, c) = params[0].to_radians().sin_cos();
                Matrix3::new(c, -s, params[1], s, c, params[2], 0.0, 0.0, 1.0)
            }
            SpatialKind::Similarity => {
                let a = params[0];
                let (s, c) = params[1].to_radians().sin_cos();
                Matrix3::new(a * c, -a * s, params[2], a * s, a * c, params[3], 0.0, 0.0, 1.0)
            }
            SpatialKind::Affine => {
                let (sx, sy) = (params[0], params[1]);
                let t = params[2].to_radians().tan();
                let (s, c) = params[3].to_radians().sin_cos();
                // R * Shear * diag(sx, sy), with Shear = [[1, t], [0, 1]].
                Matrix3::new(
                    c * sx,
                    (c * t - s) * sy,
                    params[4],
                    s * sx,
                    (s * t + c) * sy,
                    params[5],
                    0.0,
                    0.0,
                    1.0,
                )
            }
            SpatialKind::Projective => fit_projective(params)?,
        })
    }

    fn validate(self, params: &[f64]) -> Result<(), TransformError> {
        if params.len() != self.dof() {
            return Err(TransformError::WrongArity {
                kind: self.name(),
                expected: self.dof(),
                got: params.len(),
            });
        }
        for (i, (&p, &(lo, hi))) in params.iter().zip(self.param_ranges()).enumerate() {
            if !(lo..=hi).contains(&p) {
                return Err(TransformError::OutOfRange {
                    kind: self.name(),
                    index: i,
                    value: p,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }
}

/// A homography tagged with its generating family.
///
/// `params` is present for sampled or parameter-built transforms and absent
/// for results of `compose`/`invert`, whose derived parameters can leave the
/// sampling ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTransform {
    pub kind: SpatialKind,
    pub params: Option<Vec<f64>>,
    pub matrix: Matrix3<f64>,
}

impl SpatialTransform {
    pub fn identity(kind: SpatialKind) -> Self {
        Self { kind, params: None, matrix: Matrix3::identity() }
    }

    /// Range-checked constructor from generating parameters.
    pub fn from_params(kind: SpatialKind, params: Vec<f64>) -> Result<Self, TransformError> {
        let matrix = matrix_from_params(kind, &params)?;
        Ok(Self { kind, params: Some(params), matrix })
    }
}

/// Builds the homography for in-range parameters; rejects anything outside
/// the sampling intervals.
pub fn matrix_from_params(kind: SpatialKind, params: &[f64]) -> Result<Matrix3<f64>, TransformError> {
    kind.validate(params)?;
    kind.matrix(params)
}

/// Exact homography sending the canonical corners (+-1, +-1) to
/// corner + offset, via the four-point direct linear solve. Offsets are
/// (dx, dy) pairs in the corner order TL, TR, BR, BL.
pub fn fit_projective(corner_offsets: &[f64]) -> Result<Matrix3<f64>, TransformError> {
    assert_eq!(corner_offsets.len(), 8, "expected 8 corner offsets");
    const SRC: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, &(x, y)) in SRC.iter().enumerate() {
        let u = x + corner_offsets[2 * i];
        let v = y + corner_offsets[2 * i + 1];
        let rows = [
            [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y],
            [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y],
        ];
        for (r, row) in rows.iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                a[(i * 2 + r, c)] = val;
            }
        }
        b[i * 2] = u;
        b[i * 2 + 1] = v;
    }
    let lu = a.full_piv_lu();
    if lu.determinant().abs() < 1e-12 {
        return Err(TransformError::DegenerateCorners);
    }
    let h = lu.solve(&b).ok_or(TransformError::DegenerateCorners)?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Draws a uniform transform of the given family. Parameters are sampled in
/// vector order from the intervals of `param_ranges`. Degenerate projective
/// corner layouts are resampled.
pub fn sample_spatial(kind: SpatialKind, rng: &mut dyn RngCore) -> SpatialTransform {
    loop {
        let params: Vec<f64> = kind
            .param_ranges()
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..=hi))
            .collect();
        match SpatialTransform::from_params(kind, params) {
            Ok(t) => return t,
            Err(TransformError::DegenerateCorners) => continue,
            Err(e) => unreachable!("in-range sample rejected: {e}"),
        }
    }
}

/// Applies `t1` first, then `t2`. The result's kind is the smallest family
/// containing the product matrix; derived parameters are not recovered.
pub fn compose(t1: &SpatialTransform, t2: &SpatialTransform) -> Result<SpatialTransform, TransformError> {
    let m = t2.matrix * t1.matrix;
    normalized(m)
}

pub fn invert(t: &SpatialTransform) -> Result<SpatialTransform, TransformError> {
    if t.matrix.determinant().abs() < 1e-12 {
        return Err(TransformError::Singular);
    }
    let m = t.matrix.try_inverse().ok_or(TransformError::Singular)?;
    normalized(m)
}

fn normalized(m: Matrix3<f64>) -> Result<SpatialTransform, TransformError> {
    if m[(2, 2)].abs() < 1e-12 {
        return Err(TransformError::Singular);
    }
    let mut m = m / m[(2, 2)];
    m[(2, 2)] = 1.0;
    Ok(SpatialTransform { kind: classify(&m), params: None, matrix: m })
}

/// Smallest family whose structural predicate the matrix satisfies, with
/// tolerance 1e-9 on each test.
pub fn classify(m: &Matrix3<f64>) -> SpatialKind {
    const TOL: f64 = 1e-9;
    if m[(2, 0)].abs() > TOL || m[(2, 1)].abs() > TOL {
        return SpatialKind::Projective;
    }
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    // scale * rotation: columns orthogonal, equal norm, positive determinant.
    let col_dot = a * c + b * d;
    let norm_diff = (a * a + c * c).sqrt() - (b * b + d * d).sqrt();
    let det = a * d - b * c;
    if col_dot.abs() > TOL || norm_diff.abs() > TOL || det <= 0.0 {
        return SpatialKind::Affine;
    }
    if ((a * a + c * c).sqrt() - 1.0).abs() > TOL {
        return SpatialKind::Similarity;
    }
    SpatialKind::Euclidean
}

/// Applies a homography to a normalized point.
pub fn apply_point(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = m * Vector3::new(x, y, 1.0);
    (p[0] / p[2], p[1] / p[2])
}
