use ndarray::Array3;

use super::spatial::SpatialTransform;
use super::{Image, TransformError};

/// Inverse-mapping warp with bilinear interpolation and zero padding.
///
/// Every output pixel center is mapped through the inverse homography and
/// sampled from the source; neighbors outside the grid contribute zero.
/// Source coordinates within 1e-9 of a grid point collapse onto it, so the
/// identity (and axis-aligned isometries) reproduce pixels exactly at any
/// image size.
pub fn warp(image: &Image, t: &SpatialTransform) -> Result<Image, TransformError> {
    if t.matrix.determinant().abs() < 1e-12 {
        return Err(TransformError::Singular);
    }
    let inv = t.matrix.try_inverse().ok_or(TransformError::Singular)?;
    let (h, w, c) = image.dims();
    let (hf, wf) = (h as f64, w as f64);
    let src = &image.pixels;
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        let y = (2 * i + 1) as f64 / hf - 1.0;
        for j in 0..w {
            let x = (2 * j + 1) as f64 / wf - 1.0;
            let z = inv[(2, 0)] * x + inv[(2, 1)] * y + inv[(2, 2)];
            if z.abs() < 1e-12 {
                continue;
            }
            let xs = (inv[(0, 0)] * x + inv[(0, 1)] * y + inv[(0, 2)]) / z;
            let ys = (inv[(1, 0)] * x + inv[(1, 1)] * y + inv[(1, 2)]) / z;
            let jf = snap(((xs + 1.0) * wf - 1.0) / 2.0);
            let if_ = snap(((ys + 1.0) * hf - 1.0) / 2.0);
            let (j0, fx) = (jf.floor() as isize, jf - jf.floor());
            let (i0, fy) = (if_.floor() as isize, if_ - if_.floor());
            for ch in 0..c {
                let at = |ii: isize, jj: isize| -> f64 {
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        src[(ii as usize, jj as usize, ch)]
                    } else {
                        0.0
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * at(i0, j0) + fx * at(i0, j0 + 1))
                    + fy * ((1.0 - fx) * at(i0 + 1, j0) + fx * at(i0 + 1, j0 + 1));
                out[(i, j, ch)] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image::new(out))
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}
