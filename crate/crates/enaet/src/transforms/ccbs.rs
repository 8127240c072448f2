use ndarray::Array3;
use rand::{Rng, RngCore};

use super::{Image, TransformError};

pub const CCBS_RANGE: (f64, f64) = (0.2, 1.8);

/// Color, contrast, brightness, sharpness magnitudes; 1.0 is the identity
/// for each operator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhotometricTransform {
    pub color: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub sharpness: f64,
}

impl PhotometricTransform {
    pub const IDENTITY: Self =
        Self { color: 1.0, contrast: 1.0, brightness: 1.0, sharpness: 1.0 };

    pub fn magnitudes(&self) -> [f64; 4] {
        [self.color, self.contrast, self.brightness, self.sharpness]
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        let (lo, hi) = CCBS_RANGE;
        for (i, m) in self.magnitudes().into_iter().enumerate() {
            if !(lo..=hi).contains(&m) {
                return Err(TransformError::OutOfRange {
                    kind: "ccbs",
                    index: i,
                    value: m,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }
}

/// Four independent uniform draws from [0.2, 1.8], in color, contrast,
/// brightness, sharpness order.
pub fn sample_ccbs(rng: &mut dyn RngCore) -> PhotometricTransform {
    let (lo, hi) = CCBS_RANGE;
    let mut draw = || rng.random_range(lo..=hi);
    PhotometricTransform {
        color: draw(),
        contrast: draw(),
        brightness: draw(),
        sharpness: draw(),
    }
}

/// Applies color, contrast, brightness, sharpness in that order. Each step
/// blends the current image v against an operator-specific base image:
/// out = base + m * (v - base). Bases: per-pixel gray for color, the global
/// mean gray for contrast, black for brightness, a 3x3-smoothed copy for
/// sharpness (border pixels keep their value). One final clamp to [0, 1].
pub fn apply_ccbs(image: &Image, t: &PhotometricTransform) -> Image {
    let mut v = image.pixels.clone();
    let (h, w, c) = image.dims();

    // color: base = grayscale. Rec. 601 luma for RGB, channel mean otherwise
    // (a single-channel image is its own gray, so color is a no-op there).
    let gray = gray_of(&v);
    blend_per_pixel(&mut v, |i, j, _| gray[(i, j)], t.color);

    // contrast: base = scalar mean gray of the current image.
    let gray = gray_of(&v);
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    blend_per_pixel(&mut v, |_, _, _| mean, t.contrast);

    // brightness: base = 0.
    v.mapv_inplace(|x| x * t.brightness);

    // sharpness: base = smoothed interior, untouched 1-pixel border. The
    // kernel is the standard 3x3 smoothing stencil with center weight 5/13.
    let smoothed = smooth(&v, h, w, c);
    blend_per_pixel(&mut v, |i, j, ch| smoothed[(i, j, ch)], t.sharpness);

    let mut out = Image::new(v);
    out.clamp_unit();
    out
}

fn gray_of(v: &Array3<f64>) -> ndarray::Array2<f64> {
    let (h, w, c) = (v.dim().0, v.dim().1, v.dim().2);
    ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
        if c == 3 {
            0.299 * v[(i, j, 0)] + 0.587 * v[(i, j, 1)] + 0.114 * v[(i, j, 2)]
        } else {
            (0..c).map(|ch| v[(i, j, ch)]).sum::<f64>() / c as f64
        }
    })
}

fn blend_per_pixel<F: Fn(usize, usize, usize) -> f64>(v: &mut Array3<f64>, base: F, m: f64) {
    let dims = v.dim();
    for i in 0..dims.0 {
        for j in 0..dims.1 {
            for ch in 0..dims.2 {
                let b = base(i, j, ch);
                // Written so m = 1 reproduces v bit-exactly.
                v[(i, j, ch)] += (m - 1.0) * (v[(i, j, ch)] - b);
            }
        }
    }
}

fn smooth(v: &Array3<f64>, h: usize, w: usize, c: usize) -> Array3<f64> {
    let mut out = v.clone();
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            for ch in 0..c {
                let mut acc = 4.0 * v[(i, j, ch)];
                for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        acc += v[((i as i32 + di) as usize, (j as i32 + dj) as usize, ch)];
                    }
                }
                out[(i, j, ch)] = acc / 13.0;
            }
        }
    }
    out
}
