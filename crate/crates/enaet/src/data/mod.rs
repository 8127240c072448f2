//! Datasets: labeled/unlabeled splitting, standard stochastic augmentation,
//! per-channel normalization statistics, synthetic generation, and the
//! on-disk layout `images/<split>/<id>.png` + `labels_<split>.csv`.

mod io;
mod synthetic;

pub use io::{load_dataset, save_dataset};
pub use synthetic::{make_synthetic, SyntheticConfig};

use ndarray::{Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::transforms::Image;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("bad label file: {0}")]
    BadLabels(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

/// Raw dataset before the semi-supervised split.
#[derive(Debug, Clone)]
pub struct FullDataset {
    pub train: Vec<(Image, usize)>,
    pub test: Vec<(Image, usize)>,
    pub num_classes: usize,
}

/// Per-channel mean/std of the training pixels; applied at the model input
/// boundary so stored pixels stay in [0, 1].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Semi-supervised view of a dataset. The unlabeled pool deliberately holds
/// bare images: labels are stripped at the type level.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<(Image, usize)>,
    pub unlabeled: Vec<Image>,
    pub test: Vec<(Image, usize)>,
    pub num_classes: usize,
    pub split_seed: u64,
    pub stats: ChannelStats,
}

/// Class-balanced labeled subset of floor(n_labels / num_classes) per class;
/// every remaining training image, label stripped, becomes unlabeled.
pub fn split_labels(
    full: &FullDataset,
    n_labels: usize,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let c = full.num_classes;
    if c == 0 || n_labels < c {
        return Err(DataError::InfeasibleSplit(format!(
            "need at least one label per class ({c} classes, {n_labels} labels)"
        )));
    }
    if n_labels > full.train.len() {
        return Err(DataError::InfeasibleSplit(format!(
            "{n_labels} labels requested but the training set has {} examples",
            full.train.len()
        )));
    }
    let per_class = n_labels / c;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, (_, y)) in full.train.iter().enumerate() {
        if *y >= c {
            return Err(DataError::BadLabels(format!("class id {y} >= num_classes {c}")));
        }
        by_class[*y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled_idx = Vec::with_capacity(per_class * c);
    for (y, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < per_class {
            return Err(DataError::InfeasibleSplit(format!(
                "class {y} has {} examples, {per_class} needed",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        labeled_idx.extend_from_slice(&idx[..per_class]);
    }
    let chosen: std::collections::HashSet<usize> = labeled_idx.iter().copied().collect();
    let labeled: Vec<(Image, usize)> =
        labeled_idx.iter().map(|&i| full.train[i].clone()).collect();
    let unlabeled: Vec<Image> = full
        .train
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, (img, _))| img.clone())
        .collect();
    let stats = channel_stats(full.train.iter().map(|(img, _)| img));
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        test: full.test.clone(),
        num_classes: c,
        split_seed: seed,
        stats,
    })
}

pub fn channel_stats<'a, I: Iterator<Item = &'a Image>>(images: I) -> ChannelStats {
    let mut sum: Vec<f64> = Vec::new();
    let mut sumsq: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for img in images {
        let (h, w, c) = img.dims();
        if sum.is_empty() {
            sum = vec![0.0; c];
            sumsq = vec![0.0; c];
        }
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let v = img.pixels[(i, j, ch)];
                    sum[ch] += v;
                    sumsq[ch] += v * v;
                }
            }
        }
        count += h * w;
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    ChannelStats { mean, std }
}

/// Mirror a horizontal index into [0, len); reflection without repeating the
/// edge sample, so index -1 maps to 1 and len maps to len - 2.
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * len - 2 - i;
        } else {
            return i as usize;
        }
    }
}

pub fn flip_horizontal(image: &Image) -> Image {
    let (h, w, c) = image.dims();
    Image::new(ndarray::Array3::from_shape_fn((h, w, c), |(i, j, ch)| {
        image.pixels[(i, w - 1 - j, ch)]
    }))
}

/// Integer translation with reflection padding; (dx, dy) in pixels, positive
/// dx moves content right.
pub fn translate_reflect(image: &Image, dx: isize, dy: isize) -> Image {
    let (h, w, c) = image.dims();
    Image::new(ndarray::Array3::from_shape_fn((h, w, c), |(i, j, ch)| {
        let si = reflect(i as isize - dy, h);
        let sj = reflect(j as isize - dx, w);
        image.pixels[(si, sj, ch)]
    }))
}

/// Weak stochastic augmentation: horizontal flip with probability 1/2, then
/// a uniform integer translation of up to 4 pixels per axis.
pub fn standard_augment(image: &Image, rng: &mut dyn RngCore) -> Image {
    let flip = rng.random_bool(0.5);
    let dx = rng.random_range(-4i32..=4) as isize;
    let dy = rng.random_range(-4i32..=4) as isize;
    let img = if flip { flip_horizontal(image) } else { image.clone() };
    if dx == 0 && dy == 0 {
        img
    } else {
        translate_reflect(&img, dx, dy)
    }
}

/// Stacks images into an (N, C, H, W) tensor, normalizing each channel with
/// the recorded training statistics.
pub fn to_model_input(images: &[&Image], stats: &ChannelStats) -> ArrayD<f64> {
    assert!(!images.is_empty(), "empty batch");
    let (h, w, c) = images[0].dims();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.dims(), (h, w, c), "mixed image shapes in batch");
        for ch in 0..c {
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            for i in 0..h {
                for j in 0..w {
                    out[(n, ch, i, j)] = (img.pixels[(i, j, ch)] - m) / s;
                }
            }
        }
    }
    out.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_dataset(per_class: usize, classes: usize) -> FullDataset {
        let mk = |v: f64| Image::constant(8, 8, 1, v);
        let train: Vec<(Image, usize)> = (0..classes)
            .flat_map(|y| (0..per_class).map(move |k| (mk((y * 10 + k) as f64 / 100.0), y)))
            .collect();
        let test: Vec<(Image, usize)> = (0..classes).map(|y| (mk(0.5), y)).collect();
        FullDataset { train, test, num_classes: classes }
    }

    #[test]
    fn split_is_balanced_and_deterministic() {
        let full = tiny_dataset(20, 4);
        let a = split_labels(&full, 12, 7).unwrap();
        let b = split_labels(&full, 12, 7).unwrap();
        assert_eq!(a.labeled.len(), 12);
        assert_eq!(a.unlabeled.len(), 80 - 12);
        for y in 0..4 {
            assert_eq!(a.labeled.iter().filter(|(_, l)| *l == y).count(), 3);
        }
        let key = |s: &DatasetSplit| {
            s.labeled.iter().map(|(img, y)| (img.pixels[(0, 0, 0)].to_bits(), *y)).collect::<Vec<_>>()
        };
        assert_eq!(key(&a), key(&b));
        let c = split_labels(&full, 12, 8).unwrap();
        assert_ne!(key(&a), key(&c));
    }

    #[test]
    fn full_label_budget_empties_unlabeled_pool() {
        let full = tiny_dataset(5, 4);
        let s = split_labels(&full, 20, 1).unwrap();
        assert_eq!(s.labeled.len(), 20);
        assert!(s.unlabeled.is_empty());
    }

    #[test]
    fn infeasible_splits_are_rejected() {
        let full = tiny_dataset(5, 4);
        assert!(split_labels(&full, 3, 0).is_err());
        assert!(split_labels(&full, 21, 0).is_err());
    }

    #[test]
    fn translate_zero_is_exact_and_flip_is_involution() {
        let img = Image::new(Array3::from_shape_fn((6, 5, 2), |(i, j, c)| {
            (i * 31 + j * 7 + c) as f64 / 100.0
        }));
        assert_eq!(translate_reflect(&img, 0, 0).pixels, img.pixels);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)).pixels, img.pixels);
    }

    #[test]
    fn reflection_padding_mirrors_without_edge_repeat() {
        // Row [a b c d] shifted right by 2 becomes [c b a b]: index -1 -> 1,
        // -2 -> 2 under mirror reflection.
        let img = Image::new(
            Array3::from_shape_vec((1, 4, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        );
        let out = translate_reflect(&img, 2, 0);
        let row: Vec<f64> = out.pixels.iter().copied().collect();
        assert_eq!(row, vec![0.3, 0.2, 0.1, 0.2]);
    }

    #[test]
    fn augment_preserves_shape_and_range() {
        let img = Image::new(Array3::from_shape_fn((9, 7, 3), |(i, j, c)| {
            ((i + 2 * j + 3 * c) % 10) as f64 / 10.0
        }));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let out = standard_augment(&img, &mut rng);
            assert_eq!(out.dims(), img.dims());
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn model_input_is_normalized() {
        let imgs: Vec<Image> =
            (0..4).map(|k| Image::constant(4, 4, 2, 0.2 + 0.2 * k as f64)).collect();
        let stats = channel_stats(imgs.iter());
        let refs: Vec<&Image> = imgs.iter().collect();
        let x = to_model_input(&refs, &stats);
        assert_eq!(x.shape(), &[4, 2, 4, 4]);
        let mean: f64 = x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 1e-9);
    }
}
