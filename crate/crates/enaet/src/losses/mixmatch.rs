//! Label guessing and batch mixing.

use ndarray::{Array1, Array2, Ix2};
use rand::seq::SliceRandom;
use rand::RngCore;

use super::{draw_mix_lambda, mix_pair, sharpen_rows, LossError, SslConfig};
use crate::data::{standard_augment, to_model_input, ChannelStats};
use crate::model::ModelState;
use crate::transforms::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixOrigin {
    /// Mixed from the labeled batch (X').
    Labeled,
    /// Mixed from the augmented unlabeled copies (U').
    Unlabeled,
}

/// Mixed examples with soft targets, ready for the SSL loss.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub inputs: Vec<Image>,
    /// One row per input, on the probability simplex.
    pub targets: Array2<f64>,
    pub origin: MixOrigin,
}

fn eval_probs(state: &ModelState, images: &[&Image], stats: &ChannelStats) -> Array2<f64> {
    let x = to_model_input(images, stats);
    state.predict_probs(x, false).into_dimensionality::<Ix2>().unwrap()
}

fn augment_all(
    images: &[&Image],
    enabled: bool,
    rng: &mut dyn RngCore,
) -> Vec<Image> {
    images
        .iter()
        .map(|&im| if enabled { standard_augment(im, rng) } else { im.clone() })
        .collect()
}

/// Classifier consensus over `k_augment` stochastic augmentations, sharpened
/// into a training target. Runs the student in eval mode; the result carries
/// no gradient.
pub fn guess_labels(
    state: &ModelState,
    images: &[&Image],
    cfg: &SslConfig,
    stats: &ChannelStats,
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>, LossError> {
    if images.is_empty() {
        return Err(LossError::BatchMismatch("empty unlabeled batch".into()));
    }
    if cfg.k_augment == 0 {
        return Err(LossError::InvalidParam("k_augment must be at least 1".into()));
    }
    let mut mean = Array2::zeros((images.len(), state.config.num_classes));
    for _ in 0..cfg.k_augment {
        let copies = augment_all(images, cfg.augment, rng);
        let refs: Vec<&Image> = copies.iter().collect();
        mean += &eval_probs(state, &refs, stats);
    }
    mean /= cfg.k_augment as f64;
    sharpen_rows(&mean, cfg.temperature)
}

struct PoolEntry {
    image: Image,
    target: Array1<f64>,
}

/// The MixMatch step: guesses labels for the unlabeled batch, pools the
/// augmented labeled batch with `k_augment` augmented copies of the
/// unlabeled batch, shuffles, and mixes everything against the pool.
///
/// Returns `(X', U', q)` where `q` holds the sharpened guessed labels, one
/// row per raw unlabeled image, for reuse as consistency targets. `|X'|`
/// equals the labeled batch size and `|U'| = k_augment * |U|`.
pub fn mixmatch_batch(
    state: &ModelState,
    labeled: &[(&Image, usize)],
    unlabeled: &[&Image],
    cfg: &SslConfig,
    stats: &ChannelStats,
    rng: &mut dyn RngCore,
) -> Result<(MixedBatch, MixedBatch, Array2<f64>), LossError> {
    let n = labeled.len();
    if n == 0 || unlabeled.len() != n {
        return Err(LossError::BatchMismatch(format!(
            "labeled {n} vs unlabeled {}",
            unlabeled.len()
        )));
    }
    if cfg.k_augment == 0 {
        return Err(LossError::InvalidParam("k_augment must be at least 1".into()));
    }
    let classes = state.config.num_classes;
    for &(_, y) in labeled {
        if y >= classes {
            return Err(LossError::InvalidParam(format!("label {y} with {classes} classes")));
        }
    }

    let labeled_images: Vec<&Image> = labeled.iter().map(|&(im, _)| im).collect();
    let x_aug = augment_all(&labeled_images, cfg.augment, rng);
    let one_hot = |y: usize| {
        let mut v = Array1::zeros(classes);
        v[y] = 1.0;
        v
    };

    // K augmented copies per unlabeled image; the same copies are classified
    // for the label guess and entered into the mixing pool.
    let mut u_copies: Vec<Vec<Image>> = Vec::with_capacity(cfg.k_augment);
    let mut mean = Array2::zeros((n, classes));
    for _ in 0..cfg.k_augment {
        let copies = augment_all(unlabeled, cfg.augment, rng);
        let refs: Vec<&Image> = copies.iter().collect();
        mean += &eval_probs(state, &refs, stats);
        u_copies.push(copies);
    }
    mean /= cfg.k_augment as f64;
    let guesses = sharpen_rows(&mean, cfg.temperature)?;

    let mut pool: Vec<PoolEntry> = Vec::with_capacity(n + cfg.k_augment * n);
    for (img, &(_, y)) in x_aug.iter().zip(labeled) {
        pool.push(PoolEntry { image: img.clone(), target: one_hot(y) });
    }
    for copies in &u_copies {
        for (i, img) in copies.iter().enumerate() {
            pool.push(PoolEntry { image: img.clone(), target: guesses.row(i).to_owned() });
        }
    }
    pool.shuffle(rng);

    let mix = |first: (&Image, ndarray::ArrayView1<f64>),
                   partner: &PoolEntry,
                   rng: &mut dyn RngCore|
     -> Result<(Image, Array1<f64>), LossError> {
        let lambda = match cfg.lambda_override {
            Some(l) => l,
            None => draw_mix_lambda(cfg.mix_alpha, rng)?,
        };
        mix_pair(first, (&partner.image, partner.target.view()), lambda)
    };

    let mut x_inputs = Vec::with_capacity(n);
    let mut x_targets = Array2::zeros((n, classes));
    for (i, (img, &(_, y))) in x_aug.iter().zip(labeled).enumerate() {
        let hot = one_hot(y);
        let (mixed, target) = mix((img, hot.view()), &pool[i], rng)?;
        x_inputs.push(mixed);
        x_targets.row_mut(i).assign(&target);
    }

    let m = cfg.k_augment * n;
    let mut u_inputs = Vec::with_capacity(m);
    let mut u_targets = Array2::zeros((m, classes));
    for (j, (copies_idx, i)) in
        (0..cfg.k_augment).flat_map(|c| (0..n).map(move |i| (c, i))).enumerate()
    {
        let img = &u_copies[copies_idx][i];
        let (mixed, target) = mix((img, guesses.row(i)), &pool[n + j], rng)?;
        u_inputs.push(mixed);
        u_targets.row_mut(j).assign(&target);
    }

    Ok((
        MixedBatch { inputs: x_inputs, targets: x_targets, origin: MixOrigin::Labeled },
        MixedBatch { inputs: u_inputs, targets: u_targets, origin: MixOrigin::Unlabeled },
        guesses,
    ))
}
