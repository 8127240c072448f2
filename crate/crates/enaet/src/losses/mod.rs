//! Loss terms and MixMatch machinery.
//!
//! Pure pieces live here: label sharpening, mixup, the KL consistency term
//! and the weighted combination of all terms into one scalar objective.
//! [`mixmatch`] produces the mixed batches and guessed labels; [`graph`]
//! assembles the differentiable per-step loss on a tape.

mod graph;
mod mixmatch;

pub use graph::{
    aet_loss_graph, build_loss_graph, consistency_loss_graph, cross_entropy_graph,
    l2_prob_graph, prepare_step, step_loss, FamilyPlan, PreparedStep,
};
pub use mixmatch::{guess_labels, mixmatch_batch, MixOrigin, MixedBatch};

use ndarray::{Array1, Array2, ArrayView1};
use rand::RngCore;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::transforms::{Image, TransformError};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("batch size mismatch: {0}")]
    BatchMismatch(String),
    #[error("non-finite loss term: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Effective weights applied when combining terms: the unlabeled SSL weight,
/// one regression weight per transformation family, and the shared
/// consistency weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_aet: [f64; 5],
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_u: 25.0, lambda_aet: [1.0, 0.75, 0.5, 0.2, 0.05], gamma: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = std::iter::once(self.lambda_u)
            .chain(self.lambda_aet)
            .chain(std::iter::once(self.gamma));
        for w in all {
            if !w.is_finite() || w < 0.0 {
                return Err(LossError::InvalidParam(format!("weight {w} out of range")));
            }
        }
        Ok(())
    }
}

/// Raw per-step loss values before weighting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTerms {
    pub l_labeled: f64,
    pub l_unlabeled: f64,
    pub l_aet: [f64; 5],
    pub l_cl: [f64; 5],
}

/// One step's loss report; serializes to a metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_labeled: f64,
    pub l_unlabeled: f64,
    pub l_aet: [f64; 5],
    pub l_cl: [f64; 5],
    pub weights_applied: LossWeights,
    pub total: f64,
}

/// MixMatch knobs. `lambda_override` pins the mixing coefficient instead of
/// drawing it; useful for deterministic tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub temperature: f64,
    pub k_augment: usize,
    pub mix_alpha: f64,
    pub augment: bool,
    pub lambda_override: Option<f64>,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            k_augment: 2,
            mix_alpha: 0.75,
            augment: true,
            lambda_override: None,
        }
    }
}

/// Per-step loss construction options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub ssl: SslConfig,
    /// Also feed labeled images through the transform branches. Consistency
    /// stays unlabeled-only either way.
    pub aet_include_labeled: bool,
    /// Hard switch per transformation family. A disabled family contributes
    /// neither regression nor consistency, regardless of its weights; this
    /// is how single-family ablations shut the other four off completely.
    pub families_enabled: [bool; 5],
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { ssl: SslConfig::default(), aet_include_labeled: false, families_enabled: [true; 5] }
    }
}

pub(crate) fn check_simplex(p: ArrayView1<f64>, what: &str) -> Result<(), LossError> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(LossError::NotSimplex(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(LossError::NotSimplex(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Temperature sharpening: raises every component to `1/t` and renormalizes.
/// `t < 1` concentrates mass on the argmax.
pub fn sharpen(p: &Array1<f64>, t: f64) -> Result<Array1<f64>, LossError> {
    if !(t > 0.0) {
        return Err(LossError::BadTemperature(t));
    }
    check_simplex(p.view(), "sharpen input")?;
    let mut q = p.mapv(|v| v.powf(1.0 / t));
    let sum = q.sum();
    q /= sum;
    Ok(q)
}

/// Row-wise [`sharpen`].
pub fn sharpen_rows(p: &Array2<f64>, t: f64) -> Result<Array2<f64>, LossError> {
    let mut out = p.clone();
    for mut row in out.rows_mut() {
        let sharp = sharpen(&row.to_owned(), t)?;
        row.assign(&sharp);
    }
    Ok(out)
}

/// Deterministic half of mixup: `lambda * a + (1 - lambda) * b` for image
/// and label. `lambda = 1` reproduces `a` bit-exactly.
pub fn mix_pair(
    a: (&Image, ArrayView1<f64>),
    b: (&Image, ArrayView1<f64>),
    lambda: f64,
) -> Result<(Image, Array1<f64>), LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::InvalidParam(format!("mix coefficient {lambda} outside [0, 1]")));
    }
    if a.0.dims() != b.0.dims() {
        return Err(LossError::ShapeMismatch(format!(
            "mixup images {:?} vs {:?}",
            a.0.dims(),
            b.0.dims()
        )));
    }
    if a.1.len() != b.1.len() {
        return Err(LossError::ShapeMismatch(format!(
            "mixup labels {} vs {}",
            a.1.len(),
            b.1.len()
        )));
    }
    let pixels = a.0.pixels.mapv(|v| v * lambda) + &b.0.pixels.mapv(|v| v * (1.0 - lambda));
    let label = a.1.mapv(|v| v * lambda) + &b.1.mapv(|v| v * (1.0 - lambda));
    Ok((Image::new(pixels), label))
}

/// Mixup with `lambda ~ Beta(alpha, alpha)` folded to `max(lambda, 1-lambda)`,
/// so the output stays closer to `a`.
pub fn mixup(
    a: (&Image, ArrayView1<f64>),
    b: (&Image, ArrayView1<f64>),
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<(Image, Array1<f64>), LossError> {
    let lambda = draw_mix_lambda(alpha, rng)?;
    mix_pair(a, b, lambda)
}

pub(crate) fn draw_mix_lambda(alpha: f64, rng: &mut dyn RngCore) -> Result<f64, LossError> {
    if !(alpha > 0.0) {
        return Err(LossError::InvalidParam(format!("Beta parameter {alpha} must be positive")));
    }
    let beta =
        Beta::new(alpha, alpha).map_err(|e| LossError::InvalidParam(format!("Beta: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    Ok(lambda.max(1.0 - lambda))
}

/// Forward KL from the detached target to the transformed prediction,
/// with the prediction floored at [`PROB_FLOOR`].
pub fn consistency_loss(
    p_target: &Array1<f64>,
    p_trans: &Array1<f64>,
) -> Result<f64, LossError> {
    if p_target.len() != p_trans.len() {
        return Err(LossError::ShapeMismatch(format!(
            "consistency {} vs {}",
            p_target.len(),
            p_trans.len()
        )));
    }
    check_simplex(p_target.view(), "consistency target")?;
    check_simplex(p_trans.view(), "consistency prediction")?;
    let kl = p_target
        .iter()
        .zip(p_trans.iter())
        .map(|(&q, &p)| if q > 0.0 { q * (q / p.max(PROB_FLOOR)).ln() } else { 0.0 })
        .sum();
    Ok(kl)
}

/// Mean squared error between predicted and sampled transform encodings,
/// averaged over batch and components.
pub fn aet_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64, LossError> {
    if pred.dim() != target.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "regression {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Combines raw terms under the given weights. Rejects non-finite or
/// genuinely negative terms; rounds floating-point dust up to zero so every
/// reported term is nonnegative.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let clean = |name: String, v: f64| -> Result<f64, LossError> {
        if !v.is_finite() {
            return Err(LossError::NonFinite(format!("{name} = {v}")));
        }
        if v < -1e-9 {
            return Err(LossError::NonFinite(format!("{name} = {v} is negative")));
        }
        Ok(v.max(0.0))
    };
    let l_labeled = clean("labeled".into(), terms.l_labeled)?;
    let l_unlabeled = clean("unlabeled".into(), terms.l_unlabeled)?;
    let mut l_aet = [0.0; 5];
    let mut l_cl = [0.0; 5];
    for k in 0..5 {
        l_aet[k] = clean(format!("aet[{k}]"), terms.l_aet[k])?;
        l_cl[k] = clean(format!("cl[{k}]"), terms.l_cl[k])?;
    }
    let total = l_labeled
        + weights.lambda_u * l_unlabeled
        + l_aet.iter().zip(&weights.lambda_aet).map(|(l, w)| l * w).sum::<f64>()
        + weights.gamma * l_cl.iter().sum::<f64>();
    Ok(LossBreakdown {
        l_labeled,
        l_unlabeled,
        l_aet,
        l_cl,
        weights_applied: weights.clone(),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(c: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let mut p = Array1::from_shape_fn(c, |_| rng.random_range(0.01..1.0));
        let s = p.sum();
        p /= s;
        p
    }

    fn entropy(p: &Array1<f64>) -> f64 {
        -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
    }

    #[test]
    fn sharpen_uniform_is_fixed_point() {
        let p = arr1(&[0.25, 0.25, 0.25, 0.25]);
        for t in [0.25, 0.5, 1.0, 2.0] {
            let q = sharpen(&p, t).unwrap();
            for &v in q.iter() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sharpen_at_unit_temperature_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = random_simplex(5, &mut rng);
            let q = sharpen(&p, 1.0).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sharpen_hand_computed_value() {
        let q = sharpen(&arr1(&[0.5, 0.25, 0.25]), 0.5).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, e) in q.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn sharpen_rejects_bad_inputs() {
        let p = arr1(&[0.5, 0.5]);
        assert!(matches!(sharpen(&p, 0.0), Err(LossError::BadTemperature(_))));
        assert!(matches!(sharpen(&p, -1.0), Err(LossError::BadTemperature(_))));
        assert!(matches!(
            sharpen(&arr1(&[0.5, 0.2]), 0.5),
            Err(LossError::NotSimplex(_))
        ));
        assert!(matches!(
            sharpen(&arr1(&[1.5, -0.5]), 0.5),
            Err(LossError::NotSimplex(_))
        ));
    }

    #[test]
    fn sharpen_keeps_argmax_and_never_raises_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..200 {
            let p = random_simplex(4, &mut rng);
            let t = [0.25, 0.5, 0.9][i % 3];
            let q = sharpen(&p, t).unwrap();
            let argmax = |v: &Array1<f64>| {
                v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
            };
            assert_eq!(argmax(&p), argmax(&q));
            assert!(entropy(&q) <= entropy(&p) + 1e-12);
            assert!((q.sum() - 1.0).abs() < 1e-12);
        }
    }

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn((4, 5, 3), |_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn mix_at_one_returns_first_argument_exactly() {
        let a = test_image(1);
        let b = test_image(2);
        let ya = arr1(&[1.0, 0.0]);
        let yb = arr1(&[0.0, 1.0]);
        let (img, y) = mix_pair((&a, ya.view()), (&b, yb.view()), 1.0).unwrap();
        assert_eq!(img.pixels, a.pixels);
        assert_eq!(y, ya);
    }

    #[test]
    fn mix_hand_computed_blend() {
        let a = test_image(3);
        let b = test_image(4);
        let ya = arr1(&[1.0, 0.0]);
        let yb = arr1(&[0.25, 0.75]);
        // The folded coefficient for a raw draw of 0.3 is 0.7.
        let (img, y) = mix_pair((&a, ya.view()), (&b, yb.view()), 0.7).unwrap();
        for ((&m, &pa), &pb) in img.pixels.iter().zip(a.pixels.iter()).zip(b.pixels.iter()) {
            assert!((m - (0.7 * pa + 0.3 * pb)).abs() < 1e-12);
        }
        assert!((y[0] - (0.7 + 0.3 * 0.25)).abs() < 1e-12);
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixup_stays_convex_and_close_to_first() {
        let ones = Image::constant(3, 3, 1, 1.0);
        let zeros = Image::constant(3, 3, 1, 0.0);
        let ya = arr1(&[1.0, 0.0]);
        let yb = arr1(&[0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen_below_90 = false;
        for _ in 0..500 {
            let (img, y) =
                mixup((&ones, ya.view()), (&zeros, yb.view()), 0.75, &mut rng).unwrap();
            let lambda = img.pixels[[0, 0, 0]];
            assert!((0.5..=1.0).contains(&lambda), "folded coefficient {lambda}");
            assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((y.sum() - 1.0).abs() < 1e-12);
            assert!((y[0] - lambda).abs() < 1e-12);
            if lambda < 0.9 {
                seen_below_90 = true;
            }
        }
        assert!(seen_below_90, "Beta(0.75, 0.75) should not collapse to 1");
    }

    #[test]
    fn mixup_rejects_bad_alpha() {
        let a = test_image(6);
        let y = arr1(&[1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for alpha in [0.0, -1.0] {
            assert!(matches!(
                mixup((&a, y.view()), (&a, y.view()), alpha, &mut rng),
                Err(LossError::InvalidParam(_))
            ));
        }
    }

    #[test]
    fn consistency_hand_computed_values() {
        let zero = consistency_loss(&arr1(&[0.3, 0.7]), &arr1(&[0.3, 0.7])).unwrap();
        assert!(zero.abs() < 1e-12);

        let kl = consistency_loss(&arr1(&[1.0, 0.0]), &arr1(&[0.5, 0.5])).unwrap();
        assert!((kl - 2.0f64.ln()).abs() < 1e-12);

        let kl = consistency_loss(&arr1(&[0.5, 0.5]), &arr1(&[0.25, 0.75])).unwrap();
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expect).abs() < 1e-12);
    }

    #[test]
    fn consistency_nonnegative_and_zero_only_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let q = random_simplex(4, &mut rng);
            let p = random_simplex(4, &mut rng);
            let kl = consistency_loss(&q, &p).unwrap();
            assert!(kl >= 0.0);
            let close = q.iter().zip(p.iter()).all(|(a, b)| (a - b).abs() < 1e-9);
            if !close {
                assert!(kl > 0.0);
            }
        }
        assert!(matches!(
            consistency_loss(&arr1(&[0.5, 0.6]), &arr1(&[0.5, 0.5])),
            Err(LossError::NotSimplex(_))
        ));
    }

    #[test]
    fn regression_loss_basics() {
        let t = arr2(&[[0.1, -0.2], [0.3, 0.4]]);
        assert_eq!(aet_loss(&t, &t).unwrap(), 0.0);

        let shifted = &t + 1.0;
        assert!((aet_loss(&shifted, &t).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = arr2(&[[rng.random_range(-1.0..1.0), rng.random()], [rng.random(), 0.5]]);
        let sym_ab = aet_loss(&a, &t).unwrap();
        let sym_ba = aet_loss(&t, &a).unwrap();
        assert!((sym_ab - sym_ba).abs() < 1e-12);
        let d = &a - &t;
        let double = aet_loss(&(&t + &(&d * 2.0)), &t).unwrap();
        assert!((double - 4.0 * sym_ab).abs() < 1e-9);

        assert!(matches!(
            aet_loss(&t, &arr2(&[[0.0, 0.0, 0.0]])),
            Err(LossError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn total_collapses_to_labeled_under_zero_weights() {
        let terms = LossTerms {
            l_labeled: 1.25,
            l_unlabeled: 0.5,
            l_aet: [0.1, 0.2, 0.3, 0.4, 0.5],
            l_cl: [0.5, 0.4, 0.3, 0.2, 0.1],
        };
        let w = LossWeights { lambda_u: 0.0, lambda_aet: [0.0; 5], gamma: 0.0 };
        let bd = total_loss(&terms, &w).unwrap();
        assert_eq!(bd.total, 1.25);
    }

    #[test]
    fn total_matches_hand_summed_combination() {
        let terms = LossTerms {
            l_labeled: 0.9,
            l_unlabeled: 0.04,
            l_aet: [0.5, 0.6, 0.7, 0.8, 0.9],
            l_cl: [0.05, 0.04, 0.03, 0.02, 0.01],
        };
        let w = LossWeights::default();
        let bd = total_loss(&terms, &w).unwrap();
        let expect = 0.9
            + 25.0 * 0.04
            + (1.0 * 0.5 + 0.75 * 0.6 + 0.5 * 0.7 + 0.2 * 0.8 + 0.05 * 0.9)
            + 0.2 * (0.05 + 0.04 + 0.03 + 0.02 + 0.01);
        assert!((bd.total - expect).abs() < 1e-6);
        assert_eq!(bd.weights_applied, w);
    }

    #[test]
    fn total_is_linear_in_the_terms() {
        let terms = LossTerms {
            l_labeled: 0.3,
            l_unlabeled: 0.7,
            l_aet: [0.1, 0.0, 0.2, 0.05, 0.4],
            l_cl: [0.0, 0.3, 0.1, 0.2, 0.6],
        };
        let w = LossWeights { lambda_u: 3.0, lambda_aet: [1.0, 0.75, 0.5, 0.2, 0.05], gamma: 0.2 };
        let one = total_loss(&terms, &w).unwrap().total;
        let mut doubled = terms.clone();
        doubled.l_labeled *= 2.0;
        doubled.l_unlabeled *= 2.0;
        for k in 0..5 {
            doubled.l_aet[k] *= 2.0;
            doubled.l_cl[k] *= 2.0;
        }
        let two = total_loss(&doubled, &w).unwrap().total;
        assert!((two - 2.0 * one).abs() < 1e-9);

        // Bumping a single raw term moves the total by exactly its weight.
        let mut bumped = terms.clone();
        bumped.l_aet[2] += 1.0;
        let moved = total_loss(&bumped, &w).unwrap().total;
        assert!((moved - one - w.lambda_aet[2]).abs() < 1e-9);
    }

    #[test]
    fn total_rejects_nan_with_the_term_name() {
        let mut terms = LossTerms::default();
        terms.l_cl[3] = f64::NAN;
        let err = total_loss(&terms, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("cl[3]"), "{err}");

        let mut terms = LossTerms::default();
        terms.l_unlabeled = -0.5;
        assert!(total_loss(&terms, &LossWeights::default()).is_err());
    }
}
