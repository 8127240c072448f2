//! Differentiable assembly of the per-step objective.
//!
//! The step is split in two. [`prepare_step`] runs everything that must not
//! carry gradient: batch mixing, label guessing, transform sampling and
//! target encoding. [`build_loss_graph`] is then a deterministic function of
//! the parameters given that prepared data, which is what the backward pass
//! differentiates and what finite-difference checks probe.

use ndarray::{s, Array1, Array2};
use rand::RngCore;

use super::{
    mixmatch_batch, total_loss, LossBreakdown, LossError, LossTerms, LossWeights, MixedBatch,
    StepConfig, PROB_FLOOR,
};
use crate::autodiff::{NodeId, Tape};
use crate::data::{to_model_input, ChannelStats};
use crate::model::{Forward, ForwardMode, ModelState, PendingBnUpdate};
use crate::transforms::{builtin_families, Image};

/// Mean cross-entropy `-1/N sum(targets * log_probs)` over rows.
pub fn cross_entropy_graph(
    tape: &mut Tape,
    log_probs: NodeId,
    targets: &Array2<f64>,
) -> Result<NodeId, LossError> {
    if tape.value(log_probs).shape() != targets.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "cross-entropy {:?} vs {:?}",
            tape.value(log_probs).shape(),
            targets.shape()
        )));
    }
    let n = targets.nrows() as f64;
    let t = tape.constant(targets.clone().into_dyn());
    let prod = tape.mul(log_probs, t);
    let total = tape.sum_all(prod);
    Ok(tape.scale(total, -1.0 / n))
}

/// Mean over rows of the squared L2 distance between probability rows and
/// target rows (summed over classes).
pub fn l2_prob_graph(
    tape: &mut Tape,
    probs: NodeId,
    targets: &Array2<f64>,
) -> Result<NodeId, LossError> {
    if tape.value(probs).shape() != targets.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "squared-distance {:?} vs {:?}",
            tape.value(probs).shape(),
            targets.shape()
        )));
    }
    let n = targets.nrows() as f64;
    let t = tape.constant(targets.clone().into_dyn());
    let d = tape.sub(probs, t);
    let sq = tape.mul(d, d);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / n))
}

/// Mean squared error between a prediction node and constant targets.
pub fn aet_loss_graph(
    tape: &mut Tape,
    pred: NodeId,
    targets: &Array2<f64>,
) -> Result<NodeId, LossError> {
    if tape.value(pred).shape() != targets.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "regression {:?} vs {:?}",
            tape.value(pred).shape(),
            targets.shape()
        )));
    }
    let t = tape.constant(targets.clone().into_dyn());
    let d = tape.sub(pred, t);
    let sq = tape.mul(d, d);
    Ok(tape.mean_all(sq))
}

/// KL from constant target rows to predicted probability rows, summed over
/// rows and divided by `denom`. All-zero target rows contribute nothing,
/// which is how non-consistency rows of a mixed batch are masked out.
pub fn consistency_loss_graph(
    tape: &mut Tape,
    targets: &Array2<f64>,
    probs: NodeId,
    denom: usize,
) -> Result<NodeId, LossError> {
    if tape.value(probs).shape() != targets.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "consistency {:?} vs {:?}",
            tape.value(probs).shape(),
            targets.shape()
        )));
    }
    if denom == 0 {
        return Err(LossError::InvalidParam("consistency denominator is zero".into()));
    }
    let floored = tape.clamp_min(probs, PROB_FLOOR);
    let logp = tape.ln(floored);
    let t = tape.constant(targets.clone().into_dyn());
    let cross = tape.mul(t, logp);
    let total = tape.sum_all(cross);
    let scaled = tape.scale(total, -1.0 / denom as f64);
    // The q*ln(q) part is constant; fold it in as a scalar shift.
    let entropy: f64 =
        targets.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum();
    Ok(tape.add_scalar(scaled, entropy / denom as f64))
}

/// One transformation family's share of a prepared step.
pub struct FamilyPlan {
    /// Decoder index, also the position of this family's weight.
    pub index: usize,
    /// Transformed version of every image in `aet_images`, in order.
    pub transformed: Vec<Image>,
    /// Encoded parameter targets, one row per image.
    pub targets: Array2<f64>,
}

/// Gradient-free half of a training step: mixed batches, guessed labels and
/// sampled transforms, all plain data.
pub struct PreparedStep {
    pub x_mixed: MixedBatch,
    pub u_mixed: MixedBatch,
    /// Sharpened guessed labels for the raw unlabeled images; the detached
    /// consistency targets.
    pub guesses: Array2<f64>,
    /// Images fed to the transform branches: the unlabeled batch, plus the
    /// labeled batch when configured.
    pub aet_images: Vec<Image>,
    /// Consistency applies to the first this-many rows of `aet_images`.
    pub num_unlabeled: usize,
    /// Skips disabled families and families whose regression and consistency
    /// weights are both zero.
    pub families: Vec<FamilyPlan>,
}

pub fn prepare_step(
    state: &ModelState,
    labeled: &[(&Image, usize)],
    unlabeled: &[&Image],
    cfg: &StepConfig,
    weights: &LossWeights,
    stats: &ChannelStats,
    data_rng: &mut dyn RngCore,
    transform_rng: &mut dyn RngCore,
) -> Result<PreparedStep, LossError> {
    weights.validate()?;
    let (x_mixed, u_mixed, guesses) =
        mixmatch_batch(state, labeled, unlabeled, &cfg.ssl, stats, data_rng)?;

    let mut aet_images: Vec<Image> = unlabeled.iter().map(|&im| im.clone()).collect();
    if cfg.aet_include_labeled {
        aet_images.extend(labeled.iter().map(|&(im, _)| im.clone()));
    }

    let mut families = Vec::new();
    for (k, family) in builtin_families().iter().enumerate() {
        if !cfg.families_enabled[k] || (weights.lambda_aet[k] == 0.0 && weights.gamma == 0.0) {
            continue;
        }
        let dof = family.dof();
        let mut transformed = Vec::with_capacity(aet_images.len());
        let mut targets = Array2::zeros((aet_images.len(), dof));
        for (i, img) in aet_images.iter().enumerate() {
            let t = family.sample(transform_rng);
            transformed.push(family.apply(img, &t)?);
            let encoded = family.target(&t)?;
            targets.row_mut(i).assign(&Array1::from_vec(encoded.values));
        }
        families.push(FamilyPlan { index: k, transformed, targets });
    }

    Ok(PreparedStep {
        x_mixed,
        u_mixed,
        guesses,
        aet_images,
        num_unlabeled: unlabeled.len(),
        families,
    })
}

/// The built objective: root node, per-term report, and the bookkeeping the
/// optimizer needs afterwards.
pub struct StepGraph {
    pub root: NodeId,
    pub breakdown: LossBreakdown,
    /// Tape leaf per parameter id; `None` if the pass never read it.
    pub param_nodes: Vec<Option<NodeId>>,
    pub bn_updates: Vec<PendingBnUpdate>,
}

pub fn build_loss_graph(
    state: &ModelState,
    tape: &mut Tape,
    prep: &PreparedStep,
    weights: &LossWeights,
    stats: &ChannelStats,
) -> Result<StepGraph, LossError> {
    weights.validate()?;
    let classes = state.config.num_classes;
    let mut fw = Forward::new(tape, state, ForwardMode::Train);

    let x_refs: Vec<&Image> = prep.x_mixed.inputs.iter().collect();
    let xin = fw.input(to_model_input(&x_refs, stats));
    let xfeat = fw.encode(xin);
    let xlogits = fw.classify_logits(xfeat);
    let xlog = fw.tape.log_softmax(xlogits);
    let ce = cross_entropy_graph(fw.tape, xlog, &prep.x_mixed.targets)?;

    let u_refs: Vec<&Image> = prep.u_mixed.inputs.iter().collect();
    let uin = fw.input(to_model_input(&u_refs, stats));
    let ufeat = fw.encode(uin);
    let ulogits = fw.classify_logits(ufeat);
    let uprobs = fw.tape.softmax(ulogits);
    let l2 = l2_prob_graph(fw.tape, uprobs, &prep.u_mixed.targets)?;

    let mut aet_nodes: [Option<NodeId>; 5] = [None; 5];
    let mut cl_nodes: [Option<NodeId>; 5] = [None; 5];
    if !prep.families.is_empty() {
        let orig_refs: Vec<&Image> = prep.aet_images.iter().collect();
        let oin = fw.input(to_model_input(&orig_refs, stats));
        let ofeat = fw.encode(oin);

        // Consistency targets for the whole transform batch: guessed labels
        // on the unlabeled rows, zero rows (masked) on any labeled tail.
        let mut cl_targets = Array2::zeros((prep.aet_images.len(), classes));
        cl_targets.slice_mut(s![..prep.num_unlabeled, ..]).assign(&prep.guesses);

        for plan in &prep.families {
            let t_refs: Vec<&Image> = plan.transformed.iter().collect();
            let tin = fw.input(to_model_input(&t_refs, stats));
            let tfeat = fw.encode(tin);

            let pred = fw.decode_transform(plan.index, ofeat, tfeat);
            aet_nodes[plan.index] = Some(aet_loss_graph(fw.tape, pred, &plan.targets)?);

            let tlogits = fw.classify_logits(tfeat);
            let tprobs = fw.tape.softmax(tlogits);
            cl_nodes[plan.index] =
                Some(consistency_loss_graph(fw.tape, &cl_targets, tprobs, prep.num_unlabeled)?);
        }
    }

    let mut weighted: Vec<(NodeId, f64)> = vec![(ce, 1.0), (l2, weights.lambda_u)];
    for k in 0..5 {
        if let Some(node) = aet_nodes[k] {
            weighted.push((node, weights.lambda_aet[k]));
        }
        if let Some(node) = cl_nodes[k] {
            weighted.push((node, weights.gamma));
        }
    }
    let root = fw.tape.weighted_sum(&weighted);
    let param_nodes = fw.take_param_nodes();
    let bn_updates = fw.take_bn_updates();

    let pick = |nodes: [Option<NodeId>; 5], tape: &Tape| {
        let mut out = [0.0; 5];
        for (slot, node) in out.iter_mut().zip(nodes) {
            if let Some(id) = node {
                *slot = tape.scalar(id);
            }
        }
        out
    };
    let terms = LossTerms {
        l_labeled: tape.scalar(ce),
        l_unlabeled: tape.scalar(l2),
        l_aet: pick(aet_nodes, tape),
        l_cl: pick(cl_nodes, tape),
    };
    let breakdown = total_loss(&terms, weights)?;
    debug_assert!(
        (tape.scalar(root) - breakdown.total).abs() < 1e-6,
        "graph total {} diverged from reported total {}",
        tape.scalar(root),
        breakdown.total
    );
    Ok(StepGraph { root, breakdown, param_nodes, bn_updates })
}

/// Convenience wrapper: prepare and build in one call.
#[allow(clippy::too_many_arguments)]
pub fn step_loss(
    state: &ModelState,
    tape: &mut Tape,
    labeled: &[(&Image, usize)],
    unlabeled: &[&Image],
    cfg: &StepConfig,
    weights: &LossWeights,
    stats: &ChannelStats,
    data_rng: &mut dyn RngCore,
    transform_rng: &mut dyn RngCore,
) -> Result<StepGraph, LossError> {
    let prep =
        prepare_step(state, labeled, unlabeled, cfg, weights, stats, data_rng, transform_rng)?;
    build_loss_graph(state, tape, &prep, weights, stats)
}
