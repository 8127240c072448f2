//! The training session: batch cycling, the per-step update, periodic
//! evaluation, and checkpointing. Everything downstream of the seed is
//! single-threaded and deterministic; a resumed session continues the RNG
//! streams and batch order exactly where the checkpoint left them.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{to_model_input, ChannelStats, DatasetSplit};
use crate::losses::{step_loss, LossBreakdown, LossWeights};
use crate::model::{init_model, ModelState};
use crate::transforms::Image;

use super::optim::{adam_step, cosine_lr, ema_update, ramp_weight, sgd_momentum_step, AdamParams};
use super::{MetricsRecord, TrainConfig, TrainError};

/// Seed streams: 0 initializes parameters, 1 drives batch order and data
/// augmentation, 2 drives transform sampling.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One evaluation outcome, kept in order so the report can average the
/// trailing window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub epoch: usize,
    pub student_error: f64,
    pub teacher_error: f64,
}

/// Endless shuffled pass over pool indices; reshuffles whenever a pass is
/// exhausted, so batches repeat elements only across passes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Cycler {
    perm: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        // pos == n forces a shuffle on the first draw.
        Self { perm: (0..n).collect(), pos: n }
    }

    fn draw(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos >= self.perm.len() {
                self.perm.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Serialized alongside the model in a checkpoint; restoring it makes the
/// continuation indistinguishable from a run that never stopped.
#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    data_rng: ChaCha8Rng,
    transform_rng: ChaCha8Rng,
    labeled_cycler: Cycler,
    unlabeled_cycler: Cycler,
    epoch: usize,
    eval_history: Vec<EvalPoint>,
}

pub struct TrainSession {
    pub cfg: TrainConfig,
    pub state: ModelState,
    data_rng: ChaCha8Rng,
    transform_rng: ChaCha8Rng,
    labeled_cycler: Cycler,
    unlabeled_cycler: Cycler,
    epoch: usize,
    pub eval_history: Vec<EvalPoint>,
    steps_per_epoch: u64,
    total_steps: u64,
    ramp_steps: u64,
    started: Instant,
}

fn check_split(split: &DatasetSplit) -> Result<(usize, usize, usize), TrainError> {
    let bad = |msg: String| Err(TrainError::BadSplit(msg));
    if split.labeled.is_empty() || split.unlabeled.is_empty() || split.test.is_empty() {
        return bad("labeled, unlabeled and test pools must all be non-empty".into());
    }
    if split.num_classes < 2 {
        return bad(format!("need at least two classes, got {}", split.num_classes));
    }
    let dims = split.labeled[0].0.dims();
    let all = split
        .labeled
        .iter()
        .map(|(im, _)| im)
        .chain(split.unlabeled.iter())
        .chain(split.test.iter().map(|(im, _)| im));
    for im in all {
        if im.dims() != dims {
            return bad(format!("mixed image shapes {:?} vs {dims:?}", im.dims()));
        }
    }
    for (_, y) in split.labeled.iter().chain(split.test.iter()) {
        if *y >= split.num_classes {
            return bad(format!("label {y} out of range for {} classes", split.num_classes));
        }
    }
    Ok(dims)
}

impl TrainSession {
    pub fn new(cfg: TrainConfig, split: &DatasetSplit) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (h, w, c) = check_split(split)?;
        let model_cfg = cfg.model_config(c, split.num_classes, (h, w));
        let mut init_rng = stream_rng(cfg.seed, 0);
        let state = init_model(&model_cfg, &mut init_rng)?;
        let steps_per_epoch = (split.unlabeled.len() / cfg.batch_size).max(1) as u64;
        let total_steps = steps_per_epoch * cfg.epochs as u64;
        let ramp_steps = if cfg.ramp_steps > 0 { cfg.ramp_steps } else { (total_steps / 10).max(1) };
        Ok(Self {
            data_rng: stream_rng(cfg.seed, 1),
            transform_rng: stream_rng(cfg.seed, 2),
            labeled_cycler: Cycler::new(split.labeled.len()),
            unlabeled_cycler: Cycler::new(split.unlabeled.len()),
            epoch: 0,
            eval_history: Vec::new(),
            steps_per_epoch,
            total_steps,
            ramp_steps,
            started: Instant::now(),
            cfg,
            state,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn ramp_steps(&self) -> u64 {
        self.ramp_steps
    }

    /// Regularizer weights for an optimization step, all on one shared ramp.
    pub fn weights_at(&self, step: u64) -> LossWeights {
        let max = self.cfg.max_weights();
        LossWeights {
            lambda_u: ramp_weight(step, max.lambda_u, self.ramp_steps),
            lambda_aet: max.lambda_aet.map(|w| ramp_weight(step, w, self.ramp_steps)),
            gamma: ramp_weight(step, max.gamma, self.ramp_steps),
        }
    }

    /// One optimization step: sample batches, build the loss, backpropagate,
    /// apply the split optimizer, fold batchnorm statistics, then move the
    /// teacher. The step counter advances last.
    pub fn train_step(&mut self, split: &DatasetSplit) -> Result<LossBreakdown, TrainError> {
        let step = self.state.step_counter;
        let labeled_idx = self.labeled_cycler.draw(self.cfg.batch_size, &mut self.data_rng);
        let unlabeled_idx = self.unlabeled_cycler.draw(self.cfg.batch_size, &mut self.data_rng);
        let labeled: Vec<(&Image, usize)> = labeled_idx
            .iter()
            .map(|&i| {
                let (im, y) = &split.labeled[i];
                (im, *y)
            })
            .collect();
        let unlabeled: Vec<&Image> = unlabeled_idx.iter().map(|&i| &split.unlabeled[i]).collect();

        let weights = self.weights_at(step);
        let step_cfg = self.cfg.step_config();
        let mut tape = Tape::new();
        let graph = step_loss(
            &self.state,
            &mut tape,
            &labeled,
            &unlabeled,
            &step_cfg,
            &weights,
            &split.stats,
            &mut self.data_rng,
            &mut self.transform_rng,
        )?;
        let grads = tape.backward(graph.root);
        drop(tape);

        self.state.opt.adam_steps += 1;
        let t = self.state.opt.adam_steps;
        let adam = AdamParams::with_lr(self.cfg.lr_enc_cls);
        let lr_dec = cosine_lr(step, self.total_steps, self.cfg.lr_dec_init, self.cfg.lr_dec_final);
        {
            let ModelState { params, opt, net, .. } = &mut self.state;
            for (id, node) in graph.param_nodes.iter().enumerate() {
                let Some(node) = node else { continue };
                let Some(g) = grads.get(*node) else { continue };
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFinite(
                        format!("gradient of {}", params.names[id]),
                        step,
                    ));
                }
                if id < net.teacher_len {
                    adam_step(
                        &mut params.values[id],
                        &mut opt.adam_m[id],
                        &mut opt.adam_v[id],
                        g,
                        &adam,
                        t,
                    );
                } else {
                    sgd_momentum_step(
                        &mut params.values[id],
                        &mut opt.momentum[id],
                        g,
                        lr_dec,
                        self.cfg.momentum_dec,
                        self.cfg.weight_decay_dec,
                    );
                }
            }
        }
        self.state.apply_bn_updates(graph.bn_updates);
        let teacher_len = self.state.net.teacher_len;
        {
            let ModelState { teacher, params, .. } = &mut self.state;
            ema_update(teacher, &params.values[..teacher_len], self.cfg.ema_alpha)?;
        }
        self.state.step_counter += 1;
        Ok(graph.breakdown)
    }

    /// Runs one epoch of steps and, when due, an evaluation. Emits one
    /// record per step and one per evaluation; `step` counts completed
    /// optimization steps, so both record kinds are monotone in it.
    pub fn run_epoch(
        &mut self,
        split: &DatasetSplit,
        on_record: &mut dyn FnMut(&MetricsRecord) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        if self.epoch >= self.cfg.epochs {
            return Ok(());
        }
        for _ in 0..self.steps_per_epoch {
            let breakdown = self.train_step(split)?;
            on_record(&MetricsRecord {
                step: self.state.step_counter,
                epoch: self.epoch,
                loss: Some(breakdown),
                student_error: None,
                teacher_error: None,
                wall_time: self.started.elapsed().as_secs_f64(),
            })?;
        }
        let completed = self.epoch + 1;
        if completed % self.cfg.eval_every == 0 || completed == self.cfg.epochs {
            let student = evaluate(&self.state, &split.test, &split.stats, false)?;
            let teacher = evaluate(&self.state, &split.test, &split.stats, true)?;
            self.eval_history.push(EvalPoint {
                step: self.state.step_counter,
                epoch: self.epoch,
                student_error: student,
                teacher_error: teacher,
            });
            on_record(&MetricsRecord {
                step: self.state.step_counter,
                epoch: self.epoch,
                loss: None,
                student_error: Some(student),
                teacher_error: Some(teacher),
                wall_time: self.started.elapsed().as_secs_f64(),
            })?;
        }
        self.epoch = completed;
        Ok(())
    }

    pub fn run_to_end(
        &mut self,
        split: &DatasetSplit,
        on_record: &mut dyn FnMut(&MetricsRecord) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(split, on_record)?;
        }
        Ok(())
    }

    /// Mean teacher error over the trailing `last_k_report` evaluations.
    pub fn reported_error(&self) -> Option<f64> {
        self.tail_mean(|p| p.teacher_error)
    }

    pub fn reported_student_error(&self) -> Option<f64> {
        self.tail_mean(|p| p.student_error)
    }

    fn tail_mean(&self, pick: impl Fn(&EvalPoint) -> f64) -> Option<f64> {
        if self.eval_history.is_empty() {
            return None;
        }
        let k = self.cfg.last_k_report.min(self.eval_history.len());
        let tail = &self.eval_history[self.eval_history.len() - k..];
        Some(tail.iter().map(pick).sum::<f64>() / k as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let meta = TrainerMeta {
            data_rng: self.data_rng.clone(),
            transform_rng: self.transform_rng.clone(),
            labeled_cycler: self.labeled_cycler.clone(),
            unlabeled_cycler: self.unlabeled_cycler.clone(),
            epoch: self.epoch,
            eval_history: self.eval_history.clone(),
        };
        let extra = serde_json::json!({
            "train_config": self.cfg,
            "trainer": meta,
        });
        self.state.save_checkpoint(path, extra)?;
        Ok(())
    }

    /// Restores a session from a checkpoint written by `save`. The dataset
    /// must be the one the original run used; geometry and pool sizes are
    /// checked against the stored state.
    pub fn resume(split: &DatasetSplit, path: &Path) -> Result<Self, TrainError> {
        let (state, extra) = ModelState::load_checkpoint(path)?;
        let cfg: TrainConfig = serde_json::from_value(extra["train_config"].clone())
            .map_err(|e| TrainError::BadResume(format!("train_config: {e}")))?;
        let meta: TrainerMeta = serde_json::from_value(extra["trainer"].clone())
            .map_err(|e| TrainError::BadResume(format!("trainer state: {e}")))?;
        cfg.validate()?;
        let (h, w, c) = check_split(split)?;
        let model_cfg = cfg.model_config(c, split.num_classes, (h, w));
        if model_cfg != state.config {
            return Err(TrainError::BadResume(format!(
                "checkpoint model {:?} does not match the dataset ({:?})",
                state.config, model_cfg
            )));
        }
        if meta.labeled_cycler.perm.len() != split.labeled.len()
            || meta.unlabeled_cycler.perm.len() != split.unlabeled.len()
        {
            return Err(TrainError::BadResume("dataset pool sizes changed".into()));
        }
        if meta.epoch > cfg.epochs {
            return Err(TrainError::BadResume(format!(
                "checkpoint is {} epochs in but the config stops at {}",
                meta.epoch, cfg.epochs
            )));
        }
        let steps_per_epoch = (split.unlabeled.len() / cfg.batch_size).max(1) as u64;
        let total_steps = steps_per_epoch * cfg.epochs as u64;
        let ramp_steps = if cfg.ramp_steps > 0 { cfg.ramp_steps } else { (total_steps / 10).max(1) };
        Ok(Self {
            data_rng: meta.data_rng,
            transform_rng: meta.transform_rng,
            labeled_cycler: meta.labeled_cycler,
            unlabeled_cycler: meta.unlabeled_cycler,
            epoch: meta.epoch,
            eval_history: meta.eval_history,
            steps_per_epoch,
            total_steps,
            ramp_steps,
            started: Instant::now(),
            cfg,
            state,
        })
    }
}

/// Error fraction of the argmax prediction over a labeled set; ties go to
/// the lowest class index, so an untrained uniform classifier always picks
/// class 0.
pub fn evaluate(
    state: &ModelState,
    test: &[(Image, usize)],
    stats: &ChannelStats,
    use_teacher: bool,
) -> Result<f64, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let mut wrong = 0usize;
    for chunk in test.chunks(64) {
        let refs: Vec<&Image> = chunk.iter().map(|(im, _)| im).collect();
        let x = to_model_input(&refs, stats);
        let probs = state
            .predict_probs(x, use_teacher)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("class probabilities are a matrix");
        for (row, (_, label)) in probs.outer_iter().zip(chunk) {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            if best != *label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / test.len() as f64)
}

pub struct TrainOutput {
    pub session: TrainSession,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs a full training session and collects the metrics stream in memory.
pub fn train(cfg: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutput, TrainError> {
    let mut session = TrainSession::new(cfg.clone(), split)?;
    let mut metrics = Vec::new();
    session.run_to_end(split, &mut |r| {
        metrics.push(r.clone());
        Ok(())
    })?;
    Ok(TrainOutput { session, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, split_labels, SyntheticConfig};
    use crate::model::ModelConfig;

    /// 8x8 single-channel shapes with a [2,2,2,2,2] net keep every test in
    /// the millisecond range.
    fn tiny_split(train_per_class: usize, test_per_class: usize, n_labels: usize) -> DatasetSplit {
        let cfg = SyntheticConfig {
            num_classes: 4,
            height: 8,
            width: 8,
            channels: 1,
            train_per_class,
            test_per_class,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let full = make_synthetic(&cfg, &mut rng).unwrap();
        split_labels(&full, n_labels, 5).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            lambda_u_max: 1.0,
            lambda_k: [0.1; 5],
            gamma: 0.05,
            k_augment: 1,
            labels_per_class: 1,
            widths: [2, 2, 2, 2, 2],
            eval_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_weight_step_leaves_decoders_untouched() {
        let split = tiny_split(3, 2, 4);
        let cfg = TrainConfig {
            lambda_k: [0.0; 5],
            gamma: 0.0,
            epochs: 1,
            ..tiny_cfg()
        };
        let mut session = TrainSession::new(cfg, &split).unwrap();
        let n = session.state.net.teacher_len;
        let before: Vec<_> =
            session.state.params.values[n..].iter().map(|v| v.as_ref().clone()).collect();
        for _ in 0..3 {
            let breakdown = session.train_step(&split).unwrap();
            assert_eq!(breakdown.l_aet, [0.0; 5]);
            assert_eq!(breakdown.l_cl, [0.0; 5]);
        }
        for (b, a) in before.iter().zip(&session.state.params.values[n..]) {
            assert_eq!(b, a.as_ref(), "decoder weights moved without any AET/CL signal");
        }
        for m in &session.state.opt.momentum[n..] {
            assert!(m.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn overfitting_one_tiny_batch_drops_the_loss() {
        // Pools the size of one batch make every step see the same images.
        let split = tiny_split(2, 2, 4);
        assert_eq!(split.labeled.len(), 4);
        assert_eq!(split.unlabeled.len(), 4);
        let cfg = TrainConfig {
            epochs: 20,
            lambda_u_max: 0.0,
            lambda_k: [0.0; 5],
            gamma: 0.0,
            augment: false,
            lr_enc_cls: 0.05,
            ..tiny_cfg()
        };
        let mut session = TrainSession::new(cfg, &split).unwrap();
        assert_eq!(session.steps_per_epoch(), 1);
        let mut totals = Vec::new();
        for _ in 0..20 {
            totals.push(session.train_step(&split).unwrap().total);
        }
        let (first, last) = (totals[0], totals[19]);
        assert!(
            last <= 0.7 * first,
            "loss should drop at least 30% on a memorized batch: {totals:?}"
        );
    }

    #[test]
    fn recorded_weights_follow_the_shared_ramp_exactly() {
        let split = tiny_split(6, 2, 4);
        let cfg = TrainConfig { epochs: 3, ramp_steps: 7, ..tiny_cfg() };
        let mut session = TrainSession::new(cfg.clone(), &split).unwrap();
        let mut records = Vec::new();
        session
            .run_to_end(&split, &mut |r| {
                records.push(r.clone());
                Ok(())
            })
            .unwrap();
        let mut saw_step = 0u64;
        for r in &records {
            if let Some(loss) = &r.loss {
                assert_eq!(r.step, saw_step + 1, "step records count completed steps");
                saw_step = r.step;
                let w = &loss.weights_applied;
                let s = r.step - 1;
                assert_eq!(w.lambda_u, ramp_weight(s, cfg.lambda_u_max, 7));
                assert_eq!(w.gamma, ramp_weight(s, cfg.gamma, 7));
                for (i, &v) in w.lambda_aet.iter().enumerate() {
                    assert_eq!(v, ramp_weight(s, cfg.lambda_k[i], 7));
                }
            } else {
                assert_eq!(r.step, saw_step, "evaluations happen between steps");
                let s = r.student_error.unwrap();
                let t = r.teacher_error.unwrap();
                assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t));
            }
        }
        assert!(saw_step > 0);
    }

    #[test]
    fn identical_seeds_give_bit_exact_metric_streams() {
        let split = tiny_split(4, 2, 4);
        let cfg = tiny_cfg();
        let a = train(&cfg, &split).unwrap();
        let b = train(&cfg, &split).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.deterministic_view(), y.deterministic_view());
        }
        // And the resulting parameters agree bit for bit.
        for (p, q) in a.session.state.params.values.iter().zip(&b.session.state.params.values) {
            assert_eq!(p.as_ref(), q.as_ref());
        }
    }

    #[test]
    fn teacher_moves_only_through_the_ema_rule() {
        let split = tiny_split(4, 2, 4);
        let mut session = TrainSession::new(tiny_cfg(), &split).unwrap();
        session.train_step(&split).unwrap();
        let alpha = session.cfg.ema_alpha;
        let before: Vec<_> = session.state.teacher.iter().map(|t| t.as_ref().clone()).collect();
        session.train_step(&split).unwrap();
        for (id, prev) in before.iter().enumerate() {
            let student = &session.state.params.values[id];
            let teacher = &session.state.teacher[id];
            for ((t, p), s) in teacher.iter().zip(prev.iter()).zip(student.iter()) {
                let expected = alpha * p + (1.0 - alpha) * s;
                assert_eq!(*t, expected, "teacher slot {id} not a pure EMA of the student");
            }
        }
    }

    #[test]
    fn epochs_zero_returns_initialization_and_no_records() {
        let split = tiny_split(3, 2, 4);
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = train(&cfg, &split).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.session.state.step_counter, 0);
        assert!(out.session.eval_history.is_empty());
        for (p, t) in out.session.state.params.values.iter().zip(&out.session.state.teacher) {
            assert_eq!(p.as_ref(), t.as_ref());
        }
    }

    #[test]
    fn evaluate_covers_both_endpoints_and_rejects_empty() {
        // An untrained model has a zeroed classifier head: probabilities are
        // uniform and the argmax tie-break always lands on class 0. On a
        // balanced 10-class set that scores exactly 90% error.
        let mc = ModelConfig {
            input_channels: 1,
            num_classes: 10,
            image_hw: (8, 8),
            stem_stride: 1,
            widths: [2, 2, 2, 2, 2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = init_model(&mc, &mut rng).unwrap();
        let shapes = tiny_split(2, 2, 4);
        let image = shapes.test[0].0.clone();
        let balanced: Vec<(Image, usize)> =
            (0..30).map(|i| (image.clone(), i % 10)).collect();
        let stats = shapes.stats.clone();
        let err = evaluate(&state, &balanced, &stats, false).unwrap();
        assert_eq!(err, 0.9);

        // Relabeling every image with the model's own prediction is the
        // perfect-oracle case.
        let split = tiny_split(2, 3, 4);
        let mut session = TrainSession::new(tiny_cfg(), &split).unwrap();
        session.train_step(&split).unwrap();
        let relabeled: Vec<(Image, usize)> = split
            .test
            .iter()
            .map(|(im, _)| {
                let x = to_model_input(&[im], &split.stats);
                let p = session.state.predict_probs(x, false);
                let row = p.into_dimensionality::<ndarray::Ix2>().unwrap();
                let y = row
                    .row(0)
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                        if v > acc.1 {
                            (i, v)
                        } else {
                            acc
                        }
                    })
                    .0;
                (im.clone(), y)
            })
            .collect();
        assert_eq!(evaluate(&session.state, &relabeled, &split.stats, false).unwrap(), 0.0);

        assert!(matches!(
            evaluate(&session.state, &[], &split.stats, false),
            Err(TrainError::EmptyEval)
        ));
    }

    #[test]
    fn checkpoint_resume_continues_bit_identically() {
        let split = tiny_split(6, 2, 4);
        let cfg = TrainConfig { epochs: 4, ..tiny_cfg() };

        let uninterrupted = train(&cfg, &split).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first_half = TrainSession::new(cfg.clone(), &split).unwrap();
        let mut records = Vec::new();
        let mut sink = |r: &MetricsRecord| {
            records.push(r.clone());
            Ok(())
        };
        first_half.run_epoch(&split, &mut sink).unwrap();
        first_half.run_epoch(&split, &mut sink).unwrap();
        first_half.save(&path).unwrap();
        drop(first_half);

        let mut second_half = TrainSession::resume(&split, &path).unwrap();
        assert_eq!(second_half.epoch(), 2);
        second_half.run_to_end(&split, &mut sink).unwrap();

        assert_eq!(records.len(), uninterrupted.metrics.len());
        for (x, y) in records.iter().zip(&uninterrupted.metrics) {
            assert_eq!(x.deterministic_view(), y.deterministic_view());
        }
        let a = &uninterrupted.session.state;
        let b = &second_half.state;
        assert_eq!(a.step_counter, b.step_counter);
        for (p, q) in a.params.values.iter().zip(&b.params.values) {
            assert_eq!(p.as_ref(), q.as_ref(), "student diverged after resume");
        }
        for (p, q) in a.teacher.iter().zip(&b.teacher) {
            assert_eq!(p.as_ref(), q.as_ref(), "teacher diverged after resume");
        }
        for (p, q) in a.buffers.values.iter().zip(&b.buffers.values) {
            assert_eq!(p, q, "batchnorm buffers diverged after resume");
        }

        // Saving, loading, and re-evaluating must give the same error.
        let before = evaluate(&second_half.state, &split.test, &split.stats, true).unwrap();
        let path2 = dir.path().join("final.ckpt");
        second_half.save(&path2).unwrap();
        let reloaded = TrainSession::resume(&split, &path2).unwrap();
        let after = evaluate(&reloaded.state, &split.test, &split.stats, true).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn resume_rejects_a_mismatched_dataset() {
        let split = tiny_split(6, 2, 4);
        let cfg = TrainConfig { epochs: 2, ..tiny_cfg() };
        let mut session = TrainSession::new(cfg, &split).unwrap();
        let mut sink = |_: &MetricsRecord| Ok(());
        session.run_epoch(&split, &mut sink).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        session.save(&path).unwrap();

        let other = tiny_split(5, 2, 4);
        assert!(matches!(
            TrainSession::resume(&other, &path),
            Err(TrainError::BadResume(_))
        ));
    }

    #[test]
    fn reported_error_averages_the_trailing_window() {
        let split = tiny_split(3, 2, 4);
        let mut session =
            TrainSession::new(TrainConfig { last_k_report: 2, ..tiny_cfg() }, &split).unwrap();
        assert_eq!(session.reported_error(), None);
        for (i, t) in [0.5, 0.3, 0.1].iter().enumerate() {
            session.eval_history.push(EvalPoint {
                step: i as u64,
                epoch: i,
                student_error: 1.0,
                teacher_error: *t,
            });
        }
        assert!((session.reported_error().unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(session.reported_student_error().unwrap(), 1.0);
    }

    #[test]
    fn teacher_stays_close_to_student_on_a_long_toy_run() {
        // Several hundred steps give the EMA time to absorb the student;
        // the two ends of the run should then score nearly the same.
        let split = tiny_split(25, 25, 8);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 60,
            lambda_u_max: 2.0,
            lambda_k: [0.0; 5],
            gamma: 0.0,
            k_augment: 1,
            ema_alpha: 0.99,
            ..tiny_cfg()
        };
        let mut session = TrainSession::new(cfg, &split).unwrap();
        assert!(session.total_steps() >= 500, "toy run too short: {}", session.total_steps());
        for _ in 0..session.total_steps() {
            session.train_step(&split).unwrap();
        }
        let student = evaluate(&session.state, &split.test, &split.stats, false).unwrap();
        let teacher = evaluate(&session.state, &split.test, &split.stats, true).unwrap();
        assert!(
            (student - teacher).abs() <= 0.02 + 1e-12,
            "teacher error {teacher} strayed from student error {student}"
        );
    }
}
