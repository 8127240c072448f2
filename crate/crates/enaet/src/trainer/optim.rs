//! Parameter update rules. All of them mutate tensors in place through
//! `Rc::make_mut`, so aliases held by the teacher or a live tape never see
//! a partial update.

use std::rc::Rc;

use crate::autodiff::Tensor;

use super::TrainError;

/// Linear warmup: `max_weight * min(1, step / ramp_steps)`. Step 0 is the
/// first optimization step, so the very first batch sees weight 0.
pub fn ramp_weight(step: u64, max_weight: f64, ramp_steps: u64) -> f64 {
    if ramp_steps == 0 {
        return max_weight;
    }
    max_weight * (step as f64 / ramp_steps as f64).min(1.0)
}

/// Half-cosine decay from `lr_init` at step 0 to `lr_final` at
/// `total_steps`. Steps past the end hold the final rate.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_final: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update; `t` counts updates starting at 1.
pub fn adam_step(
    param: &mut Rc<Tensor>,
    m: &mut Tensor,
    v: &mut Tensor,
    grad: &Tensor,
    h: &AdamParams,
    t: u64,
) {
    debug_assert!(t >= 1, "Adam bias correction needs a 1-based step");
    let p = Rc::make_mut(param);
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    azip(p, m, v, grad, |p, m, v, g| {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    });
}

/// Classic momentum SGD with coupled weight decay:
/// `g = grad + wd * p; buf = mu * buf + g; p -= lr * buf`.
pub fn sgd_momentum_step(
    param: &mut Rc<Tensor>,
    buf: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let p = Rc::make_mut(param);
    debug_assert_eq!(p.shape(), grad.shape());
    debug_assert_eq!(p.shape(), buf.shape());
    for ((p, b), g) in p.iter_mut().zip(buf.iter_mut()).zip(grad.iter()) {
        let g = g + weight_decay * *p;
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
}

fn azip(
    p: &mut Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    g: &Tensor,
    f: impl Fn(&mut f64, &mut f64, &mut f64, f64),
) {
    debug_assert_eq!(p.shape(), g.shape());
    debug_assert_eq!(p.shape(), m.shape());
    debug_assert_eq!(p.shape(), v.shape());
    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter()) {
        f(p, m, v, *g);
    }
}

/// Exponential moving average: `teacher = alpha * teacher + (1 - alpha) *
/// student`, elementwise over every shadowed slot.
pub fn ema_update(
    teacher: &mut [Rc<Tensor>],
    student: &[Rc<Tensor>],
    alpha: f64,
) -> Result<(), TrainError> {
    if teacher.len() != student.len() {
        return Err(TrainError::EmaShape(format!(
            "{} teacher slots vs {} student slots",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        if t.shape() != s.shape() {
            return Err(TrainError::EmaShape(format!("{:?} vs {:?}", t.shape(), s.shape())));
        }
        let tv = Rc::make_mut(t);
        for (t, s) in tv.iter_mut().zip(s.iter()) {
            *t = alpha * *t + (1.0 - alpha) * s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rc(vals: &[f64]) -> Rc<Tensor> {
        Rc::new(Tensor::from_shape_vec(ndarray::IxDyn(&[vals.len()]), vals.to_vec()).unwrap())
    }

    #[test]
    fn ema_single_step_hand_value() {
        // teacher 0, student 1, alpha 0.999 leaves exactly 0.001.
        let mut teacher = vec![rc(&[0.0])];
        let student = vec![rc(&[1.0])];
        ema_update(&mut teacher, &student, 0.999).unwrap();
        assert_abs_diff_eq!(teacher[0][[0]], 0.001, epsilon = 1e-15);
    }

    #[test]
    fn ema_fixed_point_and_contraction() {
        // teacher == student is a fixed point.
        let mut teacher = vec![rc(&[0.7, -1.2])];
        let student = vec![rc(&[0.7, -1.2])];
        ema_update(&mut teacher, &student, 0.999).unwrap();
        assert_eq!(teacher[0].as_slice().unwrap(), &[0.7, -1.2]);

        // Against a frozen student, the gap contracts geometrically with
        // factor alpha per step.
        let alpha = 0.97;
        let mut teacher = vec![rc(&[1.0])];
        let student = vec![rc(&[0.0])];
        for _ in 0..100 {
            ema_update(&mut teacher, &student, alpha).unwrap();
        }
        let expected = alpha.powi(100);
        assert_abs_diff_eq!(teacher[0][[0]], expected, epsilon = 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn ema_rejects_mismatches() {
        let mut teacher = vec![rc(&[0.0])];
        assert!(ema_update(&mut teacher, &[], 0.999).is_err());
        let student = vec![rc(&[1.0, 2.0])];
        assert!(ema_update(&mut teacher, &student, 0.999).is_err());
    }

    #[test]
    fn ema_does_not_write_through_aliases() {
        // A freshly initialized teacher shares storage with the student;
        // the update must clone, not mutate the shared buffer.
        let student = vec![rc(&[1.0])];
        let mut teacher = vec![Rc::clone(&student[0])];
        let frozen = vec![rc(&[0.0])];
        ema_update(&mut teacher, &frozen, 0.5).unwrap();
        assert_eq!(student[0][[0]], 1.0);
        assert_eq!(teacher[0][[0]], 0.5);
    }

    #[test]
    fn ramp_is_linear_then_flat() {
        assert_eq!(ramp_weight(0, 10.0, 100), 0.0);
        assert_eq!(ramp_weight(25, 10.0, 100), 2.5);
        assert_eq!(ramp_weight(100, 10.0, 100), 10.0);
        assert_eq!(ramp_weight(100_000, 10.0, 100), 10.0);
        assert_eq!(ramp_weight(7, 10.0, 0), 10.0);
    }

    #[test]
    fn cosine_hits_both_endpoints_and_decreases() {
        let (lr0, lr1) = (0.1, 1e-4);
        assert_abs_diff_eq!(cosine_lr(0, 450, lr0, lr1), lr0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_lr(450, 450, lr0, lr1), lr1, epsilon = 1e-15);
        assert_abs_diff_eq!(
            cosine_lr(225, 450, lr0, lr1),
            lr1 + 0.5 * (lr0 - lr1),
            epsilon = 1e-12
        );
        let mut prev = f64::INFINITY;
        for s in 0..=450 {
            let lr = cosine_lr(s, 450, lr0, lr1);
            assert!(lr <= prev + 1e-15, "cosine must be nonincreasing");
            prev = lr;
        }
        assert_eq!(cosine_lr(9_999, 450, lr0, lr1), lr1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        // With bias correction, step 1 moves each weight by exactly
        // lr * g / (|g| + eps * sqrt(1 - beta2)) ~= lr * sign(g).
        let mut p = rc(&[1.0, -2.0]);
        let mut m = Tensor::zeros(ndarray::IxDyn(&[2]));
        let mut v = Tensor::zeros(ndarray::IxDyn(&[2]));
        let g = Tensor::from_shape_vec(ndarray::IxDyn(&[2]), vec![0.3, -0.7]).unwrap();
        let h = AdamParams::with_lr(0.002);
        adam_step(&mut p, &mut m, &mut v, &g, &h, 1);
        for (i, (p0, g)) in [(1.0, 0.3), (-2.0, -0.7)].iter().enumerate() {
            let expected = p0 - h.lr * g / (g.abs() + h.eps);
            assert_abs_diff_eq!(p[[i]], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn sgd_momentum_matches_hand_rolled_sequence() {
        let mut p = rc(&[1.0]);
        let mut buf = Tensor::zeros(ndarray::IxDyn(&[1]));
        let g = Tensor::from_shape_vec(ndarray::IxDyn(&[1]), vec![0.5]).unwrap();
        let (lr, mu, wd) = (0.1, 0.9, 0.0);
        sgd_momentum_step(&mut p, &mut buf, &g, lr, mu, wd);
        // buf = 0.5, p = 1 - 0.05
        assert_abs_diff_eq!(p[[0]], 0.95, epsilon = 1e-15);
        sgd_momentum_step(&mut p, &mut buf, &g, lr, mu, wd);
        // buf = 0.9*0.5 + 0.5 = 0.95, p = 0.95 - 0.095
        assert_abs_diff_eq!(p[[0]], 0.855, epsilon = 1e-15);

        // Weight decay couples into the gradient before the momentum blend.
        let mut p = rc(&[2.0]);
        let mut buf = Tensor::zeros(ndarray::IxDyn(&[1]));
        let zero = Tensor::zeros(ndarray::IxDyn(&[1]));
        sgd_momentum_step(&mut p, &mut buf, &zero, 0.1, 0.0, 5e-4);
        assert_abs_diff_eq!(p[[0]], 2.0 - 0.1 * 5e-4 * 2.0, epsilon = 1e-15);
    }
}
