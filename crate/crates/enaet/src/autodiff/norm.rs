//! Batch normalization.
//!
//! The taped op always normalizes with batch statistics (train mode) and
//! differentiates through them. Inference with running statistics is a plain
//! affine map, provided here as a raw function for the no-grad forward path.

use super::{NodeId, Tape, Tensor};
use ndarray::{Array1, Array4, ArrayView4, Ix1, Ix4, s};
use std::rc::Rc;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics produced by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance.
    pub var: Array1<f64>,
}

fn channel_moments(x: &ArrayView4<f64>) -> (Array1<f64>, Array1<f64>) {
    let c = x.shape()[1];
    let m = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let ch = x.slice(s![.., ci, .., ..]);
        let mu = ch.sum() / m;
        let v = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
        mean[ci] = mu;
        var[ci] = v;
    }
    (mean, var)
}

impl Tape {
    /// Train-mode batch normalization of a `(N,C,H,W)` node.
    ///
    /// Returns the output node and the batch statistics so the caller can
    /// update running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> (NodeId, BatchStats) {
        let vx = self.value_rc(x);
        let vg = self.value_rc(gamma);
        let vb = self.value_rc(beta);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("bn: x rank 4");
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("bn: gamma rank 1");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bn: beta rank 1");
        let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let (mean, var) = channel_moments(&x4);
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());

        let mut xhat = Array4::<f64>::zeros((n, c, h, w));
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ci in 0..c {
            let (mu, istd, ga, be) = (mean[ci], inv_std[ci], g1[ci], b1[ci]);
            let src = x4.slice(s![.., ci, .., ..]);
            let mut xh = xhat.slice_mut(s![.., ci, .., ..]);
            let mut o = out.slice_mut(s![.., ci, .., ..]);
            ndarray::Zip::from(&mut xh).and(&mut o).and(&src).for_each(|xh, o, &v| {
                let z = (v - mu) * istd;
                *xh = z;
                *o = ga * z + be;
            });
        }

        let stats = BatchStats { mean, var };
        let xhat = Rc::new(xhat);
        let gamma_v = g1.to_owned();
        let inv_std_c = inv_std.clone();
        let node = self.push(
            Rc::new(out.into_dyn()),
            vec![x, gamma, beta],
            Some(Box::new(move |g: &Tensor| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let m = (n * h * w) as f64;
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let gch = g4.slice(s![.., ci, .., ..]);
                    let xh = xhat.slice(s![.., ci, .., ..]);
                    let sum_g: f64 = gch.sum();
                    let sum_gx: f64 = gch.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    let ga = gamma_v[ci];
                    let istd = inv_std_c[ci];
                    let mut dch = dx.slice_mut(s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut dch).and(&gch).and(&xh).for_each(|d, &gv, &xv| {
                        // dxhat = g * gamma; dx folds the mean/var paths.
                        *d = ga * istd / m * (m * gv - sum_g - xv * sum_gx);
                    });
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
            false,
        );
        (node, stats)
    }
}

/// Inference-mode normalization with running statistics.
pub fn batchnorm_eval_raw(
    x: &ArrayView4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
) -> Array4<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        let istd = 1.0 / (running_var[ci] + BN_EPS).sqrt();
        let (mu, ga, be) = (running_mean[ci], gamma[ci], beta[ci]);
        let src = x.slice(s![.., ci, .., ..]);
        let mut o = out.slice_mut(s![.., ci, .., ..]);
        ndarray::Zip::from(&mut o).and(&src).for_each(|o, &v| {
            *o = ga * (v - mu) * istd + be;
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::numerical_grad_nodes;
    use ndarray::{arr1, Array4};

    #[test]
    fn train_forward_is_normalized() {
        let mut tape = Tape::new();
        let x = Array4::from_shape_fn((4, 2, 3, 3), |(n, c, h, w)| {
            (n * 7 + c * 3 + h * 2 + w) as f64 * 0.31 - 2.0
        });
        let xid = tape.constant(x.into_dyn());
        let g = tape.param(Rc::new(arr1(&[1.0, 1.0]).into_dyn()));
        let b = tape.param(Rc::new(arr1(&[0.0, 0.0]).into_dyn()));
        let (y, stats) = tape.batchnorm_train(xid, g, b);
        let yv = tape.value(y).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let (mean, var) = channel_moments(&yv.view());
        for ci in 0..2 {
            assert!(mean[ci].abs() < 1e-12);
            assert!((var[ci] - 1.0).abs() < 1e-4); // eps shrinks variance slightly
            assert!(stats.var[ci] > 0.0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Array4::from_shape_fn((3, 2, 2, 2), |(n, c, h, w)| {
            ((n * 5 + c * 2 + h * 3 + w * 7) % 9) as f64 * 0.4 - 1.5
        })
        .into_dyn();
        let gamma = arr1(&[1.3, 0.7]).into_dyn();
        let beta = arr1(&[0.1, -0.2]).into_dyn();
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let (y, _) = tape.batchnorm_train(ids[0], ids[1], ids[2]);
            let y = tape.relu(y);
            let sq = tape.mul(y, y);
            tape.mean_all(sq)
        };
        numerical_grad_nodes(&build, &[x, gamma, beta], 1e-6, 1e-6);
    }

    #[test]
    fn eval_mode_is_an_affine_map() {
        let x = Array4::from_elem((2, 1, 2, 2), 3.0);
        let y = batchnorm_eval_raw(
            &x.view(),
            &arr1(&[2.0]),
            &arr1(&[1.0]),
            &arr1(&[1.0]),
            &arr1(&[4.0 - BN_EPS]),
        );
        // (3-1)/2 * 2 + 1 = 3
        assert!((y[[0, 0, 0, 0]] - 3.0).abs() < 1e-9);
    }
}
