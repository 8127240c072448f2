//! Elementwise, reduction and dense-layer primitives.

use super::{NodeId, Tape, Tensor};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4};
use std::rc::Rc;

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &*self.value_rc(a) + &*self.value_rc(b);
        self.push(
            Rc::new(out),
            vec![a, b],
            Some(Box::new(|g: &Tensor| vec![g.clone(), g.clone()])),
            false,
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &*self.value_rc(a) - &*self.value_rc(b);
        self.push(
            Rc::new(out),
            vec![a, b],
            Some(Box::new(|g: &Tensor| vec![g.clone(), -g])),
            false,
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        let out = &*va * &*vb;
        self.push(
            Rc::new(out),
            vec![a, b],
            Some(Box::new(move |g: &Tensor| vec![g * &*vb, g * &*va])),
            false,
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = &*self.value_rc(a) * c;
        self.push(
            Rc::new(out),
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![g * c])),
            false,
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = &*self.value_rc(a) + c;
        self.push(
            Rc::new(out),
            vec![a],
            Some(Box::new(|g: &Tensor| vec![g.clone()])),
            false,
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let out = va.mapv(|x| x.max(0.0));
        self.push(
            Rc::new(out),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![dx]
            })),
            false,
        )
    }

    /// Elementwise natural log. Inputs must be positive; clamp first when a
    /// floor is needed.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let out = va.mapv(f64::ln);
        self.push(
            Rc::new(out),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| *d /= x);
                vec![dx]
            })),
            false,
        )
    }

    /// `max(x, lo)` with zero gradient on the clamped side.
    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let va = self.value_rc(a);
        let out = va.mapv(|x| x.max(lo));
        self.push(
            Rc::new(out),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x <= lo {
                        *d = 0.0;
                    }
                });
                vec![dx]
            })),
            false,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let shape = va.raw_dim();
        let out = ndarray::arr0(va.sum()).into_dyn();
        self.push(
            Rc::new(out),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let gv = g.iter().next().copied().unwrap();
                vec![ArrayD::from_elem(shape.clone(), gv)]
            })),
            false,
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Scalar node `sum_i w_i * terms_i`; every term must be scalar.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let total: f64 = terms
            .iter()
            .map(|&(id, w)| w * self.scalar(id))
            .sum();
        let weights: Vec<f64> = terms.iter().map(|&(_, w)| w).collect();
        self.push(
            Rc::new(ndarray::arr0(total).into_dyn()),
            terms.iter().map(|&(id, _)| id).collect(),
            Some(Box::new(move |g: &Tensor| {
                let gv = g.iter().next().copied().unwrap();
                weights
                    .iter()
                    .map(|w| ndarray::arr0(gv * w).into_dyn())
                    .collect()
            })),
            false,
        )
    }

    /// `x (N,F) @ w^T (F,O) + b (O)` -> `(N,O)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let vx = self.value_rc(x);
        let vw = self.value_rc(w);
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("linear: x rank 2");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear: w rank 2");
        let vb = self.value_rc(b);
        let b1 = vb
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("linear: b rank 1");
        let out = x2.dot(&w2.t()) + &b1;
        let (vx_c, vw_c) = (Rc::clone(&vx), Rc::clone(&vw));
        self.push(
            Rc::new(out.into_dyn()),
            vec![x, w, b],
            Some(Box::new(move |g: &Tensor| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x2 = vx_c.view().into_dimensionality::<Ix2>().unwrap();
                let w2 = vw_c.view().into_dimensionality::<Ix2>().unwrap();
                let dx = g2.dot(&w2);
                let dw = g2.t().dot(&x2);
                let db = g2.sum_axis(Axis(0));
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
            false,
        )
    }

    /// Row-wise log-softmax of a `(N,K)` node.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let x = va.view().into_dimensionality::<Ix2>().expect("log_softmax: rank 2");
        let out = log_softmax_rows(&x.to_owned());
        let probs = Rc::new(out.mapv(f64::exp));
        self.push(
            Rc::new(out.into_dyn()),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                // dx = g - softmax * rowsum(g)
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let rows = g2.sum_axis(Axis(1));
                let mut dx = g2.to_owned();
                for (mut row, (&s, p)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(rows.iter().zip(probs.rows()))
                {
                    row.scaled_add(-s, &p);
                }
                vec![dx.into_dyn()]
            })),
            false,
        )
    }

    /// Row-wise softmax of a `(N,K)` node.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let x = va.view().into_dimensionality::<Ix2>().expect("softmax: rank 2");
        let p = log_softmax_rows(&x.to_owned()).mapv(f64::exp);
        let p_rc = Rc::new(p.clone());
        self.push(
            Rc::new(p.into_dyn()),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                // dx = p .* (g - rowsum(g .* p))
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let gp = &g2 * &*p_rc;
                let rows = gp.sum_axis(Axis(1));
                let mut dx = g2.to_owned();
                for ((mut row, &s), p) in dx.rows_mut().into_iter().zip(rows.iter()).zip(p_rc.rows())
                {
                    for (d, &pv) in row.iter_mut().zip(p.iter()) {
                        *d = (*d - s) * pv;
                    }
                }
                vec![dx.into_dyn()]
            })),
            false,
        )
    }

    /// Concatenate two `(N,C,H,W)` nodes along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        let a4 = va.view().into_dimensionality::<Ix4>().expect("concat: a rank 4");
        let b4 = vb.view().into_dimensionality::<Ix4>().expect("concat: b rank 4");
        let c_a = a4.shape()[1];
        let out = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()]).expect("concat shapes");
        self.push(
            Rc::new(out.into_dyn()),
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let ga = g4.slice(ndarray::s![.., ..c_a, .., ..]).to_owned();
                let gb = g4.slice(ndarray::s![.., c_a.., .., ..]).to_owned();
                vec![ga.into_dyn(), gb.into_dyn()]
            })),
            false,
        )
    }

    /// Mean over the spatial axes of a `(N,C,H,W)` node -> `(N,C)`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let a4 = va.view().into_dimensionality::<Ix4>().expect("gap: rank 4");
        let (n, c, h, w) = (a4.shape()[0], a4.shape()[1], a4.shape()[2], a4.shape()[3]);
        let inv = 1.0 / (h * w) as f64;
        let mut out = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                out[[ni, ci]] = a4.slice(ndarray::s![ni, ci, .., ..]).sum() * inv;
            }
        }
        self.push(
            Rc::new(out.into_dyn()),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        dx.slice_mut(ndarray::s![ni, ci, .., ..])
                            .fill(g2[[ni, ci]] * inv);
                    }
                }
                vec![dx.into_dyn()]
            })),
            false,
        )
    }

    /// Per-channel `x * scale + shift` on a `(N,C,H,W)` node with constant
    /// coefficients; this is eval-mode batchnorm folded into one affine.
    pub fn channel_affine(&mut self, a: NodeId, scale: Vec<f64>, shift: Vec<f64>) -> NodeId {
        let va = self.value_rc(a);
        let a4 = va.view().into_dimensionality::<Ix4>().expect("channel_affine: rank 4");
        let c = a4.shape()[1];
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut out = a4.to_owned();
        for ci in 0..c {
            let (s, t) = (scale[ci], shift[ci]);
            out.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v * s + t);
        }
        self.push(
            Rc::new(out.into_dyn()),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = g4.to_owned();
                for ci in 0..scale.len() {
                    let s = scale[ci];
                    dx.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v * s);
                }
                vec![dx.into_dyn()]
            })),
            false,
        )
    }
}

/// Numerically stable row-wise log-softmax on a rank-2 array.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - logsum);
    }
    out
}

/// Row-wise softmax on a rank-2 array.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    log_softmax_rows(x).mapv(f64::exp)
}

/// One-dimensional softmax.
pub fn softmax_vec(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = x.mapv(|v| (v - max).exp());
    let sum = p.sum();
    p /= sum;
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::numerical_grad_nodes;
    use ndarray::{arr1, arr2};

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let x = arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]);
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_matches_finite_differences() {
        let x = arr2(&[[0.5, -1.0], [2.0, 0.25]]).into_dyn();
        let w = arr2(&[[0.1, 0.2], [-0.3, 0.4], [0.7, -0.6]]).into_dyn();
        let b = arr1(&[0.05, -0.1, 0.2]).into_dyn();
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let y = tape.linear(ids[0], ids[1], ids[2]);
            let y = tape.relu(y);
            tape.mean_all(y)
        };
        numerical_grad_nodes(&build, &[x, w, b], 1e-6, 1e-6);
    }

    #[test]
    fn softmax_ops_match_finite_differences() {
        let x = arr2(&[[0.3, -0.2, 1.5], [2.0, 2.0, -1.0]]).into_dyn();
        let t = arr2(&[[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]]).into_dyn();
        let build = move |tape: &mut Tape, ids: &[NodeId]| {
            let lp = tape.log_softmax(ids[0]);
            let tgt = tape.constant(t.clone());
            let ce = tape.mul(lp, tgt);
            let s = tape.sum_all(ce);
            let p = tape.softmax(ids[0]);
            let sq = tape.mul(p, p);
            let l2 = tape.sum_all(sq);
            tape.weighted_sum(&[(s, -1.0), (l2, 0.5)])
        };
        numerical_grad_nodes(&build, &[x], 1e-6, 1e-6);
    }

    #[test]
    fn ln_matches_finite_differences() {
        let x = arr2(&[[0.5, 1.0, 2.0], [0.1, 3.0, 0.7]]).into_dyn();
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let y = tape.ln(ids[0]);
            tape.sum_all(y)
        };
        numerical_grad_nodes(&build, &[x], 1e-6, 1e-6);
    }

    #[test]
    fn gap_and_concat_match_finite_differences() {
        let a = ndarray::Array4::from_shape_fn((2, 2, 3, 3), |(n, c, h, w)| {
            (n + c + h + w) as f64 * 0.1 - 0.43
        })
        .into_dyn();
        let b = ndarray::Array4::from_shape_fn((2, 1, 3, 3), |(n, c, h, w)| {
            (n * 2 + c + h * w) as f64 * 0.07 - 0.2
        })
        .into_dyn();
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let cat = tape.concat_channels(ids[0], ids[1]);
            let cat = tape.relu(cat);
            let pooled = tape.global_avg_pool(cat);
            let sq = tape.mul(pooled, pooled);
            tape.mean_all(sq)
        };
        numerical_grad_nodes(&build, &[a, b], 1e-6, 1e-6);
    }
}
