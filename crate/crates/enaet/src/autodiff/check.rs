//! Central finite-difference gradient checking.
//!
//! The numerical side never touches the backward pass: it re-runs the
//! forward closure with perturbed leaves, so it stays an independent oracle
//! for whatever the tape computes.

use super::{NodeId, Tape, Tensor};

/// Relative error with a floor that keeps near-zero gradients comparable.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Central difference of `f` w.r.t. coordinate `idx` of `inputs[leaf]`.
pub fn central_difference<F>(f: &F, inputs: &[Tensor], leaf: usize, idx: usize, h: f64) -> f64
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut plus = inputs.to_vec();
    plus[leaf].as_slice_mut().unwrap()[idx] += h;
    let mut minus = inputs.to_vec();
    minus[leaf].as_slice_mut().unwrap()[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Builds the graph with `build`, backprops, and checks every coordinate of
/// every leaf against central differences. Panics on mismatch.
///
/// Used by unit tests on individual ops; the training-loss check samples
/// coordinates instead (see the gradient-check tests).
pub fn numerical_grad_nodes<F>(build: &F, inputs: &[Tensor], h: f64, tol: f64)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs
            .iter()
            .map(|t| tape.param(std::rc::Rc::new(t.clone())))
            .collect();
        let root = build(&mut tape, &ids);
        tape.scalar(root)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.param(std::rc::Rc::new(t.clone())))
        .collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root);

    for (leaf, input) in inputs.iter().enumerate() {
        let g = grads
            .get(ids[leaf])
            .unwrap_or_else(|| panic!("no gradient for leaf {leaf}"));
        let g = g.as_slice().expect("grad contiguous");
        for idx in 0..input.len() {
            let numeric = central_difference(&eval, inputs, leaf, idx, h);
            // Combined bound: an absolute floor absorbs finite-difference
            // roundoff when the true gradient is near zero.
            let err = (g[idx] - numeric).abs();
            let bound = 1e-7 + tol * g[idx].abs().max(numeric.abs());
            assert!(
                err <= bound,
                "leaf {leaf} coord {idx}: analytic {} vs numeric {} (err {err:.3e})",
                g[idx],
                numeric
            );
        }
    }
}
