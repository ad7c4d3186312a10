//! Reverse-mode differentiation: tape construction, the backward walk, and
//! a finite-difference gradient checker.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Recorded compute graph in topological order (parents before children).
/// Built on demand from an output node; ops themselves only store local
/// parent links, so there is no global tape to reset between steps.
pub struct Tape<S: Scalar> {
    order: Vec<Tensor<S>>,
}

impl<S: Scalar> Tape<S> {
    /// Collects every node reachable from `output` through parent links.
    /// Iterative DFS, so graph depth is bounded by heap, not stack.
    pub fn from_output(output: &Tensor<S>) -> Tape<S> {
        let mut visited: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut stack: Vec<(Tensor<S>, usize)> = Vec::new();
        visited.insert(output.id());
        stack.push((output.clone(), 0));
        while let Some((node, child_idx)) = stack.pop() {
            let parents: Vec<Tensor<S>> = node.inner.borrow().parents.clone();
            if child_idx < parents.len() {
                stack.push((node, child_idx + 1));
                let child = parents[child_idx].clone();
                if visited.insert(child.id()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        Tape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Runs reverse-mode accumulation from this scalar output.
    ///
    /// Interior nodes use their gradient buffers as scratch and are cleared
    /// at the start of each call. Leaf gradients persist and accumulate
    /// across calls until [`Tensor::zero_grad`], which is what gradient
    /// accumulation over a batch relies on.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("output must be a single element, shape is {:?}", self.shape()),
            ));
        }
        let tape = Tape::from_output(self);
        for node in &tape.order {
            let mut inner = node.inner.borrow_mut();
            if inner.backward.is_some() && !inner.requires_grad {
                inner.grad = None;
            }
        }
        self.accum_grad(&[S::one()]);
        for node in tape.order.iter().rev() {
            let grad = node.inner.borrow().grad.clone();
            if let Some(g) = grad {
                let inner = node.inner.borrow();
                if let Some(bw) = &inner.backward {
                    bw(&g);
                }
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference check, keyed to the worst coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub n_coords: usize,
}

/// Compares the recorded gradient of `f` at `x` against central differences.
///
/// `f` must map `x` to a scalar and is re-run twice per coordinate with the
/// coordinate nudged by `±h`. The relative error at each coordinate is
/// `|a - n| / max(1, |a|, |n|)` and the report carries the worst one. If a
/// probe produces a non-finite value the check fails with
/// [`Error::NonFinite`] carrying the offending coordinate index rather than
/// panicking, so callers can attribute the failure.
///
/// `x` must be a leaf flagged with `requires_grad`; its data is restored
/// bit-exactly before returning.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<Tensor<S>>,
{
    if !x.inner.borrow().requires_grad {
        return Err(Error::contract("grad_check", "x must be a leaf with requires_grad set"));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::contract("grad_check", format!("step h must be positive, got {h}")));
    }
    let y = f(x)?;
    if y.numel() != 1 {
        return Err(Error::contract(
            "grad_check",
            format!("f must return a scalar, got shape {:?}", y.shape()),
        ));
    }
    x.zero_grad();
    y.backward()?;
    // A function may legitimately not depend on x, in which case no gradient
    // arrives and the analytic answer is zero everywhere.
    let analytic: Vec<f64> = match x.grad() {
        Some(g) => g.iter().map(|v| v.cast_f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let saved = x.to_vec();
    let step = S::cast_from(h);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
        n_coords: saved.len(),
    };
    let probe = |coord: usize, delta: S| -> Result<f64> {
        x.set_data(&saved)?;
        x.nudge(coord, delta)?;
        let out = match f(x) {
            Ok(t) => t.item()?,
            Err(Error::NonFinite { op, .. }) => {
                x.set_data(&saved)?;
                return Err(Error::NonFinite { op, coord: Some(coord) });
            }
            Err(e) => {
                x.set_data(&saved)?;
                return Err(e);
            }
        };
        let v = out.cast_f64();
        if !v.is_finite() {
            x.set_data(&saved)?;
            return Err(Error::NonFinite { op: "grad_check", coord: Some(coord) });
        }
        Ok(v)
    };
    for coord in 0..saved.len() {
        let plus = probe(coord, step)?;
        let minus = probe(coord, -step)?;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[coord];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = coord;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    x.set_data(&saved)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn backward_requires_scalar_output() {
        let x = T::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = x.scale(2.0).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn square_sum_gradient_is_exact() {
        // d/dx sum(x*x) = 2x, exact in floating point for these values.
        let x = T::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad();
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        assert_eq!(y.item().unwrap(), 14.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = 2a + 3a summed, so dy/da = 5 per element.
        let a = T::from_vec(&[2], vec![1.0, -1.0]).unwrap().requires_grad();
        let b = a.scale(2.0).unwrap();
        let c = a.scale(3.0).unwrap();
        let y = b.add(&c).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn gradients_accumulate_until_reset() {
        let x = T::from_vec(&[1], vec![3.0]).unwrap().requires_grad();
        for _ in 0..2 {
            let y = x.mul(&x).unwrap().sum_all().unwrap();
            y.backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn interior_scratch_grads_do_not_leak_between_calls() {
        let x = T::from_vec(&[1], vec![2.0]).unwrap().requires_grad();
        let b = x.scale(4.0).unwrap();
        let y = b.sum_all().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        // Each call seeds the same graph afresh; only the leaf accumulates.
        assert_eq!(b.grad().unwrap(), vec![1.0]);
        assert_eq!(x.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn backward_on_constant_graph_is_a_noop() {
        let x = T::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn grad_check_passes_smooth_function() {
        let x = T::from_vec(&[4], vec![0.5, -1.25, 2.0, 0.1]).unwrap().requires_grad();
        let report = grad_check(
            |x: &T| {
                let y = x.mul(x)?.add(&x.scale(3.0)?)?;
                y.sum_all()
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
        assert_eq!(x.to_vec(), vec![0.5, -1.25, 2.0, 0.1]);
    }

    #[test]
    fn grad_check_flags_a_wrong_backward() {
        let x = T::from_vec(&[2], vec![0.7, -0.3]).unwrap().requires_grad();
        // Hand-built op whose backward deliberately doubles the true gradient.
        let broken = |x: &T| -> crate::error::Result<T> {
            let data = x.to_vec();
            let out = vec![data[0] + data[1]];
            let parent = x.clone();
            T::from_op(
                "broken",
                vec![1],
                out,
                vec![x.clone()],
                Box::new(move |g: &[f64]| {
                    parent.accum_grad(&[2.0 * g[0], 2.0 * g[0]]);
                }),
            )
        };
        let report = grad_check(broken, &x, 1e-4).unwrap();
        assert!(report.max_rel_err > 0.4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_reports_non_finite_probe_with_coordinate() {
        // Goes NaN as soon as coordinate 1 dips below zero; the base point
        // sits within h of that cliff so only the minus-probe trips it.
        let x = T::from_vec(&[2], vec![1.0, 5e-5]).unwrap().requires_grad();
        let nan_below_zero = |x: &T| -> crate::error::Result<T> {
            let data = x.to_vec();
            let val = if data[1] < 0.0 { f64::NAN } else { data[0] + data[1] };
            let parent = x.clone();
            T::from_op(
                "nan_cliff",
                vec![1],
                vec![val],
                vec![x.clone()],
                Box::new(move |g: &[f64]| parent.accum_grad(&[g[0], g[0]])),
            )
        };
        let err = grad_check(nan_below_zero, &x, 1e-4).unwrap_err();
        match err {
            Error::NonFinite { coord, .. } => assert_eq!(coord, Some(1)),
            other => panic!("expected NonFinite, got {other}"),
        }
        // Data restored even on the error path.
        assert_eq!(x.to_vec(), vec![1.0, 5e-5]);
    }

    #[test]
    fn grad_check_accepts_function_that_ignores_x() {
        let x = T::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        let report = grad_check(|_x: &T| Ok(T::scalar(7.0)), &x, 1e-4).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn tape_visits_shared_nodes_once() {
        let a = T::from_vec(&[1], vec![1.0]).unwrap().requires_grad();
        let b = a.scale(2.0).unwrap();
        let c = b.add(&b).unwrap();
        let tape = Tape::from_output(&c);
        assert_eq!(tape.len(), 3);
    }
}
