//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc<RefCell<..>>`) to a row-major
//! contiguous buffer plus optional autodiff bookkeeping. Ops allocate fresh
//! output buffers, there are no views or strides: slicing copies. That costs
//! memory bandwidth but keeps every kernel a plain nested loop over
//! contiguous data, which is the right trade at the model sizes this crate
//! targets.
//!
//! Differentiation is define-by-run. Each op that involves a
//! gradient-requiring input records its parents and a backward closure on
//! the output node. [`Tensor::backward`](crate::tensor::Tensor::backward)
//! (see `autodiff`) walks the recorded graph in reverse topological order.
//! The graph is rebuilt every forward pass and freed when the output handle
//! drops.
//!
//! Scalars are `f64` by default; every kernel is generic over
//! [`Scalar`](crate::scalar::Scalar) so the same code instantiates for
//! `f32`.

mod autodiff;
mod io;
mod ops;

pub use autodiff::{grad_check, GradCheckReport, Tape};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor};

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S])>;

pub(crate) struct Inner<S: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<S>,
    pub(crate) grad: Option<Vec<S>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor<S>>,
    pub(crate) backward: Option<BackwardFn<S>>,
    pub(crate) op: &'static str,
}

/// Handle to a tensor node. Cloning the handle shares the underlying buffer
/// and autodiff state; use [`Tensor::detach_copy`] for an independent copy.
pub struct Tensor<S: Scalar = f64> {
    pub(crate) inner: Rc<RefCell<Inner<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor{{id: {}, op: {}, shape: {:?}, requires_grad: {}}}",
            inner.id, inner.op, inner.shape, inner.requires_grad
        )
    }
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape(op, "rank-0 shapes are not supported, use [1]"));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::shape(op, format!("zero extent in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} implies {numel} elements, got {len}"),
        ));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    fn new_node(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Tensor<S> {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad,
                parents,
                backward,
                op,
            })),
        }
    }

    /// Builds a leaf tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Tensor<S>> {
        check_shape("from_vec", shape, data.len())?;
        Ok(Self::new_node("leaf", shape.to_vec(), data, false, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor<S>> {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    /// Single-element tensor with shape `[1]`.
    pub fn scalar(value: S) -> Tensor<S> {
        Self::from_vec(&[1], vec![value]).expect("scalar shape is always valid")
    }

    /// Leaf filled with draws from `U[lo, hi)`. Values are drawn as `f64`
    /// and narrowed, so a given seed produces the same underlying sequence
    /// for every scalar type.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel)
            .map(|_| S::cast_from(rng.gen::<f64>() * (hi - lo) + lo))
            .collect();
        Self::from_vec(shape, data)
    }

    /// Marks a leaf as a trainable parameter so backward accumulates into
    /// its `grad` buffer. Recorded (non-leaf) nodes already participate in
    /// backprop and must not be re-flagged.
    pub fn requires_grad(self) -> Tensor<S> {
        {
            let mut inner = self.inner.borrow_mut();
            assert!(
                inner.backward.is_none(),
                "requires_grad is only meaningful on leaf tensors"
            );
            inner.requires_grad = true;
        }
        self
    }

    /// Internal constructor for op outputs. Records parents and the backward
    /// closure only when some parent participates in differentiation, so
    /// pure-constant subgraphs stay unrecorded and cost nothing at backward
    /// time. In debug builds the fresh buffer is scanned for NaN/Inf, which
    /// enforces the contract that every op maps finite inputs to finite
    /// outputs.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Result<Tensor<S>> {
        if cfg!(debug_assertions) {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op, coord: Some(i) });
            }
        }
        let recorded = parents.iter().any(|p| p.participates());
        if recorded {
            Ok(Self::new_node(op, shape, data, false, parents, Some(backward)))
        } else {
            Ok(Self::new_node(op, shape, data, false, Vec::new(), None))
        }
    }

    /// True when this node either is a trainable leaf or carries a recorded
    /// backward closure, i.e. gradients must flow to or through it.
    pub(crate) fn participates(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.backward.is_some()
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn op_name(&self) -> &'static str {
        self.inner.borrow().op
    }

    /// Borrow of the underlying buffer. Hold it only across reads.
    pub(crate) fn data_ref(&self) -> Ref<'_, Inner<S>> {
        self.inner.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    /// Extracts the value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::contract(
                "item",
                format!("expected 1 element, shape is {:?}", inner.shape),
            ));
        }
        Ok(inner.data[0])
    }

    /// Current gradient buffer, if any backward pass has deposited one.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    /// Clears the gradient buffer. Gradients otherwise accumulate across
    /// backward calls, which is what a training loop with gradient
    /// accumulation wants and what everyone else must remember to reset.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the buffer in place, keeping the shape. Meant for
    /// optimizers and finite-difference probes operating on leaves; the
    /// recorded graph does not see the change retroactively.
    pub fn set_data(&self, data: &[S]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::contract(
                "set_data",
                format!("length {} does not match numel {}", data.len(), inner.data.len()),
            ));
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }

    /// Single-element update used by finite-difference probing.
    pub fn nudge(&self, flat_index: usize, delta: S) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if flat_index >= inner.data.len() {
            return Err(Error::contract("nudge", format!("index {flat_index} out of range")));
        }
        inner.data[flat_index] += delta;
        Ok(())
    }

    /// Independent leaf copy of the current values. Drops all autodiff
    /// history, so the copy is a constant.
    pub fn detach_copy(&self) -> Tensor<S> {
        let inner = self.inner.borrow();
        Self::new_node("leaf", inner.shape.clone(), inner.data.clone(), false, Vec::new(), None)
    }

    /// Adds `contrib` into this node's gradient buffer, allocating it lazily.
    /// No-op for nodes that do not participate in differentiation, so
    /// backward closures can call it unconditionally on every parent.
    pub(crate) fn accum_grad(&self, contrib: &[S]) {
        if !self.participates() {
            return;
        }
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(contrib.len(), inner.data.len(), "gradient length mismatch");
        match &mut inner.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += *ci;
                }
            }
            None => inner.grad = Some(contrib.to_vec()),
        }
    }

    // ------------------------------------------------------------------
    // Structural ops. These shuffle data without arithmetic; each carries
    // the matching scatter in its backward closure.
    // ------------------------------------------------------------------

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        check_shape("reshape", shape, self.numel())?;
        let src = self.clone();
        let old_numel = self.numel();
        let data = self.to_vec();
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                debug_assert_eq!(g.len(), old_numel);
                src.accum_grad(g);
            }),
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("transpose2", format!("needs rank 2, got {shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        let mut out = vec![S::zero(); n * m];
        {
            let inner = self.data_ref();
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = inner.data[i * m + j];
                }
            }
        }
        let src = self.clone();
        Tensor::from_op(
            "transpose2",
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut gin = vec![S::zero(); n * m];
                for i in 0..n {
                    for j in 0..m {
                        gin[i * m + j] = g[j * n + i];
                    }
                }
                src.accum_grad(&gin);
            }),
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`, copied out.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("narrow", format!("axis {axis} out of range for {shape:?}")));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner_sz: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![S::zero(); outer * len * inner_sz];
        {
            let src = self.data_ref();
            for o in 0..outer {
                for a in 0..len {
                    let src_off = (o * extent + start + a) * inner_sz;
                    let dst_off = (o * len + a) * inner_sz;
                    out[dst_off..dst_off + inner_sz]
                        .copy_from_slice(&src.data[src_off..src_off + inner_sz]);
                }
            }
        }
        let parent = self.clone();
        let full_numel = self.numel();
        Tensor::from_op(
            "narrow",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut gin = vec![S::zero(); full_numel];
                for o in 0..outer {
                    for a in 0..len {
                        let dst_off = (o * extent + start + a) * inner_sz;
                        let src_off = (o * len + a) * inner_sz;
                        gin[dst_off..dst_off + inner_sz].copy_from_slice(&g[src_off..src_off + inner_sz]);
                    }
                }
                parent.accum_grad(&gin);
            }),
        )
    }

    /// Concatenates tensors along `axis`. All other extents must agree.
    pub fn concat(axis: usize, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "empty part list"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::shape(
                    "concat",
                    format!("part shape {s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner_sz: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut out = vec![S::zero(); outer * axis_total * inner_sz];
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut offset = 0usize;
        for (p, &ext) in parts.iter().zip(&extents) {
            let src = p.data_ref();
            for o in 0..outer {
                for a in 0..ext {
                    let dst_off = (o * axis_total + offset + a) * inner_sz;
                    let src_off = (o * ext + a) * inner_sz;
                    out[dst_off..dst_off + inner_sz]
                        .copy_from_slice(&src.data[src_off..src_off + inner_sz]);
                }
            }
            offset += ext;
        }
        let parent_handles: Vec<Tensor<S>> = parts.to_vec();
        let bw_parents = parent_handles.clone();
        Tensor::from_op(
            "concat",
            out_shape,
            out,
            parent_handles,
            Box::new(move |g: &[S]| {
                let mut offset = 0usize;
                for (p, &ext) in bw_parents.iter().zip(&extents) {
                    let mut gin = vec![S::zero(); outer * ext * inner_sz];
                    for o in 0..outer {
                        for a in 0..ext {
                            let src_off = (o * axis_total + offset + a) * inner_sz;
                            let dst_off = (o * ext + a) * inner_sz;
                            gin[dst_off..dst_off + inner_sz]
                                .copy_from_slice(&g[src_off..src_off + inner_sz]);
                        }
                    }
                    p.accum_grad(&gin);
                    offset += ext;
                }
            }),
        )
    }

    /// Gathers rows along axis 0: `out[i] = self[indices[i]]`. Indices may
    /// repeat; the backward pass scatter-adds into the source rows.
    pub fn index_select0(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let shape = self.shape();
        if indices.is_empty() {
            return Err(Error::shape("index_select0", "empty index list"));
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select0", format!("index {bad} out of range 0..{rows}")));
        }
        let row_sz: usize = shape[1..].iter().product::<usize>().max(1);
        let mut out = vec![S::zero(); indices.len() * row_sz];
        {
            let src = self.data_ref();
            for (i, &r) in indices.iter().enumerate() {
                out[i * row_sz..(i + 1) * row_sz]
                    .copy_from_slice(&src.data[r * row_sz..(r + 1) * row_sz]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let parent = self.clone();
        let idx: Vec<usize> = indices.to_vec();
        let full_numel = self.numel();
        Tensor::from_op(
            "index_select0",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut gin = vec![S::zero(); full_numel];
                for (i, &r) in idx.iter().enumerate() {
                    for c in 0..row_sz {
                        gin[r * row_sz + c] += g[i * row_sz + c];
                    }
                }
                parent.accum_grad(&gin);
            }),
        )
    }
}
