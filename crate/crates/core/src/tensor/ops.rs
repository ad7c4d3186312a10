//! Numeric kernels. Each op computes its output eagerly with plain loops
//! and registers an analytic backward closure; nothing here depends on the
//! model above, so every kernel can be checked in isolation against finite
//! differences.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardFn, Tensor};

/// How the right-hand operand of a binary op lines up with the left.
#[derive(Clone, Copy)]
enum RhsKind {
    /// Identical shapes.
    Same,
    /// Single element applied everywhere.
    Scalar,
    /// `rhs` matches a trailing suffix of `lhs` and is tiled across it.
    /// This covers the bias-add pattern `[n, d] + [d]`.
    Suffix,
}

fn rhs_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<RhsKind> {
    if lhs == rhs {
        return Ok(RhsKind::Same);
    }
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok(RhsKind::Scalar);
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(RhsKind::Suffix);
    }
    Err(Error::shape(
        op,
        format!("rhs {rhs:?} must equal lhs {lhs:?}, be a single element, or match a trailing suffix"),
    ))
}

impl<S: Scalar> Tensor<S> {
    /// Shared implementation for elementwise binary ops with broadcasting of
    /// the right operand. `f` is the forward map, `da`/`db` the partial
    /// derivatives as functions of the two input values.
    fn bin_ew(
        &self,
        other: &Tensor<S>,
        op: &'static str,
        f: fn(S, S) -> S,
        da: fn(S, S) -> S,
        db: fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let lshape = self.shape();
        let rshape = other.shape();
        let kind = rhs_kind(op, &lshape, &rshape)?;
        let rn = other.numel();
        let out: Vec<S> = {
            let a = self.data_ref();
            let b = other.data_ref();
            match kind {
                RhsKind::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                RhsKind::Scalar => {
                    let y = b.data[0];
                    a.data.iter().map(|&x| f(x, y)).collect()
                }
                RhsKind::Suffix => a
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data[i % rn]))
                    .collect(),
            }
        };
        let lhs_h = self.clone();
        let rhs_h = other.clone();
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let (ga, gb) = {
                let a = lhs_h.data_ref();
                let b = rhs_h.data_ref();
                let mut ga = vec![S::zero(); a.data.len()];
                let mut gb = vec![S::zero(); b.data.len()];
                match kind {
                    RhsKind::Same => {
                        for i in 0..g.len() {
                            ga[i] = g[i] * da(a.data[i], b.data[i]);
                            gb[i] = g[i] * db(a.data[i], b.data[i]);
                        }
                    }
                    RhsKind::Scalar => {
                        let y = b.data[0];
                        for i in 0..g.len() {
                            ga[i] = g[i] * da(a.data[i], y);
                            gb[0] += g[i] * db(a.data[i], y);
                        }
                    }
                    RhsKind::Suffix => {
                        for i in 0..g.len() {
                            let y = b.data[i % rn];
                            ga[i] = g[i] * da(a.data[i], y);
                            gb[i % rn] += g[i] * db(a.data[i], y);
                        }
                    }
                }
                (ga, gb)
            };
            lhs_h.accum_grad(&ga);
            rhs_h.accum_grad(&gb);
        });
        Tensor::from_op(op, lshape, out, vec![self.clone(), other.clone()], backward)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.bin_ew(other, "add", |a, b| a + b, |_, _| S::one(), |_, _| S::one())
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.bin_ew(other, "sub", |a, b| a - b, |_, _| S::one(), |_, _| -S::one())
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.bin_ew(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Shared implementation for elementwise unary ops. The derivative is a
    /// function of the input value, so outputs never need to be captured.
    fn unary_ew(
        &self,
        op: &'static str,
        f: impl Fn(S) -> S,
        df: impl Fn(S) -> S + 'static,
    ) -> Result<Tensor<S>> {
        let out: Vec<S> = self.data_ref().data.iter().map(|&x| f(x)).collect();
        let parent = self.clone();
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let gin: Vec<S> = {
                let a = parent.data_ref();
                g.iter().zip(&a.data).map(|(&gi, &x)| gi * df(x)).collect()
            };
            parent.accum_grad(&gin);
        });
        Tensor::from_op(op, self.shape(), out, vec![self.clone()], backward)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&self, c: f64) -> Result<Tensor<S>> {
        let cs = S::cast_from(c);
        self.unary_ew("scale", move |x| x * cs, move |_| cs)
    }

    /// Adds the constant `c` to every element.
    pub fn add_scalar(&self, c: f64) -> Result<Tensor<S>> {
        let cs = S::cast_from(c);
        self.unary_ew("add_scalar", move |x| x + cs, |_| S::one())
    }

    pub fn neg(&self) -> Result<Tensor<S>> {
        self.scale(-1.0)
    }

    /// Gaussian error linear unit, tanh form.
    pub fn gelu(&self) -> Result<Tensor<S>> {
        let c = S::cast_from((2.0 / std::f64::consts::PI).sqrt());
        let k = S::cast_from(0.044715);
        let half = S::cast_from(0.5);
        let three = S::cast_from(3.0);
        self.unary_ew(
            "gelu",
            move |x| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * x * (S::one() + t)
            },
            move |x| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (S::one() + three * k * x * x);
                half * (S::one() + t) + half * x * (S::one() - t * t) * du
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        self.unary_ew("sigmoid", sigmoid_val, move |x| {
            let s = sigmoid_val(x);
            s * (S::one() - s)
        })
    }

    /// `ln(1 + e^x)`, computed in the overflow-safe form.
    pub fn softplus(&self) -> Result<Tensor<S>> {
        self.unary_ew(
            "softplus",
            |x| x.max(S::zero()) + (-x.abs()).exp().ln_1p(),
            sigmoid_val,
        )
    }

    /// Sum of all elements, returned as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Tensor<S>> {
        let total = self.data_ref().data.iter().fold(S::zero(), |acc, &v| acc + v);
        let parent = self.clone();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                parent.accum_grad(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<S>> {
        let n = self.numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Rank-2 matrix product `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let a_shape = self.shape();
        let b_shape = rhs.shape();
        if a_shape.len() != 2 || b_shape.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("needs two rank-2 operands, got {a_shape:?} and {b_shape:?}"),
            ));
        }
        if a_shape[1] != b_shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {a_shape:?} x {b_shape:?}"),
            ));
        }
        let (n, k, m) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut out = vec![S::zero(); n * m];
        {
            let a = self.data_ref();
            let b = rhs.data_ref();
            for i in 0..n {
                for p in 0..k {
                    let av = a.data[i * k + p];
                    let brow = &b.data[p * m..(p + 1) * m];
                    let orow = &mut out[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let a_h = self.clone();
        let b_h = rhs.clone();
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let (ga, gb) = {
                let a = a_h.data_ref();
                let b = b_h.data_ref();
                let mut ga = vec![S::zero(); n * k];
                let mut gb = vec![S::zero(); k * m];
                for i in 0..n {
                    for p in 0..k {
                        let brow = &b.data[p * m..(p + 1) * m];
                        let grow = &g[i * m..(i + 1) * m];
                        let mut acc = S::zero();
                        for j in 0..m {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        let gbrow = &mut gb[p * m..(p + 1) * m];
                        for j in 0..m {
                            gbrow[j] += av * grow[j];
                        }
                    }
                }
                (ga, gb)
            };
            a_h.accum_grad(&ga);
            b_h.accum_grad(&gb);
        });
        Tensor::from_op("matmul", vec![n, m], out, vec![self.clone(), rhs.clone()], backward)
    }

    /// Softmax along `axis` with the usual max-subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![S::zero(); self.numel()];
        {
            let src = self.data_ref();
            for o in 0..outer {
                for c in 0..inner {
                    let at = |a: usize| (o * extent + a) * inner + c;
                    let mut mx = src.data[at(0)];
                    for a in 1..extent {
                        mx = mx.max(src.data[at(a)]);
                    }
                    let mut denom = S::zero();
                    for a in 0..extent {
                        let e = (src.data[at(a)] - mx).exp();
                        out[at(a)] = e;
                        denom += e;
                    }
                    for a in 0..extent {
                        out[at(a)] = out[at(a)] / denom;
                    }
                }
            }
        }
        let probs = out.clone();
        let parent = self.clone();
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let mut gin = vec![S::zero(); g.len()];
            for o in 0..outer {
                for c in 0..inner {
                    let at = |a: usize| (o * extent + a) * inner + c;
                    let mut dot = S::zero();
                    for a in 0..extent {
                        dot += g[at(a)] * probs[at(a)];
                    }
                    for a in 0..extent {
                        gin[at(a)] = probs[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            parent.accum_grad(&gin);
        });
        Tensor::from_op("softmax", shape, out, vec![self.clone()], backward)
    }

    /// Layer normalization over the last axis: per row,
    /// `y = (x - mean) / sqrt(var + eps) * gain + bias` with biased variance.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let shape = self.shape();
        let d = *shape.last().expect("tensor shapes are never empty");
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} and bias {:?} must both be [{d}] for input {shape:?}",
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = self.numel() / d;
        let eps_s = S::cast_from(eps);
        let inv_d = S::cast_from(1.0 / d as f64);
        let mut out = vec![S::zero(); self.numel()];
        let mut xhat = vec![S::zero(); self.numel()];
        let mut inv_sigma = vec![S::zero(); rows];
        {
            let x = self.data_ref();
            let gn = gain.data_ref();
            let bs = bias.data_ref();
            for r in 0..rows {
                let row = &x.data[r * d..(r + 1) * d];
                let mut mu = S::zero();
                for &v in row {
                    mu += v;
                }
                mu = mu * inv_d;
                let mut var = S::zero();
                for &v in row {
                    let c = v - mu;
                    var += c * c;
                }
                var = var * inv_d;
                let inv_s = (var + eps_s).sqrt().recip();
                inv_sigma[r] = inv_s;
                for i in 0..d {
                    let xh = (row[i] - mu) * inv_s;
                    xhat[r * d + i] = xh;
                    out[r * d + i] = xh * gn.data[i] + bs.data[i];
                }
            }
        }
        let x_h = self.clone();
        let g_h = gain.clone();
        let b_h = bias.clone();
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let (gx, gg, gb) = {
                let gn = g_h.data_ref();
                let mut gx = vec![S::zero(); rows * d];
                let mut gg = vec![S::zero(); d];
                let mut gb = vec![S::zero(); d];
                for r in 0..rows {
                    let mut mean_dxh = S::zero();
                    let mut mean_dxh_xh = S::zero();
                    for i in 0..d {
                        let dxh = g[r * d + i] * gn.data[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[r * d + i];
                    }
                    mean_dxh = mean_dxh * inv_d;
                    mean_dxh_xh = mean_dxh_xh * inv_d;
                    for i in 0..d {
                        let dxh = g[r * d + i] * gn.data[i];
                        gx[r * d + i] =
                            (dxh - mean_dxh - xhat[r * d + i] * mean_dxh_xh) * inv_sigma[r];
                        gg[i] += g[r * d + i] * xhat[r * d + i];
                        gb[i] += g[r * d + i];
                    }
                }
                (gx, gg, gb)
            };
            x_h.accum_grad(&gx);
            g_h.accum_grad(&gg);
            b_h.accum_grad(&gb);
        });
        Tensor::from_op(
            "layer_norm",
            shape,
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            backward,
        )
    }

    /// Negative log-likelihood of `label` under softmax of 1-D logits.
    pub fn cross_entropy(&self, label: usize) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(Error::shape("cross_entropy", format!("needs 1-D logits, got {shape:?}")));
        }
        let c = shape[0];
        if label >= c {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {label} out of range for {c} classes"),
            ));
        }
        let (loss, probs) = {
            let x = self.data_ref();
            let mut mx = x.data[0];
            for &v in &x.data[1..] {
                mx = mx.max(v);
            }
            let mut denom = S::zero();
            let mut probs = vec![S::zero(); c];
            for i in 0..c {
                let e = (x.data[i] - mx).exp();
                probs[i] = e;
                denom += e;
            }
            for p in probs.iter_mut() {
                *p = *p / denom;
            }
            let lse = mx + denom.ln();
            (lse - x.data[label], probs)
        };
        let parent = self.clone();
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let mut gin = vec![S::zero(); c];
            for i in 0..c {
                let indicator = if i == label { S::one() } else { S::zero() };
                gin[i] = g[0] * (probs[i] - indicator);
            }
            parent.accum_grad(&gin);
        });
        Tensor::from_op("cross_entropy", vec![1], vec![loss], vec![self.clone()], backward)
    }

    /// Smooth-L1 (Huber-style) distance to `target`, summed over all
    /// elements: `0.5 d^2 / beta` inside the `|d| < beta` window, otherwise
    /// `|d| - 0.5 beta`.
    pub fn smooth_l1(&self, target: &Tensor<S>, beta: f64) -> Result<Tensor<S>> {
        if self.shape() != target.shape() {
            return Err(Error::shape(
                "smooth_l1",
                format!("shapes differ: {:?} vs {:?}", self.shape(), target.shape()),
            ));
        }
        if !(beta > 0.0) {
            return Err(Error::Config(format!("smooth_l1 beta must be positive, got {beta}")));
        }
        let b = S::cast_from(beta);
        let half = S::cast_from(0.5);
        let loss = {
            let p = self.data_ref();
            let t = target.data_ref();
            let mut acc = S::zero();
            for (&pv, &tv) in p.data.iter().zip(&t.data) {
                let d = pv - tv;
                acc += if d.abs() < b { half * d * d / b } else { d.abs() - half * b };
            }
            acc
        };
        let p_h = self.clone();
        let t_h = target.clone();
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let gd: Vec<S> = {
                let p = p_h.data_ref();
                let t = t_h.data_ref();
                p.data
                    .iter()
                    .zip(&t.data)
                    .map(|(&pv, &tv)| {
                        let d = pv - tv;
                        let slope = if d.abs() < b { d / b } else { d.signum() };
                        g[0] * slope
                    })
                    .collect()
            };
            let gneg: Vec<S> = gd.iter().map(|&v| -v).collect();
            p_h.accum_grad(&gd);
            t_h.accum_grad(&gneg);
        });
        Tensor::from_op(
            "smooth_l1",
            vec![1],
            vec![loss],
            vec![self.clone(), target.clone()],
            backward,
        )
    }

    /// 3-D convolution of a `[C, T, H, W]` input with a
    /// `[F, C, kt, kh, kw]` kernel, zero padding, per-axis stride.
    pub fn conv3d(
        &self,
        kernel: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Tensor<S>> {
        let in_shape = self.shape();
        let k_shape = kernel.shape();
        if in_shape.len() != 4 {
            return Err(Error::shape("conv3d", format!("input must be [C,T,H,W], got {in_shape:?}")));
        }
        if k_shape.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("kernel must be [F,C,kt,kh,kw], got {k_shape:?}"),
            ));
        }
        if k_shape[1] != in_shape[0] {
            return Err(Error::shape(
                "conv3d",
                format!("kernel channels {} do not match input channels {}", k_shape[1], in_shape[0]),
            ));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("conv3d stride must be positive, got {stride:?}")));
        }
        let (c_in, t, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (f, kt, kh, kw) = (k_shape[0], k_shape[2], k_shape[3], k_shape[4]);
        if let Some(b) = bias {
            if b.shape() != [f] {
                return Err(Error::shape(
                    "conv3d",
                    format!("bias {:?} must be [{f}]", b.shape()),
                ));
            }
        }
        let padded = [t + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]];
        if kt > padded[0] || kh > padded[1] || kw > padded[2] {
            return Err(Error::shape(
                "conv3d",
                format!("kernel ({kt},{kh},{kw}) larger than padded input {padded:?}"),
            ));
        }
        let ot = (padded[0] - kt) / stride[0] + 1;
        let oh = (padded[1] - kh) / stride[1] + 1;
        let ow = (padded[2] - kw) / stride[2] + 1;

        let in_at = move |c: usize, it: usize, iy: usize, ix: usize| ((c * t + it) * h + iy) * w + ix;
        let k_at = move |fo: usize, c: usize, dt: usize, dy: usize, dx: usize| {
            (((fo * c_in + c) * kt + dt) * kh + dy) * kw + dx
        };
        let out_at = move |fo: usize, a: usize, b2: usize, c2: usize| ((fo * ot + a) * oh + b2) * ow + c2;

        let mut out = vec![S::zero(); f * ot * oh * ow];
        {
            let x = self.data_ref();
            let k = kernel.data_ref();
            for fo in 0..f {
                for a in 0..ot {
                    for b2 in 0..oh {
                        for c2 in 0..ow {
                            let mut acc = S::zero();
                            for c in 0..c_in {
                                for dt in 0..kt {
                                    let it = (a * stride[0] + dt) as isize - pad[0] as isize;
                                    if it < 0 || it >= t as isize {
                                        continue;
                                    }
                                    for dy in 0..kh {
                                        let iy = (b2 * stride[1] + dy) as isize - pad[1] as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for dx in 0..kw {
                                            let ix =
                                                (c2 * stride[2] + dx) as isize - pad[2] as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            acc += x.data[in_at(c, it as usize, iy as usize, ix as usize)]
                                                * k.data[k_at(fo, c, dt, dy, dx)];
                                        }
                                    }
                                }
                            }
                            out[out_at(fo, a, b2, c2)] = acc;
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bd = b.data_ref();
                for fo in 0..f {
                    for v in &mut out[fo * ot * oh * ow..(fo + 1) * ot * oh * ow] {
                        *v += bd.data[fo];
                    }
                }
            }
        }

        let x_h = self.clone();
        let k_h = kernel.clone();
        let b_h = bias.cloned();
        let parents: Vec<Tensor<S>> = match &b_h {
            Some(b) => vec![self.clone(), kernel.clone(), b.clone()],
            None => vec![self.clone(), kernel.clone()],
        };
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let (gx, gk, gb) = {
                let x = x_h.data_ref();
                let k = k_h.data_ref();
                let mut gx = vec![S::zero(); x.data.len()];
                let mut gk = vec![S::zero(); k.data.len()];
                let mut gb = vec![S::zero(); f];
                for fo in 0..f {
                    for a in 0..ot {
                        for b2 in 0..oh {
                            for c2 in 0..ow {
                                let go = g[out_at(fo, a, b2, c2)];
                                gb[fo] += go;
                                for c in 0..c_in {
                                    for dt in 0..kt {
                                        let it = (a * stride[0] + dt) as isize - pad[0] as isize;
                                        if it < 0 || it >= t as isize {
                                            continue;
                                        }
                                        for dy in 0..kh {
                                            let iy =
                                                (b2 * stride[1] + dy) as isize - pad[1] as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for dx in 0..kw {
                                                let ix = (c2 * stride[2] + dx) as isize
                                                    - pad[2] as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let ii =
                                                    in_at(c, it as usize, iy as usize, ix as usize);
                                                let ki = k_at(fo, c, dt, dy, dx);
                                                gx[ii] += go * k.data[ki];
                                                gk[ki] += go * x.data[ii];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (gx, gk, gb)
            };
            x_h.accum_grad(&gx);
            k_h.accum_grad(&gk);
            if let Some(b) = &b_h {
                b.accum_grad(&gb);
            }
        });
        Tensor::from_op("conv3d", vec![f, ot, oh, ow], out, parents, backward)
    }

    /// Mean-pools token rows laid out on a `(t, y, x)` grid, with optional
    /// trailing rows that bypass pooling untouched. Window size equals the
    /// stride, edge windows are partial, and per-axis output extents use
    /// ceiling division. Stride `[1,1,1]` reproduces the input bit for bit.
    ///
    /// Returns the pooled tensor and the coarsened grid.
    pub fn grid_mean_pool(
        &self,
        grid: [usize; 3],
        stride: [usize; 3],
        n_extra: usize,
    ) -> Result<(Tensor<S>, [usize; 3])> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("grid_mean_pool", format!("need [rows, d], got {shape:?}")));
        }
        let rows = grid[0] * grid[1] * grid[2];
        if shape[0] != rows + n_extra {
            return Err(Error::shape(
                "grid_mean_pool",
                format!("{} rows do not match grid {grid:?} plus {n_extra} extra", shape[0]),
            ));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("pool stride must be positive, got {stride:?}")));
        }
        let d = shape[1];
        let cg = [
            grid[0].div_ceil(stride[0]),
            grid[1].div_ceil(stride[1]),
            grid[2].div_ceil(stride[2]),
        ];
        let out_rows = cg[0] * cg[1] * cg[2] + n_extra;
        // Flat member lists per output cell, computed once and shared with
        // the backward closure.
        let mut members: Vec<Vec<usize>> = Vec::with_capacity(cg[0] * cg[1] * cg[2]);
        for a in 0..cg[0] {
            for b in 0..cg[1] {
                for c in 0..cg[2] {
                    let mut cell = Vec::new();
                    for tt in a * stride[0]..((a + 1) * stride[0]).min(grid[0]) {
                        for yy in b * stride[1]..((b + 1) * stride[1]).min(grid[1]) {
                            for xx in c * stride[2]..((c + 1) * stride[2]).min(grid[2]) {
                                cell.push((tt * grid[1] + yy) * grid[2] + xx);
                            }
                        }
                    }
                    members.push(cell);
                }
            }
        }
        let mut out = vec![S::zero(); out_rows * d];
        {
            let x = self.data_ref();
            for (cell_i, cell) in members.iter().enumerate() {
                let count = S::cast_from(cell.len() as f64);
                for col in 0..d {
                    let mut acc = S::zero();
                    for &r in cell {
                        acc += x.data[r * d + col];
                    }
                    out[cell_i * d + col] = acc / count;
                }
            }
            let pooled_rows = cg[0] * cg[1] * cg[2];
            for e in 0..n_extra {
                out[(pooled_rows + e) * d..(pooled_rows + e + 1) * d]
                    .copy_from_slice(&x.data[(rows + e) * d..(rows + e + 1) * d]);
            }
        }
        let parent = self.clone();
        let in_rows = rows + n_extra;
        let members_bw = members;
        let backward: BackwardFn<S> = Box::new(move |g: &[S]| {
            let mut gin = vec![S::zero(); in_rows * d];
            for (cell_i, cell) in members_bw.iter().enumerate() {
                let inv = S::cast_from(cell.len() as f64).recip();
                for col in 0..d {
                    let share = g[cell_i * d + col] * inv;
                    for &r in cell {
                        gin[r * d + col] += share;
                    }
                }
            }
            let pooled_rows = members_bw.len();
            for e in 0..n_extra {
                gin[(rows + e) * d..(rows + e + 1) * d]
                    .copy_from_slice(&g[(pooled_rows + e) * d..(pooled_rows + e + 1) * d]);
            }
            parent.accum_grad(&gin);
        });
        let out_t = Tensor::from_op(
            "grid_mean_pool",
            vec![out_rows, d],
            out,
            vec![self.clone()],
            backward,
        )?;
        Ok((out_t, cg))
    }
}

fn sigmoid_val<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
