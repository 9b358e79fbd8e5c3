//! Reverse-mode differentiation on a linear tape.
//!
//! A [`Tape`] records one forward computation as a sequence of nodes;
//! [`Tape::backward`] walks it in reverse and fills gradients for every
//! node that (transitively) depends on a variable or parameter leaf.
//! Ops cover what the pipeline needs: dense matmul, 2-d convolution,
//! softmax, pooling, bilinear resize, elementwise math and reductions.
//! Shape mismatches are contract violations and panic with both shapes
//! named. A tape is single-writer; independent tapes may live on
//! separate threads.

use crate::params::{ParamId, ParamSet};
use crate::tensor::{
    broadcast_shape, broadcast_zip, gemm_nn, gemm_nt, gemm_tn, reduce_to_shape, NdArray,
};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    Exp,
    /// ln(max(x, eps)); gradient is 1/x where x > eps, else 0.
    LogClamped(f64),
    Tanh,
    Abs,
    Sqr,
    Sqrt,
    Silu,
    Reshape,
    Transpose2,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll,
    SumAxis {
        axis: usize,
    },
    Softmax {
        axis: usize,
    },
    MatMul,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    AvgPool {
        kh: usize,
        kw: usize,
    },
    AdaptiveAvgPool {
        oh: usize,
        ow: usize,
    },
    Bilinear {
        oh: usize,
        ow: usize,
    },
}

struct Node {
    op: Op,
    inputs: Vec<Value>,
    out: NdArray,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Records a forward pass and computes gradients on demand.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output value of a node.
    pub fn value(&self, v: Value) -> &NdArray {
        &self.nodes[v.0].out
    }

    fn push(&mut self, op: Op, inputs: Vec<Value>, out: NdArray, param: Option<ParamId>) -> Value {
        debug_assert!(
            out.all_finite(),
            "non-finite values after {:?} (shape {:?})",
            op,
            out.shape()
        );
        let needs_grad =
            param.is_some() || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            out,
            param,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    // ── Leaves ─────────────────────────────────────────────────────────────

    /// Constant input; gradients are not tracked through it.
    pub fn input(&mut self, a: NdArray) -> Value {
        self.push(Op::Leaf, vec![], a, None)
    }

    /// Differentiable leaf that is not a parameter (for gradient checks
    /// against inputs).
    pub fn var(&mut self, a: NdArray) -> Value {
        let v = self.push(Op::Leaf, vec![], a, None);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Leaf holding a copy of a parameter's current value; `backward`
    /// gradients can later be accumulated into the parameter.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Value {
        self.push(Op::Leaf, vec![], set.get(id).value.clone(), Some(id))
    }

    // ── Elementwise / broadcast ────────────────────────────────────────────

    fn binary(&mut self, op: Op, a: Value, b: Value, f: impl Fn(f64, f64) -> f64) -> Value {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            broadcast_shape(sa, sb).is_some(),
            "{:?}: incompatible shapes {:?} vs {:?}",
            op,
            sa,
            sb
        );
        let out = broadcast_zip(self.value(a), self.value(b), f);
        self.push(op, vec![a, b], out, None)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Value {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar, vec![a], out, None)
    }

    pub fn mul_scalar(&mut self, a: Value, c: f64) -> Value {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::MulScalar(c), vec![a], out, None)
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a], out, None)
    }

    /// ln(max(x, eps)); keeps cross-entropy finite on saturated scores.
    pub fn log_clamped(&mut self, a: Value, eps: f64) -> Value {
        let out = self.value(a).map(|x| x.max(eps).ln());
        self.push(Op::LogClamped(eps), vec![a], out, None)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh, vec![a], out, None)
    }

    pub fn abs(&mut self, a: Value) -> Value {
        let out = self.value(a).map(f64::abs);
        self.push(Op::Abs, vec![a], out, None)
    }

    pub fn sqr(&mut self, a: Value) -> Value {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Sqr, vec![a], out, None)
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        let out = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt, vec![a], out, None)
    }

    /// x · sigmoid(x); the smooth activation used throughout the nets.
    pub fn silu(&mut self, a: Value) -> Value {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu, vec![a], out, None)
    }

    // ── Shape ops ──────────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Value {
        let out = self.value(a).reshaped(shape);
        self.push(Op::Reshape, vec![a], out, None)
    }

    /// Transpose of a rank-2 array.
    pub fn transpose2(&mut self, a: Value) -> Value {
        let x = self.value(a);
        assert_eq!(x.rank(), 2, "transpose2 wants rank 2, got {:?}", x.shape());
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = NdArray::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.set2(j, i, x.at2(i, j));
            }
        }
        self.push(Op::Transpose2, vec![a], out, None)
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Value {
        assert!(!parts.is_empty(), "concat of zero inputs");
        let first = self.value(parts[0]).shape().to_vec();
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: shapes {:?} vs {:?} differ off axis {}",
                    s,
                    first,
                    axis
                );
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for &p in parts {
            let x = self.value(p);
            let ax = x.shape()[axis];
            for o in 0..outer {
                let src = &x.data()[o * ax * inner..(o + 1) * ax * inner];
                let dst_base = (o * axis_total + offset) * inner;
                data[dst_base..dst_base + ax * inner].copy_from_slice(src);
            }
            offset += ax;
        }
        let out = NdArray::from_vec(&out_shape, data);
        self.push(Op::Concat { axis }, parts.to_vec(), out, None)
    }

    pub fn slice(&mut self, a: Value, axis: usize, start: usize, len: usize) -> Value {
        let x = self.value(a);
        let s = x.shape();
        assert!(
            start + len <= s[axis],
            "slice [{}, {}) out of bounds for axis {} of {:?}",
            start,
            start + len,
            axis,
            s
        );
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let ax = s[axis];
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &x.data()[(o * ax + start) * inner..(o * ax + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let out = NdArray::from_vec(&out_shape, data);
        self.push(Op::Slice { axis, start, len }, vec![a], out, None)
    }

    // ── Reductions ─────────────────────────────────────────────────────────

    /// Sum of all elements, as a `[1]`-shaped scalar.
    pub fn sum_all(&mut self, a: Value) -> Value {
        let s = self.value(a).sum();
        self.push(Op::SumAll, vec![a], NdArray::scalar(s), None)
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Value, axis: usize) -> Value {
        let x = self.value(a);
        let s = x.shape();
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let ax = s[axis];
        let mut out_shape = s.to_vec();
        out_shape[axis] = 1;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..ax {
                let src = &x.data()[(o * ax + k) * inner..(o * ax + k + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src.iter()) {
                    *d += v;
                }
            }
        }
        let out = NdArray::from_vec(&out_shape, data);
        self.push(Op::SumAxis { axis }, vec![a], out, None)
    }

    pub fn mean_axis(&mut self, a: Value, axis: usize) -> Value {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis`; outputs sum to 1 and are
    /// strictly positive.
    pub fn softmax(&mut self, a: Value, axis: usize) -> Value {
        let x = self.value(a);
        let s = x.shape();
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let ax = s[axis];
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * ax + k) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..ax {
                    m = m.max(x.data()[idx(k)]);
                }
                let mut z = 0.0;
                for k in 0..ax {
                    let e = (x.data()[idx(k)] - m).exp();
                    data[idx(k)] = e;
                    z += e;
                }
                for k in 0..ax {
                    data[idx(k)] /= z;
                }
            }
        }
        let out = NdArray::from_vec(s, data);
        self.push(Op::Softmax { axis }, vec![a], out, None)
    }

    // ── Linear algebra ─────────────────────────────────────────────────────

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let (xa, xb) = (self.value(a), self.value(b));
        assert!(
            xa.rank() == 2 && xb.rank() == 2 && xa.shape()[1] == xb.shape()[0],
            "matmul: incompatible shapes {:?} vs {:?}",
            xa.shape(),
            xb.shape()
        );
        let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, xa.data(), xb.data(), &mut c);
        let out = NdArray::from_vec(&[m, n], c);
        self.push(Op::MatMul, vec![a, b], out, None)
    }

    // ── Spatial ops ────────────────────────────────────────────────────────

    /// 2-d convolution of `[C,H,W]` with weights `[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Value, w: Value, stride: usize, pad: usize) -> Value {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rank(), 3, "conv2d input must be [C,H,W], got {:?}", xv.shape());
        assert_eq!(wv.rank(), 4, "conv2d weight must be [O,C,kh,kw], got {:?}", wv.shape());
        assert_eq!(
            xv.shape()[0],
            wv.shape()[1],
            "conv2d: input channels {:?} vs weight {:?}",
            xv.shape(),
            wv.shape()
        );
        let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (o, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let col = im2col(xv, kh, kw, stride, pad, oh, ow);
        let ckk = c * kh * kw;
        let mut out = vec![0.0; o * oh * ow];
        gemm_nn(o, ckk, oh * ow, wv.data(), col.data(), &mut out);
        let out = NdArray::from_vec(&[o, oh, ow], out);
        self.push(Op::Conv2d { stride, pad }, vec![x, w], out, None)
    }

    /// Average pooling with window = stride; dims must divide exactly.
    pub fn avg_pool(&mut self, a: Value, kh: usize, kw: usize) -> Value {
        let x = self.value(a);
        assert_eq!(x.rank(), 3, "avg_pool input must be [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(
            h % kh == 0 && w % kw == 0,
            "avg_pool: {}x{} window does not divide {:?}",
            kh,
            kw,
            x.shape()
        );
        let (oh, ow) = (h / kh, w / kw);
        let mut out = NdArray::zeros(&[c, oh, ow]);
        let inv = 1.0 / (kh * kw) as f64;
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            acc += x.at3(ci, oy * kh + dy, ox * kw + dx);
                        }
                    }
                    out.set3(ci, oy, ox, acc * inv);
                }
            }
        }
        self.push(Op::AvgPool { kh, kw }, vec![a], out, None)
    }

    /// Average pooling to a fixed `oh×ow` output grid; window
    /// boundaries follow floor/ceil splits so any input size works.
    pub fn adaptive_avg_pool(&mut self, a: Value, oh: usize, ow: usize) -> Value {
        let x = self.value(a);
        assert_eq!(x.rank(), 3, "adaptive_avg_pool input must be [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = NdArray::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1) = adaptive_span(h, oh, oy);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_span(w, ow, ox);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x.at3(ci, y, xx);
                        }
                    }
                    out.set3(ci, oy, ox, acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        self.push(Op::AdaptiveAvgPool { oh, ow }, vec![a], out, None)
    }

    /// Bilinear resize of `[C,H,W]` to `[C,oh,ow]`, align-corners-false
    /// with edge clamping.
    pub fn bilinear(&mut self, a: Value, oh: usize, ow: usize) -> Value {
        let x = self.value(a);
        assert_eq!(x.rank(), 3, "bilinear input must be [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ys = bilinear_taps(h, oh);
        let xs = bilinear_taps(w, ow);
        let mut out = NdArray::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let v = (1.0 - wy) * ((1.0 - wx) * x.at3(ci, y0, x0) + wx * x.at3(ci, y0, x1))
                        + wy * ((1.0 - wx) * x.at3(ci, y1, x0) + wx * x.at3(ci, y1, x1));
                    out.set3(ci, oy, ox, v);
                }
            }
        }
        self.push(Op::Bilinear { oh, ow }, vec![a], out, None)
    }

    // ── Backward ───────────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Returns per-node gradients;
    /// panics if the output is not a scalar.
    pub fn backward(&self, out: Value) -> Gradients {
        let node = &self.nodes[out.0];
        assert!(
            node.out.is_scalar(),
            "backward requires a scalar output, got shape {:?}",
            node.out.shape()
        );
        let mut grads: Vec<Option<NdArray>> = self.nodes.iter().map(|_| None).collect();
        grads[out.0] = Some(NdArray::full(node.out.shape(), 1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<NdArray>], v: Value, delta: NdArray) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data().iter()) {
                    *gv += dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &NdArray, grads: &mut [Option<NdArray>]) {
        let node = &self.nodes[i];
        if !node.needs_grad {
            return;
        }
        let inp = |k: usize| &self.nodes[node.inputs[k].0].out;
        match node.op {
            Op::Leaf => {}
            Op::Add => {
                let a = node.inputs[0];
                let b = node.inputs[1];
                self.accumulate(grads, a, reduce_to_shape(g, inp(0).shape()));
                self.accumulate(grads, b, reduce_to_shape(g, inp(1).shape()));
            }
            Op::Sub => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                self.accumulate(grads, a, reduce_to_shape(g, inp(0).shape()));
                let neg = g.map(|v| -v);
                self.accumulate(grads, b, reduce_to_shape(&neg, inp(1).shape()));
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let da = broadcast_zip(g, inp(1), |gv, bv| gv * bv);
                let db = broadcast_zip(g, inp(0), |gv, av| gv * av);
                self.accumulate(grads, a, reduce_to_shape(&da, inp(0).shape()));
                self.accumulate(grads, b, reduce_to_shape(&db, inp(1).shape()));
            }
            Op::Div => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let da = broadcast_zip(g, inp(1), |gv, bv| gv / bv);
                let ratio = broadcast_zip(inp(0), inp(1), |av, bv| av / bv);
                let db = da.zip_map(&ratio, |q, r| -q * r);
                self.accumulate(grads, a, reduce_to_shape(&da, inp(0).shape()));
                self.accumulate(grads, b, reduce_to_shape(&db, inp(1).shape()));
            }
            Op::AddScalar => self.accumulate(grads, node.inputs[0], g.clone()),
            Op::MulScalar(c) => {
                self.accumulate(grads, node.inputs[0], g.map(|v| v * c));
            }
            Op::Exp => {
                let d = g.zip_map(&node.out, |gv, y| gv * y);
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::LogClamped(eps) => {
                let d = g.zip_map(inp(0), |gv, x| if x > eps { gv / x } else { 0.0 });
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Tanh => {
                let d = g.zip_map(&node.out, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Abs => {
                let d = g.zip_map(inp(0), |gv, x| gv * sign(x));
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Sqr => {
                let d = g.zip_map(inp(0), |gv, x| gv * 2.0 * x);
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Sqrt => {
                let d = g.zip_map(&node.out, |gv, y| gv * 0.5 / y);
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Silu => {
                let d = g.zip_map(inp(0), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                });
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Reshape => {
                self.accumulate(grads, node.inputs[0], g.reshaped(inp(0).shape()));
            }
            Op::Transpose2 => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut d = NdArray::zeros(&[c, r]);
                for i2 in 0..r {
                    for j in 0..c {
                        d.set2(j, i2, g.at2(i2, j));
                    }
                }
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Concat { axis } => {
                let s = node.out.shape();
                let mut start = 0usize;
                for (k, &p) in node.inputs.iter().enumerate() {
                    let len = inp(k).shape()[axis];
                    let d = slice_array(g, axis, start, len);
                    self.accumulate(grads, p, d);
                    start += len;
                    let _ = s;
                }
            }
            Op::Slice { axis, start, len } => {
                let src = inp(0);
                let s = src.shape();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let ax = s[axis];
                let mut d = NdArray::zeros(s);
                for o in 0..outer {
                    let dst =
                        &mut d.data_mut()[(o * ax + start) * inner..(o * ax + start + len) * inner];
                    dst.copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::SumAll => {
                let gv = g.scalar_value();
                self.accumulate(grads, node.inputs[0], NdArray::full(inp(0).shape(), gv));
            }
            Op::SumAxis { axis } => {
                let s = inp(0).shape();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let ax = s[axis];
                let mut d = NdArray::zeros(s);
                for o in 0..outer {
                    for k in 0..ax {
                        let dst =
                            &mut d.data_mut()[(o * ax + k) * inner..(o * ax + k + 1) * inner];
                        dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Softmax { axis } => {
                // dx = y ⊙ (g − Σ_axis g·y)
                let y = &node.out;
                let s = y.shape();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let ax = s[axis];
                let mut d = NdArray::zeros(s);
                for o in 0..outer {
                    for i2 in 0..inner {
                        let idx = |k: usize| (o * ax + k) * inner + i2;
                        let mut dot = 0.0;
                        for k in 0..ax {
                            dot += g.data()[idx(k)] * y.data()[idx(k)];
                        }
                        for k in 0..ax {
                            let j = idx(k);
                            d.data_mut()[j] = y.data()[j] * (g.data()[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm_nt(m, n, k, g.data(), b.data(), &mut da);
                let mut db = vec![0.0; k * n];
                gemm_tn(m, k, n, a.data(), g.data(), &mut db);
                self.accumulate(grads, node.inputs[0], NdArray::from_vec(&[m, k], da));
                self.accumulate(grads, node.inputs[1], NdArray::from_vec(&[k, n], db));
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (inp(0), inp(1));
                let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (node.out.shape()[1], node.out.shape()[2]);
                let ckk = c * kh * kw;
                // weight gradient: dW = g · colᵀ  (col rebuilt, not stored)
                let col = im2col(x, kh, kw, stride, pad, oh, ow);
                let mut dw = vec![0.0; o * ckk];
                gemm_nt(o, oh * ow, ckk, g.data(), col.data(), &mut dw);
                self.accumulate(
                    grads,
                    node.inputs[1],
                    NdArray::from_vec(w.shape(), dw),
                );
                // input gradient: dX = col2im(Wᵀ · g)
                if self.nodes[node.inputs[0].0].needs_grad {
                    let mut dcol = vec![0.0; ckk * oh * ow];
                    gemm_tn(o, ckk, oh * ow, w.data(), g.data(), &mut dcol);
                    let dx = col2im(&dcol, c, h, wd, kh, kw, stride, pad, oh, ow);
                    self.accumulate(grads, node.inputs[0], dx);
                }
            }
            Op::AvgPool { kh, kw } => {
                let x = inp(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / kh, w / kw);
                let inv = 1.0 / (kh * kw) as f64;
                let mut d = NdArray::zeros(x.shape());
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.at3(ci, oy, ox) * inv;
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let y = oy * kh + dy;
                                    let xx = ox * kw + dx;
                                    let cur = d.at3(ci, y, xx);
                                    d.set3(ci, y, xx, cur + gv);
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::AdaptiveAvgPool { oh, ow } => {
                let x = inp(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut d = NdArray::zeros(x.shape());
                for ci in 0..c {
                    for oy in 0..oh {
                        let (y0, y1) = adaptive_span(h, oh, oy);
                        for ox in 0..ow {
                            let (x0, x1) = adaptive_span(w, ow, ox);
                            let gv = g.at3(ci, oy, ox) / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let cur = d.at3(ci, y, xx);
                                    d.set3(ci, y, xx, cur + gv);
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Bilinear { oh, ow } => {
                let x = inp(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let ys = bilinear_taps(h, oh);
                let xs = bilinear_taps(w, ow);
                let mut d = NdArray::zeros(x.shape());
                for ci in 0..c {
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let gv = g.at3(ci, oy, ox);
                            let add = |d: &mut NdArray, y: usize, x2: usize, v: f64| {
                                let cur = d.at3(ci, y, x2);
                                d.set3(ci, y, x2, cur + v);
                            };
                            add(&mut d, y0, x0, gv * (1.0 - wy) * (1.0 - wx));
                            add(&mut d, y0, x1, gv * (1.0 - wy) * wx);
                            add(&mut d, y1, x0, gv * wy * (1.0 - wx));
                            add(&mut d, y1, x1, gv * wy * wx);
                        }
                    }
                }
                self.accumulate(grads, node.inputs[0], d);
            }
        }
    }
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    /// Gradient of the backward output w.r.t. this node, if tracked.
    pub fn of(&self, v: Value) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter-leaf gradient into its parameter's
    /// accumulator.
    pub fn accumulate_params(&self, tape: &Tape, set: &mut ParamSet) {
        for (i, node) in tape.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            let Some(g) = &self.grads[i] else { continue };
            let p = set.get_mut(id);
            for (pg, gv) in p.grad.data_mut().iter_mut().zip(g.data().iter()) {
                *pg += gv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Input window [start, end) covered by output cell `o` when adaptively
/// pooling `src` elements down (or up) to `dst`. Never empty.
fn adaptive_span(src: usize, dst: usize, o: usize) -> (usize, usize) {
    let start = o * src / dst;
    let end = ((o + 1) * src).div_ceil(dst);
    (start, end.max(start + 1).min(src.max(1)))
}

/// Source taps for one resized axis: (lo index, hi index, hi weight).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn im2col(
    x: &NdArray,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> NdArray {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = NdArray::zeros(&[c * kh * kw, oh * ow]);
    let cd = col.data_mut();
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (ci * h + iy as usize) * w;
                    let dst_base = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cd[dst_base + ox] = x.data()[src_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> NdArray {
    let mut dx = NdArray::zeros(&[c, h, w]);
    let dd = dx.data_mut();
    for ci in 0..c {
        for dy in 0..kh {
            for dx2 in 0..kw {
                let row = (ci * kh + dy) * kw + dx2;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w;
                    let src_base = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx2) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dd[dst_base + ix as usize] += dcol[src_base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn slice_array(x: &NdArray, axis: usize, start: usize, len: usize) -> NdArray {
    let s = x.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let ax = s[axis];
    let mut out_shape = s.to_vec();
    out_shape[axis] = len;
    let mut data = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &x.data()[(o * ax + start) * inner..(o * ax + start + len) * inner];
        data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    NdArray::from_vec(&out_shape, data)
}
