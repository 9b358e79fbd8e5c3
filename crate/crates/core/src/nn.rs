//! Reusable layers on top of the tape: linear, convolution, layer
//! norm, residual blocks, MLP, and multi-head self-attention.
//!
//! A layer owns parameter handles (registered under a dotted name
//! prefix at construction) and replays its computation onto whatever
//! tape it is given, so the same weights serve training and inference.

use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Value};
use crate::tensor::NdArray;
use rand::Rng;

/// Dense layer `[N,din] → [N,dout]`.
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = set.add_uniform(format!("{name}.w"), &[din, dout], din, rng);
        let b = bias.then(|| set.add_zeros(format!("{name}.b"), &[1, dout]));
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, set: &ParamSet, x: Value) -> Value {
        let w = t.param(set, self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = t.param(set, b);
                t.add(y, bv)
            }
            None => y,
        }
    }
}

/// 2-d convolution layer for `[C,H,W]` maps.
pub struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let pad = k / 2;
        let w = set.add_uniform(
            format!("{name}.w"),
            &[cout, cin, k, k],
            cin * k * k,
            rng,
        );
        let b = bias.then(|| set.add_zeros(format!("{name}.b"), &[cout, 1, 1]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, set: &ParamSet, x: Value) -> Value {
        let w = t.param(set, self.w);
        let y = t.conv2d(x, w, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let bv = t.param(set, b);
                t.add(y, bv)
            }
            None => y,
        }
    }
}

/// Normalizes the last axis of `[N,M]` to zero mean / unit variance,
/// then applies a learned affine.
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = set.add(format!("{name}.g"), NdArray::full(&[1, dim], 1.0));
        let beta = set.add_zeros(format!("{name}.b"), &[1, dim]);
        LayerNorm {
            gamma,
            beta,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, t: &mut Tape, set: &ParamSet, x: Value) -> Value {
        let mu = t.mean_axis(x, 1);
        let centered = t.sub(x, mu);
        let sq = t.sqr(centered);
        let var = t.mean_axis(sq, 1);
        let var_eps = t.add_scalar(var, self.eps);
        let sd = t.sqrt(var_eps);
        let normed = t.div(centered, sd);
        let g = t.param(set, self.gamma);
        let b = t.param(set, self.beta);
        let scaled = t.mul(normed, g);
        t.add(scaled, b)
    }
}

/// Two 3×3 convolutions with a skip (1×1-projected when channel
/// counts differ): y = silu(conv2(silu(conv1(x))) + skip(x)).
pub struct ConvResBlock {
    c1: Conv2d,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ConvResBlock {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let c1 = Conv2d::new(set, rng, &format!("{name}.c1"), cin, cout, 3, 1, true);
        let c2 = Conv2d::new(set, rng, &format!("{name}.c2"), cout, cout, 3, 1, true);
        let skip = (cin != cout)
            .then(|| Conv2d::new(set, rng, &format!("{name}.skip"), cin, cout, 1, 1, false));
        ConvResBlock { c1, c2, skip }
    }

    pub fn forward(&self, t: &mut Tape, set: &ParamSet, x: Value) -> Value {
        let h = self.c1.forward(t, set, x);
        let h = t.silu(h);
        let h = self.c2.forward(t, set, h);
        let s = match &self.skip {
            Some(k) => k.forward(t, set, x),
            None => x,
        };
        let sum = t.add(h, s);
        t.silu(sum)
    }
}

/// linear → silu → linear.
pub struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
    ) -> Self {
        Mlp {
            l1: Linear::new(set, rng, &format!("{name}.l1"), din, hidden, true),
            l2: Linear::new(set, rng, &format!("{name}.l2"), hidden, dout, true),
        }
    }

    pub fn forward(&self, t: &mut Tape, set: &ParamSet, x: Value) -> Value {
        let h = self.l1.forward(t, set, x);
        let h = t.silu(h);
        self.l2.forward(t, set, h)
    }
}

/// Scaled-dot-product self-attention over a `[S,M]` sequence.
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "attention dim {dim} not divisible by {heads} heads"
        );
        MultiHeadAttention {
            wq: Linear::new(set, rng, &format!("{name}.wq"), dim, dim, false),
            wk: Linear::new(set, rng, &format!("{name}.wk"), dim, dim, false),
            wv: Linear::new(set, rng, &format!("{name}.wv"), dim, dim, false),
            wo: Linear::new(set, rng, &format!("{name}.wo"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, set: &ParamSet, x: Value) -> Value {
        let q = self.wq.forward(t, set, x);
        let k = self.wk.forward(t, set, x);
        let v = self.wv.forward(t, set, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice(q, 1, h * dh, dh);
            let kh = t.slice(k, 1, h * dh, dh);
            let vh = t.slice(v, 1, h * dh, dh);
            let kt = t.transpose2(kh);
            let logits = t.matmul(qh, kt);
            let logits = t.mul_scalar(logits, scale);
            let attn = t.softmax(logits, 1);
            outs.push(t.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat(&outs, 1)
        };
        self.wo.forward(t, set, merged)
    }
}

/// Pre-norm transformer layer: attention and MLP residuals.
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        TransformerLayer {
            ln1: LayerNorm::new(set, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(set, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(set, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(set, rng, &format!("{name}.mlp"), dim, 2 * dim, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, set: &ParamSet, x: Value) -> Value {
        let n = self.ln1.forward(t, set, x);
        let a = self.attn.forward(t, set, n);
        let x = t.add(x, a);
        let n = self.ln2.forward(t, set, x);
        let m = self.mlp.forward(t, set, n);
        t.add(x, m)
    }
}
