//! Hierarchical offset translation.
//!
//! After the coarse clustering prediction, each finer scale compares
//! the pooled sparse depth against the upsampled prediction to form a
//! signed depth cue, estimates one global offset (unbounded) and K
//! local offsets (tanh-bounded) per pixel, shifts the guidance by
//! their sum, and decodes a refined depth map. A final prune step
//! drops sparse points whose residual against the original-scale
//! prediction exceeds a threshold, and a dedicated estimator adjusts
//! the guidance once more from the cleaned cue while reusing the
//! original-scale scores.

use crate::cluster::DepthHead;
use crate::depth::{DepthMap, SparseDepthMap};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvResBlock};
use crate::params::ParamSet;
use crate::tape::{Tape, Value};
use crate::tensor::NdArray;
use rand::Rng;

/// Keeps the tanh bound strict in floating point: f64 tanh rounds to
/// exactly ±1 once |x| ≳ 19, which would let a local offset consume
/// the whole band and collapse an adjacent guidance gap to zero. The
/// guard reserves 0.1 % of the band, so each adjustment leaves at
/// least 10⁻³ of the previous gap — after the pipeline's four chained
/// adjustments still orders of magnitude above rounding error.
const BAND_GUARD: f64 = 1.0 - 1e-3;

/// Residual block on [feature ‖ cue], then a linear 3×3 global
/// regressor (1 channel, no activation) and a tanh-bounded 3×3 local
/// regressor (K channels, scaled by the per-pixel band).
pub struct OffsetEstimator {
    res: ConvResBlock,
    global: Conv2d,
    local: Conv2d,
}

impl OffsetEstimator {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        c_feat: usize,
        c_cue: usize,
        k: usize,
    ) -> Self {
        OffsetEstimator {
            res: ConvResBlock::new(set, rng, &format!("{name}.res"), c_feat + c_cue, c_feat),
            global: Conv2d::new(set, rng, &format!("{name}.glob"), c_feat, 1, 3, 1, true),
            local: Conv2d::new(set, rng, &format!("{name}.loc"), c_feat, k, 3, 1, true),
        }
    }

    /// Returns (global `[1,h,w]`, local `[K,h,w]`). `band` is the
    /// per-pixel safe half-width `[1,h,w]`; gradients flow through it.
    pub fn forward(
        &self,
        t: &mut Tape,
        set: &ParamSet,
        feat: Value,
        cue: Value,
        band: Value,
    ) -> (Value, Value) {
        let x = t.concat(&[feat, cue], 0);
        let h = self.res.forward(t, set, x);
        let global = self.global.forward(t, set, h);
        let raw = self.local.forward(t, set, h);
        let bounded = t.tanh(raw);
        let guarded = t.mul_scalar(bounded, BAND_GUARD);
        let local = t.mul(guarded, band);
        (global, local)
    }
}

/// cue = S − D at valid sparse pixels, 0 elsewhere. `sparse` is the
/// pooled `[2,h,w]` (max/min) or original `[1,h,w]` grid with 0
/// marking missing data; `d` is the (already upsampled) prediction
/// `[1,h,w]`, broadcast over cue channels.
pub fn compute_cue(t: &mut Tape, sparse: &NdArray, d: Value) -> Value {
    let mask = t.input(sparse.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    let s = t.input(sparse.clone());
    let diff = t.sub(s, d);
    t.mul(diff, mask)
}

/// Exponent of the power-mean bound in [`guidance_band`]. Larger
/// values track the hard minimum more closely; 32 keeps the uniform
/// case within 10 % of Δ/2 for K ≤ 32 while staying smooth.
const BAND_POWER_SQRTS: usize = 5; // p = 2⁵ = 32

/// Per-pixel safe half-width `[1,h,w]` for local offsets, computed
/// from the current guidance gaps and the initial bin width Δ.
///
/// band = scale · ½ · (Σⱼ uⱼ⁻ᵖ)^(−1/p) over u = {adjacent gaps, Δ},
/// with p = 32. The power sum (without the 1/n of a true power mean)
/// is strictly below min(u), so offsets bounded by it can never close
/// a gap: per-pixel guidance stays strictly increasing through any
/// chain of adjustments. Unlike a hard minimum it is differentiable
/// everywhere, which end-to-end gradient checks rely on — uniform
/// guidance puts every gap exactly at Δ, the hard min's kink. At that
/// uniform start the bound evaluates to ½·Δ·K^(−1/32) (≈ 0.92·Δ/2 for
/// K = 16).
///
/// Evaluated stably as m·(Σ (m/uⱼ)ᵖ)^(−1/p) with m = min(u); the
/// factor m cancels algebraically, so treating it as a constant
/// changes neither the value nor the gradient.
pub fn guidance_band(g: &NdArray, delta: f64, scale: f64) -> NdArray {
    let s = g.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let mut out = NdArray::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut u = Vec::with_capacity(k);
            for i in 0..k.saturating_sub(1) {
                u.push(g.at3(i + 1, y, x) - g.at3(i, y, x));
            }
            u.push(delta);
            let m = u.iter().copied().fold(f64::INFINITY, f64::min);
            // same op order as the tape version: 5 squarings, 5 roots
            let mut sum = 0.0;
            for &v in &u {
                let mut r = m / v;
                for _ in 0..BAND_POWER_SQRTS {
                    r = r * r;
                }
                sum += r;
            }
            let mut root = sum;
            for _ in 0..BAND_POWER_SQRTS {
                root = root.sqrt();
            }
            out.set3(0, y, x, scale * 0.5 * (m / root));
        }
    }
    out
}

/// Tape version of [`guidance_band`]; same formula, gradients flow
/// into the guidance gaps.
pub fn guidance_band_value(t: &mut Tape, g: Value, delta: f64, scale: f64) -> Value {
    let shape = t.value(g).shape().to_vec();
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let upper = t.slice(g, 0, 1, k - 1);
    let lower = t.slice(g, 0, 0, k - 1);
    let gaps = t.sub(upper, lower);
    let delta_chan = t.input(NdArray::full(&[1, h, w], delta));
    let u = t.concat(&[gaps, delta_chan], 0);

    // detached per-pixel minimum; cancels algebraically (see above)
    let uv = t.value(u);
    let mut m_arr = NdArray::full(&[1, h, w], f64::INFINITY);
    for i in 0..k {
        for y in 0..h {
            for x in 0..w {
                let cur = m_arr.at3(0, y, x);
                m_arr.set3(0, y, x, cur.min(uv.at3(i, y, x)));
            }
        }
    }
    let mut m_tiled = NdArray::zeros(&[k, h, w]);
    for i in 0..k {
        for y in 0..h {
            for x in 0..w {
                m_tiled.set3(i, y, x, m_arr.at3(0, y, x));
            }
        }
    }
    let m_k = t.input(m_tiled);
    let m_1 = t.input(m_arr);
    let mut r = t.div(m_k, u);
    for _ in 0..BAND_POWER_SQRTS {
        r = t.sqr(r);
    }
    let mut root = t.sum_axis(r, 0);
    for _ in 0..BAND_POWER_SQRTS {
        root = t.sqrt(root);
    }
    let soft_min = t.div(m_1, root);
    t.mul_scalar(soft_min, 0.5 * scale)
}

/// gₛ(x,y,i) = g_prev(x,y,i) + global(x,y) + local(x,y,i).
pub fn adjust_guidance(t: &mut Tape, g_prev: Value, global: Value, local: Value) -> Value {
    let shifted = t.add(g_prev, global);
    t.add(shifted, local)
}

/// D = Σᵢ L(i)·g(i) over the bin axis; `[K,h,w] → [1,h,w]`.
pub fn decode_depth(t: &mut Tape, scores: Value, guidance: Value) -> Value {
    let prod = t.mul(scores, guidance);
    t.sum_axis(prod, 0)
}

/// One refinement scale: depth head on the upsampled depth feature
/// plus the offset estimator fed by the encoder feature and cue.
pub struct RefineStage {
    pub head: DepthHead,
    pub est: OffsetEstimator,
}

impl RefineStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        m: usize,
        c_feat: usize,
        c_cue: usize,
        k: usize,
    ) -> Self {
        RefineStage {
            head: DepthHead::new(set, rng, &format!("{name}.head"), m, k),
            est: OffsetEstimator::new(set, rng, &format!("{name}.est"), c_feat, c_cue, k),
        }
    }
}

/// Output of one refinement: decoded depth, scores, per-pixel
/// guidance, and the upsampled depth feature — all at the new scale.
pub struct Refined {
    pub d: Value,
    pub l: Value,
    pub g: Value,
    pub f_tilde: Value,
}

/// Doubles the resolution and refines: F̃ₛ = Up(F̃_prev), Lₛ from the
/// depth head, cue from the pooled sparse map vs Up(D_prev), offsets
/// shift Up(g_prev), and Dₛ decodes the result. `zero_cue` feeds the
/// estimator an all-zero cue (for ablating the sparse signal).
#[allow(clippy::too_many_arguments)]
pub fn refine_scale(
    t: &mut Tape,
    set: &ParamSet,
    stage: &RefineStage,
    f_tilde_prev: Value,
    f_s: Value,
    sparse_s: &NdArray,
    d_prev: Value,
    g_prev: Value,
    delta: f64,
    band_scale: f64,
    zero_cue: bool,
) -> Refined {
    let shape = t.value(f_s).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    assert_eq!(
        &sparse_s.shape()[1..],
        &[h, w],
        "sparse grid {:?} does not match feature scale {}×{}",
        sparse_s.shape(),
        h,
        w
    );
    let f_tilde = t.bilinear(f_tilde_prev, h, w);
    let l = stage.head.forward(t, set, f_tilde);
    let d_up = t.bilinear(d_prev, h, w);
    let g_up = t.bilinear(g_prev, h, w);
    let masked = if zero_cue {
        NdArray::zeros(sparse_s.shape())
    } else {
        sparse_s.clone()
    };
    let cue = compute_cue(t, &masked, d_up);
    let band = guidance_band_value(t, g_up, delta, band_scale);
    let (global, local) = stage.est.forward(t, set, f_s, cue, band);
    let g = adjust_guidance(t, g_up, global, local);
    let d = decode_depth(t, l, g);
    Refined { d, l, g, f_tilde }
}

/// Keeps sparse points whose residual against the original-scale
/// prediction stays below τ: S₅ = S₄·1[|S₄−D₄| < τ].
pub fn prune_filter(s4: &SparseDepthMap, d4: &DepthMap, tau: f64) -> Result<SparseDepthMap> {
    if tau <= 0.0 {
        return Err(Error::config(format!(
            "prune threshold must be positive, got {tau}"
        )));
    }
    assert_eq!(
        (s4.height(), s4.width()),
        (d4.height(), d4.width()),
        "prune inputs must share the original scale"
    );
    let mut out = NdArray::zeros(&[s4.height(), s4.width()]);
    for y in 0..s4.height() {
        for x in 0..s4.width() {
            let s = s4.at(y, x);
            if s > 0.0 && (s - d4.at(y, x)).abs() < tau {
                out.data_mut()[y * s4.width() + x] = s;
            }
        }
    }
    Ok(SparseDepthMap::new(out))
}

/// Final refinement from the pruned sparse map: cue₅ = S₅ − D₄ (same
/// scale, no upsampling), a dedicated estimator shifts g₄, and the
/// original-scale scores L₄ are reused for decoding.
#[allow(clippy::too_many_arguments)]
pub fn prune_refine(
    t: &mut Tape,
    set: &ParamSet,
    ptb: &OffsetEstimator,
    l4: Value,
    g4: Value,
    s5: &SparseDepthMap,
    f4: Value,
    d4: Value,
    delta: f64,
    band_scale: f64,
) -> (Value, Value) {
    let (h, w) = (s5.height(), s5.width());
    let sparse = s5.array().reshaped(&[1, h, w]);
    let cue = compute_cue(t, &sparse, d4);
    let band = guidance_band_value(t, g4, delta, band_scale);
    let (global, local) = ptb.forward(t, set, f4, cue, band);
    let g5 = adjust_guidance(t, g4, global, local);
    let d5 = decode_depth(t, l4, g5);
    (d5, g5)
}
