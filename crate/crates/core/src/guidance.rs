//! Depth discretization and soft score encoding.
//!
//! Depth regression is recast as classification over K guidance values
//! per pixel. Ground truth becomes a soft assignment through a
//! Laplace-style kernel; predictions come back to metric depth through
//! an expectation over the same guidance.

use crate::tensor::NdArray;

/// Centers of K equal-width bins over [d_min, d_max].
///
/// With Δ = (d_max − d_min)/K the i-th value is d_min + (i + ½)Δ, so
/// the sequence is strictly increasing and symmetric about the range
/// midpoint.
pub fn init_uniform_guidance(d_min: f64, d_max: f64, k: usize) -> NdArray {
    assert!(k > 0, "guidance needs at least one bin");
    assert!(
        d_max > d_min,
        "invalid depth range [{d_min}, {d_max}]"
    );
    let delta = (d_max - d_min) / k as f64;
    let data = (0..k)
        .map(|i| d_min + (i as f64 + 0.5) * delta)
        .collect();
    NdArray::from_vec(&[k], data)
}

/// Bin width used by [`init_uniform_guidance`].
pub fn guidance_spacing(d_min: f64, d_max: f64, k: usize) -> f64 {
    (d_max - d_min) / k as f64
}

/// Repeats a flat `[K]` guidance vector into a per-pixel `[K,H,W]` map.
pub fn tile_guidance(g: &NdArray, h: usize, w: usize) -> NdArray {
    assert_eq!(g.rank(), 1, "expected flat guidance, got {:?}", g.shape());
    let k = g.shape()[0];
    let mut out = NdArray::zeros(&[k, h, w]);
    for (i, &v) in g.data().iter().enumerate() {
        out.data_mut()[i * h * w..(i + 1) * h * w].fill(v);
    }
    out
}

/// Soft assignment of a depth map onto per-pixel guidance.
///
/// For a valid pixel (depth > 0) the score of guidance value gᵢ is
/// exp(−|d − gᵢ|/T) normalized over i, so scores are positive, sum to
/// one, and peak at the nearest guidance value. Invalid pixels get an
/// all-zero column. `temperature` defaults to 1 in callers; smaller
/// values sharpen the assignment.
pub fn encode_laplace(depth: &NdArray, guidance: &NdArray, temperature: f64) -> NdArray {
    assert_eq!(depth.rank(), 2, "depth must be [H,W], got {:?}", depth.shape());
    assert_eq!(
        guidance.rank(),
        3,
        "guidance must be [K,H,W], got {:?}",
        guidance.shape()
    );
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    assert_eq!(
        &guidance.shape()[1..],
        &[h, w],
        "guidance {:?} does not cover depth [{h},{w}]",
        guidance.shape()
    );
    assert!(temperature > 0.0, "temperature must be positive");
    let k = guidance.shape()[0];
    let hw = h * w;
    let mut out = NdArray::zeros(&[k, h, w]);
    let mut dist = vec![0.0; k];
    for p in 0..hw {
        let d = depth.data()[p];
        if d <= 0.0 {
            continue; // invalid: leave the column at zero
        }
        let mut lo = f64::INFINITY;
        for (i, slot) in dist.iter_mut().enumerate() {
            let a = (d - guidance.data()[i * hw + p]).abs();
            *slot = a;
            lo = lo.min(a);
        }
        let mut z = 0.0;
        for slot in dist.iter_mut() {
            *slot = (-(*slot - lo) / temperature).exp();
            z += *slot;
        }
        for (i, &e) in dist.iter().enumerate() {
            out.data_mut()[i * hw + p] = e / z;
        }
    }
    out
}

/// Classification targets for training; identical construction to
/// [`encode_laplace`] at unit temperature.
pub fn make_target_scores(gt: &NdArray, guidance: &NdArray) -> NdArray {
    encode_laplace(gt, guidance, 1.0)
}

/// Expected depth under normalized scores: D(p) = Σᵢ L(p,i)·g(p,i).
///
/// Reference implementation outside the tape, used by decoding checks
/// and evaluation; the model composes the same contraction from tape
/// ops.
pub fn expectation_decode(scores: &NdArray, guidance: &NdArray) -> NdArray {
    assert_eq!(
        scores.shape(),
        guidance.shape(),
        "scores {:?} vs guidance {:?}",
        scores.shape(),
        guidance.shape()
    );
    assert_eq!(scores.rank(), 3, "expected [K,H,W]");
    let (k, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let hw = h * w;
    let mut out = NdArray::zeros(&[h, w]);
    for p in 0..hw {
        let mut acc = 0.0;
        for i in 0..k {
            acc += scores.data()[i * hw + p] * guidance.data()[i * hw + p];
        }
        out.data_mut()[p] = acc;
    }
    out
}
