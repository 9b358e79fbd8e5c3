//! Multi-scale feature extraction.
//!
//! Three 3×3 branches preprocess sparse depth, RGB, and the logistic
//! score volume; a UNet of residual stages downsamples to 1/8 scale
//! where spatial pyramid pooling widens the receptive field, and an
//! additive-skip decoder climbs back up. Outputs F₁…F₄ live at scales
//! 1/8, 1/4, 1/2, 1 with widths 4w, 3w, 2w, w for base width w.

use crate::nn::{Conv2d, ConvResBlock};
use crate::params::ParamSet;
use crate::tape::{Tape, Value};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    /// Base channel width at the original scale.
    pub width: usize,
    /// Residual blocks per stage.
    pub blocks: usize,
    /// Pyramid-pooling bin counts (adaptive, so any 1/8 grid works).
    pub spp_bins: Vec<usize>,
    /// Channels of the logistic score volume (K).
    pub score_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            width: 16,
            blocks: 2,
            spp_bins: vec![1, 2, 4],
            score_channels: 16,
        }
    }
}

impl EncoderConfig {
    /// Channel widths at scales 1, 1/2, 1/4, 1/8.
    pub fn widths(&self) -> [usize; 4] {
        [self.width, 2 * self.width, 3 * self.width, 4 * self.width]
    }

    fn branch_width(&self) -> usize {
        (self.width / 4).max(2)
    }
}

/// Tape handles for the four feature maps; scales 1/8 → 1.
pub struct EncoderOutput {
    /// `[4w, H/8, W/8]`
    pub f1: Value,
    /// `[3w, H/4, W/4]`
    pub f2: Value,
    /// `[2w, H/2, W/2]`
    pub f3: Value,
    /// `[w, H, W]`
    pub f4: Value,
}

/// Per-input 3×3 convolutions whose outputs concatenate channelwise.
pub struct Preprocess {
    rgb: Conv2d,
    sparse: Conv2d,
    scores: Conv2d,
}

impl Preprocess {
    pub fn new(set: &mut ParamSet, rng: &mut impl Rng, name: &str, cfg: &EncoderConfig) -> Self {
        let b = cfg.branch_width();
        Preprocess {
            rgb: Conv2d::new(set, rng, &format!("{name}.rgb"), 3, b, 3, 1, true),
            sparse: Conv2d::new(set, rng, &format!("{name}.sparse"), 1, b, 3, 1, true),
            scores: Conv2d::new(
                set,
                rng,
                &format!("{name}.scores"),
                cfg.score_channels,
                b,
                3,
                1,
                true,
            ),
        }
    }

    /// rgb `[3,H,W]`, sparse `[1,H,W]`, scores `[K,H,W]` → `[3b,H,W]`.
    pub fn forward(
        &self,
        t: &mut Tape,
        set: &ParamSet,
        rgb: Value,
        sparse: Value,
        scores: Value,
    ) -> Value {
        let (hr, wr) = {
            let s = t.value(rgb).shape();
            (s[1], s[2])
        };
        for v in [sparse, scores] {
            let s = t.value(v).shape();
            assert_eq!(
                (s[1], s[2]),
                (hr, wr),
                "preprocess inputs misaligned: {:?} vs rgb {}x{}",
                s,
                hr,
                wr
            );
        }
        let a = self.rgb.forward(t, set, rgb);
        let a = t.silu(a);
        let b = self.sparse.forward(t, set, sparse);
        let b = t.silu(b);
        let c = self.scores.forward(t, set, scores);
        let c = t.silu(c);
        t.concat(&[a, b, c], 0)
    }
}

fn make_stage(
    set: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    blocks: usize,
    cin: usize,
    cout: usize,
) -> Vec<ConvResBlock> {
    (0..blocks.max(1))
        .map(|i| {
            let from = if i == 0 { cin } else { cout };
            ConvResBlock::new(set, rng, &format!("{name}.{i}"), from, cout)
        })
        .collect()
}

struct SppBranch {
    bin: usize,
    reduce: Conv2d,
}

/// UNet over the preprocessed stack.
pub struct Encoder {
    pub pre: Preprocess,
    stages: [Vec<ConvResBlock>; 4],
    downs: [Conv2d; 3],
    spp: Vec<SppBranch>,
    spp_fuse: Conv2d,
    ups: [Conv2d; 3],
    decs: [ConvResBlock; 3],
}

impl Encoder {
    pub fn new(set: &mut ParamSet, rng: &mut impl Rng, name: &str, cfg: &EncoderConfig) -> Self {
        let [w0, w1, w2, w3] = cfg.widths();
        let pre = Preprocess::new(set, rng, &format!("{name}.pre"), cfg);
        let stem = 3 * cfg.branch_width();
        let stages = [
            make_stage(set, rng, &format!("{name}.s1"), cfg.blocks, stem, w0),
            make_stage(set, rng, &format!("{name}.s2"), cfg.blocks, w1, w1),
            make_stage(set, rng, &format!("{name}.s3"), cfg.blocks, w2, w2),
            make_stage(set, rng, &format!("{name}.s4"), cfg.blocks, w3, w3),
        ];
        let downs = [
            Conv2d::new(set, rng, &format!("{name}.d1"), w0, w1, 3, 2, true),
            Conv2d::new(set, rng, &format!("{name}.d2"), w1, w2, 3, 2, true),
            Conv2d::new(set, rng, &format!("{name}.d3"), w2, w3, 3, 2, true),
        ];
        let reduce_w = (w3 / 4).max(1);
        let spp = cfg
            .spp_bins
            .iter()
            .map(|&bin| SppBranch {
                bin,
                reduce: Conv2d::new(
                    set,
                    rng,
                    &format!("{name}.spp{bin}"),
                    w3,
                    reduce_w,
                    1,
                    1,
                    true,
                ),
            })
            .collect::<Vec<_>>();
        let spp_fuse = Conv2d::new(
            set,
            rng,
            &format!("{name}.sppfuse"),
            w3 + spp.len() * reduce_w,
            w3,
            1,
            1,
            true,
        );
        let ups = [
            Conv2d::new(set, rng, &format!("{name}.u3"), w3, w2, 1, 1, true),
            Conv2d::new(set, rng, &format!("{name}.u2"), w2, w1, 1, 1, true),
            Conv2d::new(set, rng, &format!("{name}.u1"), w1, w0, 1, 1, true),
        ];
        let decs = [
            ConvResBlock::new(set, rng, &format!("{name}.dec3"), w2, w2),
            ConvResBlock::new(set, rng, &format!("{name}.dec2"), w1, w1),
            ConvResBlock::new(set, rng, &format!("{name}.dec1"), w0, w0),
        ];
        Encoder {
            pre,
            stages,
            downs,
            spp,
            spp_fuse,
            ups,
            decs,
        }
    }

    fn run_stage(&self, t: &mut Tape, set: &ParamSet, idx: usize, mut x: Value) -> Value {
        for block in &self.stages[idx] {
            x = block.forward(t, set, x);
        }
        x
    }

    /// Spatial pyramid pooling: per bin, average-pool to bin×bin
    /// (adaptively, so any grid size works), reduce channels 1×1,
    /// resize back, concatenate, fuse.
    fn run_spp(&self, t: &mut Tape, set: &ParamSet, e4: Value) -> Value {
        let (h8, w8) = {
            let s = t.value(e4).shape();
            (s[1], s[2])
        };
        let mut parts = vec![e4];
        for branch in &self.spp {
            let pooled = t.adaptive_avg_pool(e4, branch.bin, branch.bin);
            let reduced = branch.reduce.forward(t, set, pooled);
            let reduced = t.silu(reduced);
            parts.push(t.bilinear(reduced, h8, w8));
        }
        let cat = t.concat(&parts, 0);
        let fused = self.spp_fuse.forward(t, set, cat);
        t.silu(fused)
    }

    /// Full pass from the raw inputs; dims must be divisible by 8.
    pub fn forward(
        &self,
        t: &mut Tape,
        set: &ParamSet,
        rgb: Value,
        sparse: Value,
        scores: Value,
    ) -> EncoderOutput {
        let (h, w) = {
            let s = t.value(rgb).shape();
            (s[1], s[2])
        };
        assert!(
            h % 8 == 0 && w % 8 == 0,
            "encoder input {h}x{w} not divisible by 8"
        );
        let stem = self.pre.forward(t, set, rgb, sparse, scores);
        let e1 = self.run_stage(t, set, 0, stem);
        let d1 = self.downs[0].forward(t, set, e1);
        let e2 = self.run_stage(t, set, 1, d1);
        let d2 = self.downs[1].forward(t, set, e2);
        let e3 = self.run_stage(t, set, 2, d2);
        let d3 = self.downs[2].forward(t, set, e3);
        let e4 = self.run_stage(t, set, 3, d3);
        let f1 = self.run_spp(t, set, e4);

        let up = t.bilinear(f1, h / 4, w / 4);
        let up = self.ups[0].forward(t, set, up);
        let sum = t.add(up, e3);
        let f2 = self.decs[0].forward(t, set, sum);

        let up = t.bilinear(f2, h / 2, w / 2);
        let up = self.ups[1].forward(t, set, up);
        let sum = t.add(up, e2);
        let f3 = self.decs[1].forward(t, set, sum);

        let up = t.bilinear(f3, h, w);
        let up = self.ups[2].forward(t, set, up);
        let sum = t.add(up, e1);
        let f4 = self.decs[2].forward(t, set, sum);

        EncoderOutput { f1, f2, f3, f4 }
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, DEFAULT_STEP};
    use crate::tensor::NdArray;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], seed: u64) -> NdArray {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        NdArray::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn build(width: usize, k: usize) -> (ParamSet, Encoder, EncoderConfig) {
        let cfg = EncoderConfig {
            width,
            blocks: 1,
            spp_bins: vec![1, 2, 4],
            score_channels: k,
        };
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = Encoder::new(&mut set, &mut rng, "enc", &cfg);
        (set, enc, cfg)
    }

    fn run(
        enc: &Encoder,
        set: &ParamSet,
        k: usize,
        h: usize,
        w: usize,
    ) -> (Tape, EncoderOutput) {
        let mut t = Tape::new();
        let rgb = t.input(rand_array(&[3, h, w], 1));
        let sparse = t.input(rand_array(&[1, h, w], 2).map(f64::abs));
        let scores = t.input(rand_array(&[k, h, w], 3).map(f64::abs));
        let out = enc.forward(&mut t, set, rgb, sparse, scores);
        (t, out)
    }

    #[test]
    fn scale_law_64() {
        let (set, enc, cfg) = build(4, 4);
        let [w0, w1, w2, w3] = cfg.widths();
        let (t, out) = run(&enc, &set, 4, 64, 64);
        assert_eq!(t.value(out.f1).shape(), &[w3, 8, 8]);
        assert_eq!(t.value(out.f2).shape(), &[w2, 16, 16]);
        assert_eq!(t.value(out.f3).shape(), &[w1, 32, 32]);
        assert_eq!(t.value(out.f4).shape(), &[w0, 64, 64]);
    }

    #[test]
    fn doubling_input_doubles_every_scale() {
        let (set, enc, _) = build(4, 4);
        let (ta, a) = run(&enc, &set, 4, 16, 24);
        let (tb, b) = run(&enc, &set, 4, 32, 48);
        for (va, vb) in [(a.f1, b.f1), (a.f2, b.f2), (a.f3, b.f3), (a.f4, b.f4)] {
            let (sa, sb) = (ta.value(va).shape(), tb.value(vb).shape());
            assert_eq!(sa[1] * 2, sb[1]);
            assert_eq!(sa[2] * 2, sb[2]);
        }
    }

    #[test]
    fn single_pixel_coarse_grid_still_works() {
        // on an 8×8 input the 1/8 grid is one pixel; adaptive pooling
        // keeps every SPP branch alive
        let (set, enc, _) = build(4, 4);
        let (t, out) = run(&enc, &set, 4, 8, 8);
        assert_eq!(t.value(out.f1).shape()[1], 1);
    }

    #[test]
    fn zero_preprocess_weights_zero_stem() {
        let (mut set, enc, _) = build(4, 4);
        for id in set.ids().collect::<Vec<_>>() {
            if set.get(id).name.starts_with("enc.pre.") {
                set.get_mut(id).value.data_mut().fill(0.0);
            }
        }
        let mut t = Tape::new();
        let rgb = t.input(rand_array(&[3, 8, 8], 1));
        let sparse = t.input(rand_array(&[1, 8, 8], 2));
        let scores = t.input(rand_array(&[4, 8, 8], 3));
        let stem = enc.pre.forward(&mut t, &set, rgb, sparse, scores);
        assert!(t.value(stem).data().iter().all(|&v| v == 0.0));
        assert_eq!(t.value(stem).shape()[0], 6); // 3 branches × width 2
    }

    #[test]
    fn outputs_finite_across_seeds() {
        let (set, enc, _) = build(4, 4);
        for seed in 0..100 {
            let mut t = Tape::new();
            let rgb = t.input(rand_array(&[3, 8, 8], seed).map(|v| v * 0.5 + 0.5));
            let sparse = t.input(rand_array(&[1, 8, 8], seed + 1000).map(f64::abs));
            let scores = t.input(rand_array(&[4, 8, 8], seed + 2000).map(f64::abs));
            let out = enc.forward(&mut t, &set, rgb, sparse, scores);
            for v in [out.f1, out.f2, out.f3, out.f4] {
                assert!(t.value(v).all_finite());
            }
        }
    }

    #[test]
    fn preprocess_gradients_pass_finite_difference() {
        let cfg = EncoderConfig {
            width: 4,
            blocks: 1,
            spp_bins: vec![1],
            score_channels: 3,
        };
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pre = Preprocess::new(&mut set, &mut rng, "pre", &cfg);
        let rgb = rand_array(&[3, 6, 6], 10);
        let sparse = rand_array(&[1, 6, 6], 11);
        let scores = rand_array(&[3, 6, 6], 12);
        let mut fwd = |t: &mut Tape, s: &ParamSet| {
            let r = t.input(rgb.clone());
            let sp = t.input(sparse.clone());
            let sc = t.input(scores.clone());
            let y = pre.forward(t, s, r, sp, sc);
            let y2 = t.sqr(y);
            t.sum_all(y2)
        };
        let err = check_param_grads(&set, &mut fwd, DEFAULT_STEP, 0);
        assert!(err <= 1e-6, "worst relative error {err}");
    }
}
