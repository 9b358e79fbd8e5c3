//! Clustering transformer over learnable depth centers.
//!
//! The 1/8-scale feature map is flattened into tokens (1×1 patches,
//! linear projection, Fourier position embedding). Self-attention
//! layers propagate information across the joint [centers ‖ tokens]
//! sequence; cross-attention then soft-assigns every token to a center
//! (softmax over centers, raw dot products — no 1/√d scaling), centers
//! are updated as assignment-weighted token values, and a depth feature
//! with the original 1/8 shape is reconstructed from token residuals
//! plus an MLP of each token's center mixture.

use crate::nn::{Conv2d, Linear, Mlp, TransformerLayer};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Value};
use crate::tensor::NdArray;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    /// Number of depth centers (= guidance values).
    pub k: usize,
    /// Latent dim; must equal the encoder's 1/8-scale width.
    pub m: usize,
    /// Self-attention propagate layers.
    pub layers: usize,
    pub heads: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 16,
            m: 64,
            layers: 2,
            heads: 1,
        }
    }
}

pub struct ClusteringModule {
    /// `[K,M]`, one learnable center per row.
    pub centers: ParamId,
    token_proj: Linear,
    prop: Vec<TransformerLayer>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    rec_mlp: Mlp,
    k: usize,
    m: usize,
}

impl ClusteringModule {
    pub fn new(set: &mut ParamSet, rng: &mut impl Rng, name: &str, cfg: &ClusterConfig) -> Self {
        let m = cfg.m;
        let centers = set.add_uniform(format!("{name}.centers"), &[cfg.k, m], m, rng);
        ClusteringModule {
            centers,
            token_proj: Linear::new(set, rng, &format!("{name}.tok"), m, m, true),
            prop: (0..cfg.layers)
                .map(|i| TransformerLayer::new(set, rng, &format!("{name}.prop.{i}"), m, cfg.heads))
                .collect(),
            wq: Linear::new(set, rng, &format!("{name}.wq"), m, m, false),
            wk: Linear::new(set, rng, &format!("{name}.wk"), m, m, false),
            wv: Linear::new(set, rng, &format!("{name}.wv"), m, m, false),
            rec_mlp: Mlp::new(set, rng, &format!("{name}.rec"), m, 2 * m, m),
            k: cfg.k,
            m,
        }
    }

    /// Flattens `[M,h1,w1]` into `[N,M]` tokens with position encoding.
    pub fn tokenize(&self, t: &mut Tape, set: &ParamSet, f1: Value) -> Value {
        let s = t.value(f1).shape().to_vec();
        assert_eq!(
            s[0], self.m,
            "1/8-scale width {} must equal the clustering latent dim {}",
            s[0], self.m
        );
        let (h1, w1) = (s[1], s[2]);
        let n = h1 * w1;
        let flat = t.reshape(f1, &[self.m, n]);
        let tokens = t.transpose2(flat);
        let proj = self.token_proj.forward(t, set, tokens);
        let pos = t.input(fourier_embedding(h1, w1, self.m));
        t.add(proj, pos)
    }

    /// Transformer layers over [centers ‖ tokens]; 0 layers is the
    /// identity. Returns (ĉ `[K,M]`, t̂ `[N,M]`).
    pub fn propagate(&self, t: &mut Tape, set: &ParamSet, tokens: Value) -> (Value, Value) {
        let n = t.value(tokens).shape()[0];
        let c = t.param(set, self.centers);
        let mut seq = t.concat(&[c, tokens], 0);
        for layer in &self.prop {
            seq = layer.forward(t, set, seq);
        }
        let chat = t.slice(seq, 0, 0, self.k);
        let that = t.slice(seq, 0, self.k, n);
        (chat, that)
    }

    /// Similarity matrix `[K,N]`: softmax over centers of projected
    /// dot products. Columns sum to 1.
    pub fn group(&self, t: &mut Tape, set: &ParamSet, chat: Value, that: Value) -> Value {
        let q = self.wq.forward(t, set, chat);
        let k = self.wk.forward(t, set, that);
        let kt = t.transpose2(k);
        let logits = t.matmul(q, kt);
        t.softmax(logits, 0)
    }

    /// Current centers `[K,M]`: c̃ᵢ = Σⱼ Aᵢⱼ · W_v t̂ⱼ.
    pub fn update_centers(&self, t: &mut Tape, set: &ParamSet, a: Value, that: Value) -> Value {
        let v = self.wv.forward(t, set, that);
        t.matmul(a, v)
    }

    /// Depth feature `[M,h1,w1]`: rⱼ = t̂ⱼ + MLP(Σᵢ Aᵢⱼ·c̃ᵢ), reshaped.
    pub fn reconstruct(
        &self,
        t: &mut Tape,
        set: &ParamSet,
        a: Value,
        ctilde: Value,
        that: Value,
        h1: usize,
        w1: usize,
    ) -> Value {
        let at = t.transpose2(a);
        let mix = t.matmul(at, ctilde);
        let delta = self.rec_mlp.forward(t, set, mix);
        let r = t.add(that, delta);
        let rt = t.transpose2(r);
        t.reshape(rt, &[self.m, h1, w1])
    }

    /// tokenize → propagate → group → update → reconstruct, returning
    /// (F̃₁, A) for downstream heads and diagnostics.
    pub fn forward(&self, t: &mut Tape, set: &ParamSet, f1: Value) -> (Value, Value) {
        let s = t.value(f1).shape().to_vec();
        let (h1, w1) = (s[1], s[2]);
        let tokens = self.tokenize(t, set, f1);
        let (chat, that) = self.propagate(t, set, tokens);
        let a = self.group(t, set, chat, that);
        let ctilde = self.update_centers(t, set, a, that);
        let f1t = self.reconstruct(t, set, a, ctilde, that, h1, w1);
        (f1t, a)
    }
}

/// Per-scale head: two 3×3 convolutions then channel softmax, mapping
/// a depth feature to a K-way logistic score volume.
pub struct DepthHead {
    c1: Conv2d,
    c2: Conv2d,
}

impl DepthHead {
    pub fn new(set: &mut ParamSet, rng: &mut impl Rng, name: &str, cin: usize, k: usize) -> Self {
        let mid = (cin / 2).max(k.min(cin));
        DepthHead {
            c1: Conv2d::new(set, rng, &format!("{name}.c1"), cin, mid, 3, 1, true),
            c2: Conv2d::new(set, rng, &format!("{name}.c2"), mid, k, 3, 1, true),
        }
    }

    pub fn forward(&self, t: &mut Tape, set: &ParamSet, f: Value) -> Value {
        let h = self.c1.forward(t, set, f);
        let h = t.silu(h);
        let logits = self.c2.forward(t, set, h);
        t.softmax(logits, 0)
    }
}

/// Sinusoidal features of the normalized (y, x) position, frequencies
/// doubling per band; distinct grid positions map to distinct rows.
fn fourier_embedding(h: usize, w: usize, m: usize) -> NdArray {
    let mut out = NdArray::zeros(&[h * w, m]);
    let bands = m / 4;
    for y in 0..h {
        let ny = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let nx = (x as f64 + 0.5) / w as f64;
            let row = y * w + x;
            for f in 0..bands {
                let omega = std::f64::consts::PI * (1 << f.min(30)) as f64;
                let base = row * m + 4 * f;
                out.data_mut()[base] = (omega * ny).sin();
                out.data_mut()[base + 1] = (omega * ny).cos();
                out.data_mut()[base + 2] = (omega * nx).sin();
                out.data_mut()[base + 3] = (omega * nx).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, DEFAULT_STEP};
    use crate::guidance::{expectation_decode, init_uniform_guidance, tile_guidance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], seed: u64) -> NdArray {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        NdArray::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn module(k: usize, m: usize, layers: usize) -> (ParamSet, ClusteringModule) {
        let cfg = ClusterConfig {
            k,
            m,
            layers,
            heads: 1,
        };
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let module = ClusteringModule::new(&mut set, &mut rng, "clu", &cfg);
        (set, module)
    }

    #[test]
    fn tokenize_count_and_position_distinctness() {
        let (mut set, clu) = module(4, 8, 0);
        // zero projection: tokens reduce to the position embedding
        for id in set.ids().collect::<Vec<_>>() {
            if set.get(id).name.starts_with("clu.tok") {
                set.get_mut(id).value.data_mut().fill(0.0);
            }
        }
        let mut t = Tape::new();
        let f1 = t.input(NdArray::full(&[8, 4, 4], 1.0)); // identical features everywhere
        let tokens = clu.tokenize(&mut t, &set, f1);
        let tv = t.value(tokens);
        assert_eq!(tv.shape(), &[16, 8]);
        for a in 0..16 {
            for b in a + 1..16 {
                let differ = (0..8).any(|c| (tv.at2(a, c) - tv.at2(b, c)).abs() > 1e-9);
                assert!(differ, "tokens {a} and {b} collide");
            }
        }
    }

    #[test]
    fn zero_layer_propagate_is_identity() {
        let (set, clu) = module(3, 8, 0);
        let mut t = Tape::new();
        let tokens = t.input(rand_array(&[5, 8], 1));
        let (chat, that) = clu.propagate(&mut t, &set, tokens);
        assert_eq!(t.value(chat).data(), set.get(clu.centers).value.data());
        assert_eq!(t.value(that).data(), t.value(tokens).data());
    }

    #[test]
    fn similarity_columns_sum_to_one() {
        let (set, clu) = module(4, 8, 1);
        let mut t = Tape::new();
        let f1 = t.input(rand_array(&[8, 2, 3], 2));
        let (_, a) = clu.forward(&mut t, &set, f1);
        let av = t.value(a);
        assert_eq!(av.shape(), &[4, 6]);
        for j in 0..6 {
            let s: f64 = (0..4).map(|i| av.at2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_centers_permutes_similarity_rows_only() {
        let (set, clu) = module(4, 8, 0);
        let f1 = rand_array(&[8, 2, 2], 3);
        let run = |set: &ParamSet| {
            let mut t = Tape::new();
            let f = t.input(f1.clone());
            let (f1t, a) = clu.forward(&mut t, set, f);
            (
                t.value(a).clone(),
                t.value(f1t).clone(),
            )
        };
        let (a0, rec0) = run(&set);
        // swap centers 0 and 2
        let mut permuted = set.clone();
        let c = permuted.get_mut(clu.centers);
        let m = 8;
        for col in 0..m {
            c.value.data_mut().swap(col, 2 * m + col);
        }
        let (a1, rec1) = run(&permuted);
        for j in 0..4 {
            assert!((a0.at2(0, j) - a1.at2(2, j)).abs() < 1e-12);
            assert!((a0.at2(2, j) - a1.at2(0, j)).abs() < 1e-12);
            assert!((a0.at2(1, j) - a1.at2(1, j)).abs() < 1e-12);
        }
        // reconstruction is permutation-invariant
        for (x, y) in rec0.data().iter().zip(rec1.data().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_assignment_averages_values() {
        let (set, clu) = module(4, 8, 0);
        let mut t = Tape::new();
        let that = t.input(rand_array(&[6, 8], 4));
        let a = t.input(NdArray::full(&[4, 6], 0.25));
        let ctilde = clu.update_centers(&mut t, &set, a, that);
        // c̃ᵢ = Σⱼ (1/K)·W_v t̂ⱼ, identical for every center
        let values = clu.wv.forward(&mut t, &set, that);
        let vv = t.value(values).clone();
        let cv = t.value(ctilde);
        for i in 0..4 {
            for c in 0..8 {
                let expect: f64 = (0..6).map(|j| 0.25 * vv.at2(j, c)).sum();
                assert!((cv.at2(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_mlp_reconstruction_is_reshaped_tokens() {
        let (mut set, clu) = module(3, 8, 0);
        for id in set.ids().collect::<Vec<_>>() {
            if set.get(id).name.starts_with("clu.rec.l2") {
                set.get_mut(id).value.data_mut().fill(0.0);
            }
        }
        let mut t = Tape::new();
        let that = t.input(rand_array(&[4, 8], 5));
        let a = t.input(NdArray::full(&[3, 4], 1.0 / 3.0));
        let ctilde = t.input(rand_array(&[3, 8], 6));
        let rec = clu.reconstruct(&mut t, &set, a, ctilde, that, 2, 2);
        let rv = t.value(rec);
        assert_eq!(rv.shape(), &[8, 2, 2]);
        let tv = t.value(that);
        for tok in 0..4 {
            for c in 0..8 {
                assert_eq!(rv.at3(c, tok / 2, tok % 2), tv.at2(tok, c));
            }
        }
    }

    #[test]
    fn head_of_zero_weights_is_uniform_and_decodes_midrange() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = DepthHead::new(&mut set, &mut rng, "h", 8, 4);
        for id in set.ids().collect::<Vec<_>>() {
            if set.get(id).name.starts_with("h.c2") {
                set.get_mut(id).value.data_mut().fill(0.0);
            }
        }
        let mut t = Tape::new();
        let f = t.input(rand_array(&[8, 2, 2], 7));
        let scores = head.forward(&mut t, &set, f);
        let sv = t.value(scores);
        assert!(sv.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let g = tile_guidance(&init_uniform_guidance(0.0, 4.0, 4), 2, 2);
        let d = expectation_decode(sv, &g);
        assert!(d.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn saturated_margin_gives_one_hot_column() {
        // logits with a 50 margin: softmax error < 1e-20
        let mut t = Tape::new();
        let logits = t.input(NdArray::from_vec(&[2, 1], vec![50.0, 0.0]));
        let a = t.softmax(logits, 0);
        assert!((t.value(a).at2(0, 0) - 1.0).abs() < 1e-20);
        assert!(t.value(a).at2(1, 0) < 1e-20);
    }

    #[test]
    fn center_gradients_flow_through_full_chain() {
        let (set, clu) = module(3, 8, 1);
        let f1 = rand_array(&[8, 2, 2], 8);
        let mut fwd = |t: &mut Tape, s: &ParamSet| {
            let f = t.input(f1.clone());
            let (f1t, _) = clu.forward(t, s, f);
            let sq = t.sqr(f1t);
            t.sum_all(sq)
        };
        let err = check_param_grads(&set, &mut fwd, DEFAULT_STEP, 4);
        assert!(err <= 1e-6, "worst relative error {err}");
    }
}
