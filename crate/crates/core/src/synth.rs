//! Synthetic piecewise-constant scene generator.
//!
//! Scenes are a constant-depth background with a handful of
//! constant-depth objects (rectangles and discs) painted over it, so
//! every depth discontinuity coincides exactly with a label boundary —
//! which gives boundary metrics and the prune filter unambiguous
//! oracles. Depth levels are quantized to the PNG step (1/256 m) so
//! files round-trip losslessly.

use crate::depth::{sample_sparse, DepthMap, LabelMap, SceneSample};
use crate::error::{Error, Result};
use crate::tensor::NdArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Geometry and sampling parameters for one synthetic scene.
#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Foreground objects painted over the background plane.
    pub objects: usize,
    /// Fraction of pixels kept in the sparse input.
    pub density: f64,
    /// Amplitude of the uniform RGB noise.
    pub rgb_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            d_min: 0.0,
            d_max: 10.0,
            objects: 4,
            density: 0.05,
            rgb_noise: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::config(format!(
                "scene dims must be divisible by 8, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.d_max > self.d_min && self.d_min >= 0.0) {
            return Err(Error::config(format!(
                "invalid depth range [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        let slot = usable_span(self) / (self.objects + 1) as f64;
        if slot < 0.05 {
            return Err(Error::config(format!(
                "depth range too narrow for {} objects (level slot {slot:.4} m)",
                self.objects
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::config(format!(
                "density must be in (0, 1], got {}",
                self.density
            )));
        }
        Ok(())
    }
}

fn usable_span(cfg: &SceneConfig) -> f64 {
    // keep levels away from 0 (validity) and from d_max (offset headroom)
    let span = cfg.d_max - cfg.d_min;
    span * (0.92 - 0.08)
}

/// Snaps a depth to the 16-bit PNG grid.
fn quantize(d: f64) -> f64 {
    (d * 256.0).round() / 256.0
}

/// Deterministically renders one scene from the seed.
pub fn synth_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let span = cfg.d_max - cfg.d_min;
    let lo = cfg.d_min + 0.08 * span;

    // Distinct depth levels: one slot per object plus the background,
    // jittered within the slot so separation stays ≥ 0.4 slot widths.
    let n_levels = cfg.objects + 1;
    let slot = usable_span(cfg) / n_levels as f64;
    let mut levels: Vec<f64> = (0..n_levels)
        .map(|i| {
            let jitter: f64 = rng.random_range(-0.3..0.3);
            quantize(lo + (i as f64 + 0.5 + jitter) * slot)
        })
        .collect();
    // deepest level is the background; the rest go to objects in
    // seeded random order
    let background = levels.pop().expect("n_levels >= 1");
    for i in (1..levels.len()).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }

    let mut ids = vec![0u16; h * w];
    for (obj, _) in levels.iter().enumerate() {
        let label = (obj + 1) as u16;
        let cy = rng.random_range(0..h) as i64;
        let cx = rng.random_range(0..w) as i64;
        let half = rng.random_range((h.min(w) / 10).max(2)..=(h.min(w) * 3 / 10).max(3)) as i64;
        let round = rng.random_range(0..2u8) == 1;
        for y in (cy - half).max(0)..(cy + half + 1).min(h as i64) {
            for x in (cx - half).max(0)..(cx + half + 1).min(w as i64) {
                let inside = if round {
                    let (dy, dx) = (y - cy, x - cx);
                    dy * dy + dx * dx <= half * half
                } else {
                    true
                };
                if inside {
                    ids[y as usize * w + x as usize] = label;
                }
            }
        }
    }

    let depth: Vec<f64> = ids
        .iter()
        .map(|&id| {
            if id == 0 {
                background
            } else {
                levels[id as usize - 1]
            }
        })
        .collect();
    let gt = DepthMap::new(NdArray::from_vec(&[h, w], depth));
    let labels = LabelMap::new(h, w, ids);

    // Shaded label colors plus seeded noise.
    let mut palette = vec![[0.0f64; 3]; n_levels];
    for color in palette.iter_mut() {
        for c in color.iter_mut() {
            *c = rng.random_range(0.15..0.85);
        }
    }
    let mut rgb = NdArray::zeros(&[3, h, w]);
    for y in 0..h {
        let shade = 0.8 + 0.2 * (y as f64 / h.max(1) as f64);
        for x in 0..w {
            let base = palette[labels.at(y, x) as usize];
            for c in 0..3 {
                let noise = if cfg.rgb_noise > 0.0 {
                    rng.random_range(-cfg.rgb_noise..cfg.rgb_noise)
                } else {
                    0.0
                };
                rgb.set3(c, y, x, (base[c] * shade + noise).clamp(0.0, 1.0));
            }
        }
    }

    let sparse_seed = rng.random::<u64>();
    let sparse = sample_sparse(&gt, cfg.density, sparse_seed)?;
    Ok(SceneSample {
        rgb,
        sparse,
        gt,
        labels,
    })
}
