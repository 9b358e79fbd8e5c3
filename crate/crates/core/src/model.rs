//! Full pipeline assembly: encoder → clustering → hierarchical
//! refinement → prune translation, plus checkpoint save/load.
//!
//! One forward pass produces logistic scores L₁…L₄, decoded depths
//! D₁…D₅, and per-pixel guidance g₁…g₅ across scales 1/8 → 1. The
//! coarse prediction comes from clustering alone; each refinement
//! doubles resolution and shifts the guidance by offsets estimated
//! from sparse-depth cues; the final step prunes implausible sparse
//! points and adjusts the guidance once more while reusing the
//! original-scale scores.

use crate::cluster::{ClusterConfig, ClusteringModule, DepthHead};
use crate::ckpt;
use crate::depth::{pool_pyramid, DepthMap, SparseDepthMap};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::guidance::{encode_laplace, guidance_spacing, init_uniform_guidance, tile_guidance};
use crate::params::ParamSet;
use crate::tape::{Tape, Value};
use crate::tensor::NdArray;
use crate::translate::{
    decode_depth, prune_filter, prune_refine, refine_scale, OffsetEstimator, RefineStage, Refined,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Working depth range in meters.
    pub d_min: f64,
    pub d_max: f64,
    /// Number of depth centers / guidance values.
    pub k: usize,
    /// Encoder base width; the clustering latent dim is 4·width.
    pub width: usize,
    /// Residual blocks per encoder stage.
    pub blocks: usize,
    /// Clustering propagate layers.
    pub layers: usize,
    /// Attention heads in propagate layers.
    pub heads: usize,
    /// Prune threshold τ in meters.
    pub tau: f64,
    /// Fraction of the safe half-gap available to local offsets.
    pub band_scale: f64,
    /// Input-encoding temperature as a multiple of the bin width Δ.
    pub temp_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_min: 0.0,
            d_max: 10.0,
            k: 16,
            width: 16,
            blocks: 2,
            layers: 2,
            heads: 1,
            tau: 0.25,
            band_scale: 1.0,
            temp_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// Clustering latent dimension.
    pub fn m(&self) -> usize {
        4 * self.width
    }

    /// Guidance bin width Δ.
    pub fn delta(&self) -> f64 {
        guidance_spacing(self.d_min, self.d_max, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!(
                "at least 2 depth centers required, got k={}",
                self.k
            )));
        }
        if !(self.d_max > self.d_min) || !self.d_min.is_finite() || !self.d_max.is_finite() {
            return Err(Error::config(format!(
                "depth range [{}, {}] is not a valid interval",
                self.d_min, self.d_max
            )));
        }
        if self.d_min < 0.0 {
            return Err(Error::config("d_min must be nonnegative".to_string()));
        }
        if self.tau <= 0.0 {
            return Err(Error::config(format!(
                "prune threshold must be positive, got {}",
                self.tau
            )));
        }
        if self.width == 0 || self.blocks == 0 {
            return Err(Error::config(
                "encoder width and blocks must be positive".to_string(),
            ));
        }
        if self.heads == 0 || self.m() % self.heads != 0 {
            return Err(Error::config(format!(
                "heads={} must divide the latent dim {}",
                self.heads,
                self.m()
            )));
        }
        if !(self.band_scale > 0.0 && self.band_scale <= 1.0) {
            return Err(Error::config(format!(
                "band_scale must lie in (0, 1], got {}",
                self.band_scale
            )));
        }
        if self.temp_scale <= 0.0 {
            return Err(Error::config(format!(
                "temp_scale must be positive, got {}",
                self.temp_scale
            )));
        }
        Ok(())
    }

    /// key=value snapshot (one per line, sorted keys).
    pub fn to_kv(&self) -> String {
        format!(
            "band_scale={}\nblocks={}\nd_max={}\nd_min={}\nheads={}\nk={}\nlayers={}\ntau={}\ntemp_scale={}\nwidth={}\n",
            self.band_scale,
            self.blocks,
            self.d_max,
            self.d_min,
            self.heads,
            self.k,
            self.layers,
            self.tau,
            self.temp_scale,
            self.width
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let bad = |k: &str| Error::config(format!("invalid value for {k}: `{val}`"));
            match key.trim() {
                "d_min" => cfg.d_min = val.parse().map_err(|_| bad("d_min"))?,
                "d_max" => cfg.d_max = val.parse().map_err(|_| bad("d_max"))?,
                "k" => cfg.k = val.parse().map_err(|_| bad("k"))?,
                "width" => cfg.width = val.parse().map_err(|_| bad("width"))?,
                "blocks" => cfg.blocks = val.parse().map_err(|_| bad("blocks"))?,
                "layers" => cfg.layers = val.parse().map_err(|_| bad("layers"))?,
                "heads" => cfg.heads = val.parse().map_err(|_| bad("heads"))?,
                "tau" => cfg.tau = val.parse().map_err(|_| bad("tau"))?,
                "band_scale" => cfg.band_scale = val.parse().map_err(|_| bad("band_scale"))?,
                "temp_scale" => cfg.temp_scale = val.parse().map_err(|_| bad("temp_scale"))?,
                other => {
                    return Err(Error::config(format!("unknown model config key `{other}`")))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Switches for ablation and staging; the default runs everything.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// When false, guidance is never adjusted (no offset estimation,
    /// no prune refinement): the pure clustering decode at each scale.
    pub offsets: bool,
    /// Feed the offset estimators an all-zero cue (sparse signal
    /// ablation); the head path is unchanged.
    pub zero_cue: bool,
    /// Run the prune step and the final refinement D₅.
    pub prune: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            offsets: true,
            zero_cue: false,
            prune: true,
        }
    }
}

/// Tape handles for everything downstream consumers need.
pub struct ForwardOutputs {
    /// L₁…L₄, `[K,h,w]` per scale 1/8 → 1.
    pub scores: Vec<Value>,
    /// D₁…D₄ and, when pruning ran, D₅ (original scale).
    pub depths: Vec<Value>,
    /// g₁…g₄ (+g₅), `[K,h,w]`.
    pub guidance: Vec<Value>,
    /// Corrected sparse map when pruning ran.
    pub s5: Option<SparseDepthMap>,
}

impl ForwardOutputs {
    /// Final prediction (D₅ if present, else D₄).
    pub fn final_depth(&self) -> Value {
        *self.depths.last().expect("forward produced no depths")
    }
}

pub struct CompletionModel {
    pub cfg: ModelConfig,
    encoder: Encoder,
    cluster: ClusteringModule,
    head1: DepthHead,
    stages: Vec<RefineStage>,
    ptb: OffsetEstimator,
}

impl CompletionModel {
    /// Validates the config and builds the parameter set with
    /// seed-deterministic initialization.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_cfg = EncoderConfig {
            width: cfg.width,
            blocks: cfg.blocks,
            score_channels: cfg.k,
            ..EncoderConfig::default()
        };
        let widths = enc_cfg.widths();
        let m = cfg.m();
        let encoder = Encoder::new(&mut set, &mut rng, "enc", &enc_cfg);
        let clu_cfg = ClusterConfig {
            k: cfg.k,
            m,
            layers: cfg.layers,
            heads: cfg.heads,
        };
        let cluster = ClusteringModule::new(&mut set, &mut rng, "clu", &clu_cfg);
        let head1 = DepthHead::new(&mut set, &mut rng, "h1", m, cfg.k);
        // refinements consume the encoder features at 1/4, 1/2, 1;
        // pooled sparse grids carry (max,min) channels except at full
        // resolution where the raw single-channel map is used
        let stages = vec![
            RefineStage::new(&mut set, &mut rng, "s2", m, widths[2], 2, cfg.k),
            RefineStage::new(&mut set, &mut rng, "s3", m, widths[1], 2, cfg.k),
            RefineStage::new(&mut set, &mut rng, "s4", m, widths[0], 1, cfg.k),
        ];
        let ptb = OffsetEstimator::new(&mut set, &mut rng, "ptb", widths[0], 1, cfg.k);
        Ok((
            CompletionModel {
                cfg,
                encoder,
                cluster,
                head1,
                stages,
                ptb,
            },
            set,
        ))
    }

    /// Parameter names belonging to the prune translation block; the
    /// second training stage updates exactly these.
    pub fn is_ptb_param(name: &str) -> bool {
        name.starts_with("ptb.")
    }

    /// Runs the pipeline on one scene. `rgb` is `[3,H,W]` in [0,1],
    /// H and W divisible by 8.
    pub fn forward(
        &self,
        t: &mut Tape,
        set: &ParamSet,
        rgb: &NdArray,
        sparse: &SparseDepthMap,
        opts: ForwardOptions,
    ) -> Result<ForwardOutputs> {
        let (h, w) = (sparse.height(), sparse.width());
        if rgb.rank() != 3 || rgb.shape()[0] != 3 || rgb.shape()[1] != h || rgb.shape()[2] != w {
            return Err(Error::data(format!(
                "rgb shape {:?} does not match sparse {}×{}",
                rgb.shape(),
                h,
                w
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::data(format!(
                "input {h}×{w} must be divisible by 8"
            )));
        }
        let cfg = &self.cfg;
        let delta = cfg.delta();
        let g_shared = init_uniform_guidance(cfg.d_min, cfg.d_max, cfg.k);

        // input score volume: Laplace encoding of the sparse map
        let g_full = tile_guidance(&g_shared, h, w);
        let scores0 = encode_laplace(sparse.array(), &g_full, cfg.temp_scale * delta);
        let pyramid = pool_pyramid(sparse);

        let rgb_v = t.input(rgb.clone());
        let sparse_v = t.input(sparse.array().reshaped(&[1, h, w]));
        let scores0_v = t.input(scores0);
        let enc = self.encoder.forward(t, set, rgb_v, sparse_v, scores0_v);

        // coarse prediction from clustering
        let (f1t, _assign) = self.cluster.forward(t, set, enc.f1);
        let l1 = self.head1.forward(t, set, f1t);
        let g1 = t.input(tile_guidance(&g_shared, h / 8, w / 8));
        let d1 = decode_depth(t, l1, g1);

        let mut scores = vec![l1];
        let mut depths = vec![d1];
        let mut guidance = vec![g1];
        let full_grid = sparse.array().reshaped(&[1, h, w]);
        let grids = [&pyramid.quarter, &pyramid.half, &full_grid];
        let feats = [enc.f2, enc.f3, enc.f4];

        let mut f_tilde = f1t;
        for (i, stage) in self.stages.iter().enumerate() {
            let out = if opts.offsets {
                refine_scale(
                    t,
                    set,
                    stage,
                    f_tilde,
                    feats[i],
                    grids[i],
                    depths[i],
                    guidance[i],
                    delta,
                    cfg.band_scale,
                    opts.zero_cue,
                )
            } else {
                plain_refine(t, set, stage, f_tilde, grids[i], depths[i], guidance[i])
            };
            scores.push(out.l);
            depths.push(out.d);
            guidance.push(out.g);
            f_tilde = out.f_tilde;
        }

        let mut s5 = None;
        if opts.prune {
            let d4_map = DepthMap::new(t.value(depths[3]).reshaped(&[h, w]).map(|v| v.max(0.0)));
            let pruned = prune_filter(sparse, &d4_map, cfg.tau)?;
            if opts.offsets {
                let (d5, g5) = prune_refine(
                    t,
                    set,
                    &self.ptb,
                    scores[3],
                    guidance[3],
                    &pruned,
                    enc.f4,
                    depths[3],
                    delta,
                    cfg.band_scale,
                );
                depths.push(d5);
                guidance.push(g5);
            } else {
                // without offsets the final refinement cannot move
                // anything: D₅ = D₄ by construction
                depths.push(depths[3]);
                guidance.push(guidance[3]);
            }
            s5 = Some(pruned);
        }

        Ok(ForwardOutputs {
            scores,
            depths,
            guidance,
            s5,
        })
    }
}

/// Refinement with the translation disabled: upsample the depth
/// feature, re-score, and decode against the unadjusted guidance.
fn plain_refine(
    t: &mut Tape,
    set: &ParamSet,
    stage: &RefineStage,
    f_tilde_prev: Value,
    grid: &NdArray,
    d_prev: Value,
    g_prev: Value,
) -> Refined {
    let (h, w) = (grid.shape()[1], grid.shape()[2]);
    let _ = d_prev;
    let f_tilde = t.bilinear(f_tilde_prev, h, w);
    let l = stage.head.forward(t, set, f_tilde);
    let g = t.bilinear(g_prev, h, w);
    let d = decode_depth(t, l, g);
    Refined { d, l, g, f_tilde }
}

/// Writes config + parameters (+ any extra named tensors, e.g.
/// optimizer state) to one file.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    set: &ParamSet,
    extra: &[(String, NdArray)],
) -> Result<()> {
    let mut blobs: Vec<(String, NdArray)> = set
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    blobs.extend(extra.iter().cloned());
    ckpt::save(path, &cfg.to_kv(), &blobs)
}

/// Rebuilds the model from a checkpoint; parameter values are restored
/// bit-exactly. Returns any extra tensors (optimizer state) untouched.
pub fn load_checkpoint(path: &Path) -> Result<(CompletionModel, ParamSet, Vec<(String, NdArray)>)> {
    let (cfg_text, blobs) = ckpt::load(path)?;
    let cfg = ModelConfig::from_kv(&cfg_text)?;
    let (model, mut set) = CompletionModel::init(cfg, 0)?;
    let mut extra = Vec::new();
    let mut restored = 0usize;
    for (name, arr) in blobs {
        match set.find(&name) {
            Some(id) => {
                let param = set.get_mut(id);
                if param.value.shape() != arr.shape() {
                    return Err(Error::format(
                        path,
                        format!(
                            "parameter {name}: checkpoint shape {:?} vs model {:?}",
                            arr.shape(),
                            param.value.shape()
                        ),
                    ));
                }
                param.value = arr;
                restored += 1;
            }
            None => extra.push((name, arr)),
        }
    }
    if restored != set.len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint restored {restored} of {} model parameters",
                set.len()
            ),
        ));
    }
    Ok((model, set, extra))
}
