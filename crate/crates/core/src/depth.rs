//! Depth grids, sparse sampling, outlier injection, and the min/max
//! pooling pyramid.
//!
//! Depth is meters per pixel with zero meaning "no measurement"
//! (matching the usual 16-bit depth-completion file convention).
//! Pooling ignores invalid entries — a literal min over a sparse window
//! would always return zero.

use crate::error::{Error, Result};
use crate::tensor::NdArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dense depth grid; `[H,W]`, meters, 0 = invalid.
#[derive(Clone, Debug)]
pub struct DepthMap {
    depth: NdArray,
}

impl DepthMap {
    pub fn new(depth: NdArray) -> Self {
        assert_eq!(depth.rank(), 2, "depth map must be [H,W], got {:?}", depth.shape());
        assert!(depth.all_finite(), "depth map contains non-finite values");
        assert!(
            depth.data().iter().all(|&d| d >= 0.0),
            "negative depth encountered"
        );
        DepthMap { depth }
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.depth.at2(y, x)
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.at(y, x) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.data().iter().filter(|&&d| d > 0.0).count()
    }

    pub fn array(&self) -> &NdArray {
        &self.depth
    }

    pub fn into_array(self) -> NdArray {
        self.depth
    }
}

/// Depth grid with mostly-invalid pixels; tracks its fill fraction.
#[derive(Clone, Debug)]
pub struct SparseDepthMap {
    map: DepthMap,
    density: f64,
}

impl SparseDepthMap {
    /// Wraps a depth grid, computing density = valid/(H·W).
    pub fn new(depth: NdArray) -> Self {
        let map = DepthMap::new(depth);
        let density = map.valid_count() as f64 / (map.height() * map.width()) as f64;
        SparseDepthMap { map, density }
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn map(&self) -> &DepthMap {
        &self.map
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.map.at(y, x)
    }

    pub fn array(&self) -> &NdArray {
        self.map.array()
    }
}

/// Integer object-id map aligned with the depth grids.
#[derive(Clone, Debug)]
pub struct LabelMap {
    h: usize,
    w: usize,
    ids: Vec<u16>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, ids: Vec<u16>) -> Self {
        assert_eq!(ids.len(), h * w, "label buffer does not match {h}x{w}");
        LabelMap { h, w, ids }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.ids[y * self.w + x]
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }
}

/// One synthetic training/eval sample: aligned RGB, sparse input,
/// dense ground truth, and object ids.
#[derive(Clone, Debug)]
pub struct SceneSample {
    /// `[3,H,W]`, values in [0,1].
    pub rgb: NdArray,
    pub sparse: SparseDepthMap,
    pub gt: DepthMap,
    pub labels: LabelMap,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }
}

/// Sparse map pooled to 1/2 and 1/4 scale; channel 0 is max, channel 1
/// is min, zero where the window held no valid entry.
#[derive(Clone, Debug)]
pub struct SparsePyramid {
    pub full: SparseDepthMap,
    /// `[2, H/2, W/2]`
    pub half: NdArray,
    /// `[2, H/4, W/4]`
    pub quarter: NdArray,
}

/// Copies exactly ⌊density·H·W⌋ ground-truth pixels, chosen uniformly
/// without replacement among valid ones; everything else is zero.
pub fn sample_sparse(gt: &DepthMap, density: f64, seed: u64) -> Result<SparseDepthMap> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::config(format!(
            "sparse density must be in (0, 1], got {density}"
        )));
    }
    let (h, w) = (gt.height(), gt.width());
    let want = (density * (h * w) as f64).floor() as usize;
    let valid: Vec<usize> = (0..h * w)
        .filter(|&p| gt.array().data()[p] > 0.0)
        .collect();
    if valid.len() < want {
        return Err(Error::data(format!(
            "cannot draw {want} sparse points from {} valid pixels",
            valid.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, valid.len(), want);
    let mut data = vec![0.0; h * w];
    for i in picks.iter() {
        let p = valid[i];
        data[p] = gt.array().data()[p];
    }
    Ok(SparseDepthMap::new(NdArray::from_vec(&[h, w], data)))
}

/// Replaces a fraction of boundary-adjacent sparse points with the
/// depth of the neighboring object, imitating occlusion-style noise.
///
/// A point qualifies if some pixel within Chebyshev distance 2 carries
/// a different label; the replacement value is the ground truth of the
/// nearest such pixel. Returns the corrupted map and the injected
/// positions for oracle tests.
pub fn inject_outliers(
    sparse: &SparseDepthMap,
    labels: &LabelMap,
    gt: &DepthMap,
    rate: f64,
    seed: u64,
) -> (SparseDepthMap, Vec<(usize, usize)>) {
    assert_eq!(
        (sparse.height(), sparse.width()),
        (labels.height(), labels.width()),
        "labels not aligned with sparse map"
    );
    let (h, w) = (sparse.height(), sparse.width());
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if sparse.at(y, x) > 0.0 && neighbor_with_other_label(labels, y, x).is_some() {
                candidates.push((y, x));
            }
        }
    }
    let n = (rate * candidates.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, candidates.len(), n.min(candidates.len()));
    let mut data = sparse.array().data().to_vec();
    let mut injected = Vec::with_capacity(n);
    for i in picks.iter() {
        let (y, x) = candidates[i];
        let (ny, nx) = neighbor_with_other_label(labels, y, x).unwrap();
        data[y * w + x] = gt.at(ny, nx);
        injected.push((y, x));
    }
    injected.sort_unstable();
    (
        SparseDepthMap::new(NdArray::from_vec(&[h, w], data)),
        injected,
    )
}

/// Nearest pixel within Chebyshev distance 2 whose label differs;
/// scans ring 1 before ring 2, row-major inside a ring, so ties are
/// deterministic.
fn neighbor_with_other_label(labels: &LabelMap, y: usize, x: usize) -> Option<(usize, usize)> {
    let me = labels.at(y, x);
    let (h, w) = (labels.height(), labels.width());
    for ring in 1..=2i64 {
        for dy in -ring..=ring {
            for dx in -ring..=ring {
                if dy.abs().max(dx.abs()) != ring {
                    continue;
                }
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if labels.at(ny, nx) != me {
                    return Some((ny, nx));
                }
            }
        }
    }
    None
}

/// Min/max pooling of the sparse map over 2×2 (half scale) and 4×4
/// (quarter scale) windows, both taken from the original grid.
pub fn pool_pyramid(sparse: &SparseDepthMap) -> SparsePyramid {
    let (h, w) = (sparse.height(), sparse.width());
    assert!(
        h % 4 == 0 && w % 4 == 0,
        "pooling needs dims divisible by 4, got {h}x{w}"
    );
    SparsePyramid {
        full: sparse.clone(),
        half: pool_minmax(sparse.array(), 2),
        quarter: pool_minmax(sparse.array(), 4),
    }
}

/// `[2, H/win, W/win]` of (max, min) over valid entries per window;
/// both channels zero when the window has none.
fn pool_minmax(depth: &NdArray, win: usize) -> NdArray {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let (oh, ow) = (h / win, w / win);
    let mut out = NdArray::zeros(&[2, oh, ow]);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            let mut any = false;
            for dy in 0..win {
                for dx in 0..win {
                    let d = depth.at2(oy * win + dy, ox * win + dx);
                    if d > 0.0 {
                        any = true;
                        hi = hi.max(d);
                        lo = lo.min(d);
                    }
                }
            }
            if any {
                out.set3(0, oy, ox, hi);
                out.set3(1, oy, ox, lo);
            }
        }
    }
    out
}
