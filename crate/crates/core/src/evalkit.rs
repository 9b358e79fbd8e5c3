//! Evaluation: MAE/RMSE in millimeters, iMAE/iRMSE in 1/km,
//! boundary vs non-boundary splits from label maps, per-interval MAE
//! tables, density-robustness sweeps, and a nearest-valid-pixel fill
//! baseline for calibrating learned results.

use crate::depth::{DepthMap, LabelMap, SceneSample, SparseDepthMap};
use crate::error::{Error, Result};
use crate::pngio;
use crate::tensor::NdArray;
use std::fmt::Write as _;
use std::path::Path;

/// Smallest depth a prediction is allowed to claim, in meters.
///
/// Decoded depth can drift marginally below the range floor once
/// guidance has been adjusted at several scales, and inverse metrics
/// are undefined at zero. Benchmark practice is to clamp predictions
/// to a small positive floor (1 mm here) before scoring; the
/// accumulator itself still rejects nonpositive predictions so the
/// clamp has to be an explicit, visible step.
pub const PRED_FLOOR: f64 = 1e-3;

/// Aggregated error report; depth errors in mm, inverse-depth errors
/// in 1/km.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub imae: f64,
    pub irmse: f64,
    pub count: usize,
}

/// Running sums that many scenes can contribute to before one report
/// is drawn; keeps multi-scene aggregation pixel-weighted.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    iabs: f64,
    isq: f64,
    count: usize,
}

impl MetricAccumulator {
    /// Adds every pixel of Ω = valid gt ∩ mask. `mask` is row-major
    /// H·W when present.
    pub fn add(
        &mut self,
        pred: &DepthMap,
        gt: &DepthMap,
        mask: Option<&[bool]>,
    ) -> Result<()> {
        let (h, w) = (gt.height(), gt.width());
        if (pred.height(), pred.width()) != (h, w) {
            return Err(Error::data(format!(
                "prediction {}×{} does not match ground truth {h}×{w}",
                pred.height(),
                pred.width()
            )));
        }
        if let Some(m) = mask {
            if m.len() != h * w {
                return Err(Error::data(format!(
                    "mask length {} does not match {h}×{w}",
                    m.len()
                )));
            }
        }
        for y in 0..h {
            for x in 0..w {
                if !gt.is_valid(y, x) {
                    continue;
                }
                if let Some(m) = mask {
                    if !m[y * w + x] {
                        continue;
                    }
                }
                let p = pred.at(y, x);
                if p <= 0.0 {
                    return Err(Error::data(format!(
                        "nonpositive prediction {p} at pixel ({y},{x}) — inverse metrics undefined"
                    )));
                }
                let g = gt.at(y, x);
                let e = p - g;
                self.abs += e.abs();
                self.sq += e * e;
                let ie = 1.0 / p - 1.0 / g;
                self.iabs += ie.abs();
                self.isq += ie * ie;
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::data(
                "no valid pixels to evaluate (empty Ω)".to_string(),
            ));
        }
        let n = self.count as f64;
        // meters → mm; 1/m → 1/km
        let report = MetricReport {
            mae: self.abs / n * 1000.0,
            rmse: (self.sq / n).sqrt() * 1000.0,
            imae: self.iabs / n * 1000.0,
            irmse: (self.isq / n).sqrt() * 1000.0,
            count: self.count,
        };
        // power-mean inequality; violation means a bug, not bad data
        assert!(report.rmse >= report.mae - 1e-9);
        assert!(report.irmse >= report.imae - 1e-9);
        Ok(report)
    }
}

/// Metrics over Ω = valid gt ∩ mask.
pub fn compute_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: Option<&[bool]>,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.report()
}

/// Label-discontinuity region: seeds are pixels with a 4-neighbor of
/// a different label; the mask is their 5×5 dilation.
pub struct BoundaryMask {
    mask: Vec<bool>,
    h: usize,
    w: usize,
}

impl BoundaryMask {
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn complement(&self) -> Vec<bool> {
        self.mask.iter().map(|&b| !b).collect()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

pub fn boundary_mask(labels: &LabelMap) -> BoundaryMask {
    let (h, w) = (labels.height(), labels.width());
    let mut seeds = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = labels.at(y, x);
            let differs = (y > 0 && labels.at(y - 1, x) != c)
                || (y + 1 < h && labels.at(y + 1, x) != c)
                || (x > 0 && labels.at(y, x - 1) != c)
                || (x + 1 < w && labels.at(y, x + 1) != c);
            seeds[y * w + x] = differs;
        }
    }
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !seeds[y * w + x] {
                continue;
            }
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                        mask[ny as usize * w + nx as usize] = true;
                    }
                }
            }
        }
    }
    BoundaryMask { mask, h, w }
}

/// Metrics at label boundaries and away from them; a region with no
/// valid pixels is reported as absent.
pub fn split_eval(
    pred: &DepthMap,
    gt: &DepthMap,
    labels: &LabelMap,
) -> Result<(Option<MetricReport>, Option<MetricReport>)> {
    let bm = boundary_mask(labels);
    let on = region_report(pred, gt, bm.mask())?;
    let off = region_report(pred, gt, &bm.complement())?;
    Ok((on, off))
}

fn region_report(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<Option<MetricReport>> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, Some(mask))?;
    if acc.is_empty() {
        Ok(None)
    } else {
        acc.report().map(Some)
    }
}

/// One row of the interval table: bucket (lo, hi], its MAE in mm when
/// populated, and the pixel count.
#[derive(Clone, Copy, Debug)]
pub struct IntervalRow {
    pub lo: f64,
    pub hi: f64,
    pub mae: Option<f64>,
    pub count: usize,
}

/// MAE bucketed by ground-truth depth into left-open right-closed
/// intervals between consecutive edges.
pub fn interval_mae(pred: &DepthMap, gt: &DepthMap, edges: &[f64]) -> Result<Vec<IntervalRow>> {
    if edges.len() < 2 {
        return Err(Error::config("interval edges need at least two entries".to_string()));
    }
    if edges.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::config(format!(
            "interval edges must be strictly increasing, got {edges:?}"
        )));
    }
    let nb = edges.len() - 1;
    let mut abs = vec![0.0f64; nb];
    let mut count = vec![0usize; nb];
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if !gt.is_valid(y, x) {
                continue;
            }
            let g = gt.at(y, x);
            // (edges[b], edges[b+1]]
            let Some(b) = (0..nb).find(|&b| g > edges[b] && g <= edges[b + 1]) else {
                continue;
            };
            abs[b] += (pred.at(y, x) - g).abs();
            count[b] += 1;
        }
    }
    Ok((0..nb)
        .map(|b| IntervalRow {
            lo: edges[b],
            hi: edges[b + 1],
            mae: (count[b] > 0).then(|| abs[b] / count[b] as f64 * 1000.0),
            count: count[b],
        })
        .collect())
}

/// Evaluates a predictor at several sparsity levels: the ground truth
/// is re-sparsified at each density with a deterministic per-scene
/// seed and all scenes pool into one report per density.
pub fn density_sweep(
    scenes: &[SceneSample],
    densities: &[f64],
    seed: u64,
    predict: &mut dyn FnMut(&SceneSample, &SparseDepthMap) -> Result<DepthMap>,
) -> Result<Vec<(f64, MetricReport)>> {
    if densities.is_empty() {
        return Err(Error::config("density sweep needs at least one density".to_string()));
    }
    if densities.iter().any(|&d| !(0.0..=1.0).contains(&d) || d <= 0.0) {
        return Err(Error::config(format!(
            "densities must lie in (0, 1], got {densities:?}"
        )));
    }
    if densities.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::config(
            "densities must be sorted strictly descending".to_string(),
        ));
    }
    let mut out = Vec::with_capacity(densities.len());
    for (di, &d) in densities.iter().enumerate() {
        let mut acc = MetricAccumulator::default();
        for (si, scene) in scenes.iter().enumerate() {
            let s_seed = seed ^ ((di as u64) << 32) ^ si as u64;
            let sparse = crate::depth::sample_sparse(&scene.gt, d, s_seed)?;
            let pred = predict(scene, &sparse)?;
            acc.add(&pred, &scene.gt, None)?;
        }
        out.push((d, acc.report()?));
    }
    Ok(out)
}

/// Fills every pixel with the value of the nearest valid sparse
/// point (squared Euclidean distance; ties break toward smaller y,
/// then smaller x). A cheap, fully deterministic reference predictor.
pub fn nearest_fill(sparse: &SparseDepthMap) -> Result<DepthMap> {
    let (h, w) = (sparse.height(), sparse.width());
    let valid: Vec<(usize, usize, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| sparse.at(y, x) > 0.0)
        .map(|(y, x)| (y, x, sparse.at(y, x)))
        .collect();
    if valid.is_empty() {
        return Err(Error::data(
            "nearest-fill baseline needs at least one valid sparse pixel".to_string(),
        ));
    }
    let mut out = NdArray::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut best = (usize::MAX, 0.0f64);
            for &(vy, vx, d) in &valid {
                let dy = y as i64 - vy as i64;
                let dx = x as i64 - vx as i64;
                let dist = (dy * dy + dx * dx) as usize;
                if dist < best.0 {
                    best = (dist, d);
                }
            }
            out.data_mut()[y * w + x] = best.1;
        }
    }
    Ok(DepthMap::new(out))
}

/// CSV rows: label,mae_mm,rmse_mm,imae_per_km,irmse_per_km,pixels.
pub fn report_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("label,mae_mm,rmse_mm,imae_per_km,irmse_per_km,pixels\n");
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{label},{},{},{},{},{}",
            r.mae, r.rmse, r.imae, r.irmse, r.count
        );
    }
    out
}

/// Fixed-width text table of the same rows.
pub fn report_text(rows: &[(String, MetricReport)]) -> String {
    let mut out = format!(
        "{:<18} {:>10} {:>10} {:>12} {:>12} {:>8}\n",
        "region", "MAE[mm]", "RMSE[mm]", "iMAE[1/km]", "iRMSE[1/km]", "pixels"
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{label:<18} {:>10.3} {:>10.3} {:>12.3} {:>12.3} {:>8}",
            r.mae, r.rmse, r.imae, r.irmse, r.count
        );
    }
    out
}

/// Signed error map as an RGB PNG: red where the prediction is too
/// deep, blue where too shallow, black at invalid ground truth;
/// intensity saturates at the largest absolute error.
pub fn save_error_map(path: &Path, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    let (h, w) = (gt.height(), gt.width());
    let mut scale = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if gt.is_valid(y, x) {
                scale = scale.max((pred.at(y, x) - gt.at(y, x)).abs());
            }
        }
    }
    let scale = scale.max(1e-9);
    let mut rgb = NdArray::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            if !gt.is_valid(y, x) {
                continue;
            }
            let e = (pred.at(y, x) - gt.at(y, x)) / scale;
            rgb.set3(0, y, x, e.max(0.0));
            rgb.set3(2, y, x, (-e).max(0.0));
        }
    }
    pngio::save_rgb_png(path, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, vals: &[f64]) -> DepthMap {
        DepthMap::new(NdArray::from_vec(&[h, w], vals.to_vec()))
    }

    #[test]
    fn exact_prediction_scores_zero() {
        let gt = map(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = compute_metrics(&gt, &gt, None).unwrap();
        assert_eq!(
            (r.mae, r.rmse, r.imae, r.irmse, r.count),
            (0.0, 0.0, 0.0, 0.0, 4)
        );
    }

    #[test]
    fn hand_computed_two_pixel_oracle() {
        let pred = map(1, 2, &[2.0, 4.0]);
        let gt = map(1, 2, &[1.0, 5.0]);
        let r = compute_metrics(&pred, &gt, None).unwrap();
        assert!((r.mae - 1000.0).abs() < 1e-9);
        assert!((r.rmse - 1000.0).abs() < 1e-9);
        assert!((r.imae - 275.0).abs() < 1e-9);
        let irmse_exact = ((0.5f64.powi(2) + 0.05f64.powi(2)) / 2.0).sqrt() * 1000.0;
        assert!((r.irmse - irmse_exact).abs() < 1e-9);
        assert!((r.irmse - 355.32).abs() < 0.01);
    }

    #[test]
    fn single_pixel_collapses_mae_and_rmse() {
        let r = compute_metrics(&map(1, 1, &[10.0]), &map(1, 1, &[11.0]), None).unwrap();
        assert!((r.mae - 1000.0).abs() < 1e-9);
        assert!((r.rmse - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn empty_omega_and_bad_prediction_are_data_errors() {
        let gt = map(1, 2, &[0.0, 0.0]);
        assert!(matches!(
            compute_metrics(&map(1, 2, &[1.0, 1.0]), &gt, None),
            Err(Error::Data(_))
        ));
        let gt = map(1, 2, &[1.0, 2.0]);
        let err = compute_metrics(&map(1, 2, &[1.0, 0.0]), &gt, None).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("(0,1)"), "missing pixel name: {msg}"),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn boundary_mask_geometry() {
        // constant labels → empty
        let flat = LabelMap::new(4, 4, vec![7; 16]);
        assert_eq!(boundary_mask(&flat).count(), 0);

        // vertical edge between x=3 and x=4 on a 10-wide grid: seeds
        // in both adjacent columns, dilation ±2 → columns 1..=6
        let (h, w) = (5, 10);
        let ids: Vec<u16> = (0..h * w)
            .map(|i| if i % w <= 3 { 0 } else { 1 })
            .collect();
        let bm = boundary_mask(&LabelMap::new(h, w, ids));
        for y in 0..h {
            for x in 0..w {
                let expect = (1..=6).contains(&x);
                assert_eq!(bm.mask()[y * w + x], expect, "at ({y},{x})");
            }
        }

        // checkerboard → everything is boundary
        let ids: Vec<u16> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u16).collect();
        assert_eq!(boundary_mask(&LabelMap::new(4, 4, ids)).count(), 16);
    }

    #[test]
    fn mask_and_complement_partition_the_grid() {
        let ids: Vec<u16> = (0..36).map(|i| if i % 6 < 3 { 0 } else { 1 }).collect();
        let bm = boundary_mask(&LabelMap::new(6, 6, ids));
        let comp = bm.complement();
        for i in 0..36 {
            assert!(bm.mask()[i] ^ comp[i]);
        }
    }

    #[test]
    fn split_eval_blurred_boundary_hurts_boundary_region() {
        // two depth planes with a vertical label edge
        let (h, w) = (8, 16);
        let mut gt = NdArray::zeros(&[h, w]);
        let mut labels = vec![0u16; h * w];
        for y in 0..h {
            for x in 0..w {
                let right = x >= 8;
                gt.data_mut()[y * w + x] = if right { 8.0 } else { 2.0 };
                labels[y * w + x] = right as u16;
            }
        }
        let gt = DepthMap::new(gt);
        let labels = LabelMap::new(h, w, labels);

        // smear: average the two planes inside ±1 of the edge
        let mut pred = gt.array().clone();
        for y in 0..h {
            for x in 7..=8 {
                pred.data_mut()[y * w + x] = 5.0;
            }
        }
        let pred = DepthMap::new(pred);
        let (on, off) = split_eval(&pred, &gt, &labels).unwrap();
        let (on, off) = (on.unwrap(), off.unwrap());
        assert!(on.mae > off.mae);
        assert_eq!(off.mae, 0.0);

        // constant labels → boundary region absent
        let flat = LabelMap::new(h, w, vec![0; h * w]);
        let (on, off) = split_eval(&gt, &gt, &flat).unwrap();
        assert!(on.is_none());
        assert!(off.is_some());

        // uniform error → identical MAE on both sides
        let shifted = DepthMap::new(gt.array().map(|v| v + 0.25));
        let (on, off) = split_eval(&shifted, &gt, &labels).unwrap();
        assert!((on.unwrap().mae - off.unwrap().mae).abs() < 1e-9);
    }

    #[test]
    fn interval_bucketing() {
        let gt = map(1, 4, &[1.0, 5.0, 7.0, 9.5]);
        let pred = map(1, 4, &[1.5, 5.5, 7.5, 10.0]);
        // single bucket = global MAE
        let rows = interval_mae(&pred, &gt, &[0.0, 10.0]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mae.unwrap() - 500.0).abs() < 1e-9);
        assert_eq!(rows[0].count, 4);
        // left-open right-closed: gt=5.0 belongs to (0,5], not (5,10]
        let rows = interval_mae(&pred, &gt, &[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(rows[0].count, 2);
        assert_eq!(rows[1].count, 2);
        // constant 7 m populates only (5,10]
        let gt7 = map(1, 3, &[7.0, 7.0, 7.0]);
        let rows = interval_mae(&gt7, &gt7, &[0.0, 5.0, 10.0, 15.0]).unwrap();
        assert_eq!(rows[0].count, 0);
        assert!(rows[0].mae.is_none());
        assert_eq!(rows[1].count, 3);
        assert_eq!(rows[2].count, 0);
        // unsorted edges rejected
        assert!(matches!(
            interval_mae(&gt7, &gt7, &[0.0, 5.0, 5.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn density_sweep_validation_and_passthrough() {
        use crate::synth::{synth_scene, SceneConfig};
        let scene = synth_scene(
            &SceneConfig {
                height: 16,
                width: 16,
                ..SceneConfig::default()
            },
            3,
        )
        .unwrap();
        let scenes = vec![scene];
        // density 1.0 with a pass-through predictor → zero error
        let mut passthrough = |_s: &SceneSample, sp: &SparseDepthMap| -> Result<DepthMap> {
            Ok(sp.map().clone())
        };
        let out = density_sweep(&scenes, &[1.0], 5, &mut passthrough).unwrap();
        assert_eq!(out[0].1.mae, 0.0);
        // unsorted or out-of-range densities rejected
        assert!(matches!(
            density_sweep(&scenes, &[0.1, 0.5], 5, &mut passthrough),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            density_sweep(&scenes, &[0.0], 5, &mut passthrough),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nearest_fill_voronoi_and_identity() {
        // single point fills everything
        let mut s = NdArray::zeros(&[3, 3]);
        s.data_mut()[4] = 2.5;
        let filled = nearest_fill(&SparseDepthMap::new(s)).unwrap();
        assert!(filled.array().data().iter().all(|&v| v == 2.5));

        // two points split by distance; ties go to the earlier pixel
        let mut s = NdArray::zeros(&[1, 5]);
        s.data_mut()[0] = 1.0;
        s.data_mut()[4] = 9.0;
        let filled = nearest_fill(&SparseDepthMap::new(s)).unwrap();
        assert_eq!(filled.array().data(), &[1.0, 1.0, 1.0, 9.0, 9.0]);

        // dense input is returned unchanged
        let dense = NdArray::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let filled = nearest_fill(&SparseDepthMap::new(dense.clone())).unwrap();
        assert_eq!(filled.array().data(), dense.data());

        // all-invalid input is a data error
        assert!(matches!(
            nearest_fill(&SparseDepthMap::new(NdArray::zeros(&[2, 2]))),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn csv_and_text_reports_contain_the_rows() {
        let r = MetricReport {
            mae: 12.5,
            rmse: 20.0,
            imae: 1.5,
            irmse: 2.5,
            count: 99,
        };
        let rows = vec![("global".to_string(), r)];
        let csv = report_csv(&rows);
        assert!(csv.starts_with("label,"));
        assert!(csv.contains("global,12.5,20,1.5,2.5,99"));
        let txt = report_text(&rows);
        assert!(txt.contains("global"));
        assert!(txt.contains("12.500"));
    }

    #[test]
    fn error_map_png_round_trips_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("err.png");
        let gt = map(2, 2, &[1.0, 2.0, 0.0, 4.0]);
        let pred = map(2, 2, &[1.5, 1.5, 3.0, 4.0]);
        save_error_map(&path, &pred, &gt).unwrap();
        let rgb = pngio::load_rgb_png(&path).unwrap();
        assert_eq!(rgb.shape(), &[3, 2, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        /// Permutation invariance, invalid-padding invariance, and the
        /// power-mean inequality on random grids.
        #[test]
        fn metric_invariances(seed in 0u64..10_000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let n = 12usize;
            let gt_vals: Vec<f64> = (0..n).map(|_| if r.random_range(0.0..1.0) < 0.25 { 0.0 } else { r.random_range(0.5..9.5) }).collect();
            let pred_vals: Vec<f64> = (0..n).map(|_| r.random_range(0.5..9.5)).collect();
            prop_assume!(gt_vals.iter().any(|&v| v > 0.0));
            let base = compute_metrics(
                &map(3, 4, &pred_vals),
                &map(3, 4, &gt_vals),
                None,
            ).unwrap();
            prop_assert!(base.rmse >= base.mae - 1e-9);
            prop_assert!(base.irmse >= base.imae - 1e-9);

            // shuffle pixels jointly
            let mut idx: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut r);
            let gt_p: Vec<f64> = idx.iter().map(|&i| gt_vals[i]).collect();
            let pred_p: Vec<f64> = idx.iter().map(|&i| pred_vals[i]).collect();
            let perm = compute_metrics(&map(3, 4, &pred_p), &map(3, 4, &gt_p), None).unwrap();
            prop_assert!((base.mae - perm.mae).abs() < 1e-9);
            prop_assert!((base.rmse - perm.rmse).abs() < 1e-9);
            prop_assert!((base.irmse - perm.irmse).abs() < 1e-9);

            // pad with invalid gt rows
            let mut gt_pad = gt_vals.clone();
            let mut pred_pad = pred_vals.clone();
            gt_pad.extend([0.0; 4]);
            pred_pad.extend([1.0; 4]);
            let padded = compute_metrics(&map(4, 4, &pred_pad), &map(4, 4, &gt_pad), None).unwrap();
            prop_assert!((base.mae - padded.mae).abs() < 1e-9);
            prop_assert_eq!(base.count, padded.count);
        }
    }
}
