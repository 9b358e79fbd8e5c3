//! Implementations behind the five subcommands.

use crate::config::RunConfig;
use clude_core::dataset;
use clude_core::depth::{DepthMap, SceneSample, SparseDepthMap};
use clude_core::error::{Error, Result};
use clude_core::evalkit::{self, IntervalRow, MetricAccumulator};
use clude_core::gradcheck::{check_param_grads, finite_diff_check, DEFAULT_STEP};
use clude_core::model::{
    load_checkpoint, save_checkpoint, CompletionModel, ForwardOptions, ModelConfig,
};
use clude_core::objective::{scene_loss, train, write_loss_csv, AdamW, LossWeights};
use clude_core::params::ParamSet;
use clude_core::pngio;
use clude_core::synth::{synth_scene, SceneConfig};
use clude_core::tape::Tape;
use clude_core::tensor::NdArray;
use std::fmt::Write as _;
use std::path::Path;

const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Turns a decoded `[1,h,w]` depth volume into a storable map.
/// Decoding can undershoot zero early in training; such pixels are
/// clamped to the prediction floor rather than asserted away.
fn materialize(arr: &NdArray) -> DepthMap {
    let shape = arr.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let data = arr
        .data()
        .iter()
        .map(|&v| v.max(evalkit::PRED_FLOOR))
        .collect();
    DepthMap::new(NdArray::from_vec(&[h, w], data))
}

fn predict(
    model: &CompletionModel,
    set: &ParamSet,
    rgb: &NdArray,
    sparse: &SparseDepthMap,
    opts: ForwardOptions,
) -> Result<DepthMap> {
    let mut t = Tape::new();
    let out = model.forward(&mut t, set, rgb, sparse, opts)?;
    Ok(materialize(t.value(out.final_depth())))
}

pub fn synth(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Result<()> {
    let count = count.unwrap_or(cfg.scene_count);
    if count == 0 {
        return Err(Error::config("--count must be positive"));
    }
    let manifest = dataset::write_dataset(out, &cfg.scene, count, cfg.seed)?;
    println!(
        "wrote {count} scenes ({}x{}, depth {}..{} m, density {}) and {}",
        cfg.scene.width,
        cfg.scene.height,
        cfg.scene.d_min,
        cfg.scene.d_max,
        cfg.scene.density,
        manifest.display()
    );
    Ok(())
}

fn load_scenes(manifest: &dataset::DatasetManifest) -> Result<Vec<SceneSample>> {
    manifest.scenes.iter().map(dataset::load_scene).collect()
}

pub fn train_cmd(
    cfg: &RunConfig,
    dataset_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    stage: &str,
    loss_csv: Option<&Path>,
) -> Result<()> {
    let manifest = dataset::read_manifest(dataset_path)?;
    let scenes = load_scenes(&manifest)?;

    let (model, mut set, mut opt) = match resume {
        Some(path) => {
            let (model, set, extra) = load_checkpoint(path)?;
            let opt = if extra.iter().any(|(n, _)| n == "opt.step") {
                AdamW::from_blobs(&set, cfg.train.weight_decay, &extra)?
            } else {
                AdamW::new(&set, cfg.train.weight_decay)
            };
            (model, set, opt)
        }
        None => {
            let (model, set) = CompletionModel::init(cfg.model.clone(), cfg.seed)?;
            let opt = AdamW::new(&set, cfg.train.weight_decay);
            (model, set, opt)
        }
    };

    let mut tc = cfg.train.clone();
    match stage {
        "1" => tc.stage2_steps = 0,
        "2" => {
            if (opt.step as usize) < tc.stage1_steps {
                return Err(Error::config(format!(
                    "--stage 2 needs a checkpoint already trained through stage 1 \
                     ({} steps); this one is at step {}",
                    tc.stage1_steps, opt.step
                )));
            }
        }
        _ => {}
    }

    let start = opt.step;
    let log = train(&model, &mut set, &scenes, &tc, &mut opt)?;
    save_checkpoint(out, &model.cfg, &set, &opt.to_blobs(&set))?;
    if let Some(path) = loss_csv {
        std::fs::write(path, write_loss_csv(&log)).map_err(|e| Error::io(path, e))?;
    }
    match log.last() {
        None => println!("checkpoint already at step {start}; nothing to train"),
        Some(last) => println!(
            "trained steps {start}..{} on {} scenes; final loss {:.6}",
            opt.step,
            scenes.len(),
            last.total
        ),
    }
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

pub struct EvalFlags {
    pub split_boundary: bool,
    pub intervals: bool,
    pub density_sweep: bool,
    pub baseline: bool,
    pub no_offsets: bool,
    pub zero_cue: bool,
    pub error_maps: bool,
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_path: &Path,
    flags: &EvalFlags,
    out_dir: Option<&Path>,
) -> Result<()> {
    let (model, set, _extra) = load_checkpoint(checkpoint)?;
    let manifest = dataset::read_manifest(dataset_path)?;
    if model.cfg.d_min != manifest.config.d_min || model.cfg.d_max != manifest.config.d_max {
        return Err(Error::config(format!(
            "checkpoint depth range [{}, {}] m does not match dataset range [{}, {}] m",
            model.cfg.d_min, model.cfg.d_max, manifest.config.d_min, manifest.config.d_max
        )));
    }
    if flags.error_maps && out_dir.is_none() {
        return Err(Error::config("--error-maps needs --out-dir"));
    }
    let scenes = load_scenes(&manifest)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let opts = ForwardOptions {
        offsets: !flags.no_offsets,
        zero_cue: flags.zero_cue,
        ..ForwardOptions::default()
    };
    let mut preds = Vec::with_capacity(scenes.len());
    let mut all = MetricAccumulator::default();
    let mut on_acc = MetricAccumulator::default();
    let mut off_acc = MetricAccumulator::default();
    let mut base_acc = MetricAccumulator::default();
    for scene in &scenes {
        let pred = predict(&model, &set, &scene.rgb, &scene.sparse, opts)?;
        all.add(&pred, &scene.gt, None)?;
        if flags.split_boundary {
            let bm = evalkit::boundary_mask(&scene.labels);
            on_acc.add(&pred, &scene.gt, Some(bm.mask()))?;
            off_acc.add(&pred, &scene.gt, Some(&bm.complement()))?;
        }
        if flags.baseline {
            let base = evalkit::nearest_fill(&scene.sparse)?;
            base_acc.add(&base, &scene.gt, None)?;
        }
        preds.push(pred);
    }

    let mut rows = vec![("all".to_string(), all.report()?)];
    if flags.split_boundary {
        if !on_acc.is_empty() {
            rows.push(("boundary".to_string(), on_acc.report()?));
        }
        if !off_acc.is_empty() {
            rows.push(("non-boundary".to_string(), off_acc.report()?));
        }
    }
    if flags.baseline && !base_acc.is_empty() {
        rows.push(("nearest-fill".to_string(), base_acc.report()?));
    }
    if flags.density_sweep {
        let mut predictor = |scene: &SceneSample, sparse: &SparseDepthMap| {
            predict(&model, &set, &scene.rgb, sparse, opts)
        };
        for (d, report) in
            evalkit::density_sweep(&scenes, &cfg.densities, cfg.seed, &mut predictor)?
        {
            rows.push((format!("density {d:.4}"), report));
        }
    }
    print!("{}", evalkit::report_text(&rows));

    let mut intervals = None;
    if flags.intervals {
        let edges = interval_edges(model.cfg.d_min, model.cfg.d_max, cfg.interval_width)?;
        let merged = merged_intervals(&preds, &scenes, &edges)?;
        println!("\nMAE by ground-truth depth:");
        for row in &merged {
            match row.mae {
                Some(m) => println!(
                    "  ({:>7.2}, {:>7.2}] m {:>12.3} mm {:>8} px",
                    row.lo, row.hi, m, row.count
                ),
                None => println!(
                    "  ({:>7.2}, {:>7.2}] m {:>15} {:>8} px",
                    row.lo, row.hi, "-", row.count
                ),
            }
        }
        intervals = Some(merged);
    }

    if let Some(dir) = out_dir {
        let path = dir.join("metrics.csv");
        std::fs::write(&path, evalkit::report_csv(&rows)).map_err(|e| Error::io(&path, e))?;
        if let Some(merged) = &intervals {
            let mut csv = String::from("lo_m,hi_m,mae_mm,pixels\n");
            for r in merged {
                let mae = r.mae.map(|m| m.to_string()).unwrap_or_default();
                let _ = writeln!(csv, "{},{},{},{}", r.lo, r.hi, mae, r.count);
            }
            let path = dir.join("intervals.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        }
        if flags.error_maps {
            for (i, (pred, scene)) in preds.iter().zip(&scenes).enumerate() {
                evalkit::save_error_map(&dir.join(format!("error_{i:03}.png")), pred, &scene.gt)?;
            }
        }
        println!("\nwrote reports to {}", dir.display());
    }
    Ok(())
}

fn interval_edges(d_min: f64, d_max: f64, width: f64) -> Result<Vec<f64>> {
    let mut edges = vec![d_min];
    let mut e = d_min;
    while d_max - e > 1e-9 {
        e = (e + width).min(d_max);
        edges.push(e);
    }
    if edges.len() < 2 {
        return Err(Error::config(
            "eval.interval_width leaves no depth intervals",
        ));
    }
    Ok(edges)
}

/// Pools per-scene interval tables into one, weighting each bucket's
/// MAE by its pixel count.
fn merged_intervals(
    preds: &[DepthMap],
    scenes: &[SceneSample],
    edges: &[f64],
) -> Result<Vec<IntervalRow>> {
    let buckets = edges.len() - 1;
    let mut abs_mm = vec![0.0f64; buckets];
    let mut count = vec![0usize; buckets];
    for (pred, scene) in preds.iter().zip(scenes) {
        for (i, row) in evalkit::interval_mae(pred, &scene.gt, edges)?
            .into_iter()
            .enumerate()
        {
            if let Some(m) = row.mae {
                abs_mm[i] += m * row.count as f64;
            }
            count[i] += row.count;
        }
    }
    Ok(edges
        .windows(2)
        .enumerate()
        .map(|(i, e)| IntervalRow {
            lo: e[0],
            hi: e[1],
            mae: (count[i] > 0).then(|| abs_mm[i] / count[i] as f64),
            count: count[i],
        })
        .collect())
}

pub fn infer(
    checkpoint: &Path,
    sparse_path: &Path,
    rgb_path: &Path,
    out: &Path,
    dump: Option<&Path>,
) -> Result<()> {
    let (model, set, _extra) = load_checkpoint(checkpoint)?;
    let sparse = pngio::load_depth_png(sparse_path)?;
    let rgb = pngio::load_rgb_png(rgb_path)?;
    let mut t = Tape::new();
    let outputs = model.forward(&mut t, &set, &rgb, &sparse, ForwardOptions::default())?;
    let final_map = materialize(t.value(outputs.final_depth()));
    pngio::save_depth_png(out, &final_map)?;
    println!(
        "completed {}x{} depth ({:.1}% sparse input) -> {}",
        sparse.width(),
        sparse.height(),
        sparse.density() * 100.0,
        out.display()
    );
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, &d) in outputs.depths.iter().enumerate() {
            let map = materialize(t.value(d));
            let path = dir.join(format!("d{}.png", i + 1));
            pngio::save_depth_png(&path, &map)?;
            println!(
                "  d{} {}x{} -> {}",
                i + 1,
                map.width(),
                map.height(),
                path.display()
            );
        }
        if let Some(s5) = &outputs.s5 {
            let path = dir.join("s5.png");
            pngio::save_depth_png(&path, s5.map())?;
            println!(
                "  s5 kept {} of {} sparse points -> {}",
                s5.map().valid_count(),
                sparse.map().valid_count(),
                path.display()
            );
        }
    }
    Ok(())
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> Result<()> {
    if std::env::var("CLUDE_GRADCHECK_CORRUPT").is_ok() {
        // Fault injection: hand the checker a deliberately wrong
        // analytic gradient (claims d/dx x^2 = 2x + 0.1). The run
        // must abort with a numeric error; if it ever passes, the
        // checker itself is broken and the exit code says so.
        let mut f = |x: &NdArray| x.data()[0] * x.data()[0];
        let point = NdArray::from_vec(&[1], vec![1.5]);
        let wrong = NdArray::from_vec(&[1], vec![2.0 * 1.5 + 0.1]);
        let err = finite_diff_check(&mut f, &point, &wrong, DEFAULT_STEP);
        println!("fault injection: corrupted gradient, relative error {err:.3e}");
        if err > GRADCHECK_THRESHOLD {
            return Err(Error::numeric(format!(
                "corrupted gradient rejected (relative error {err:.3e} > {GRADCHECK_THRESHOLD:.0e})"
            )));
        }
        println!("fault injection FAILED: the checker accepted a wrong gradient");
        return Ok(());
    }

    // A reduced copy of the full pipeline: every block participates,
    // the loss is the real multi-scale objective, only the sizes
    // shrink so central differences stay cheap.
    let mc = ModelConfig {
        k: 4,
        width: 2,
        blocks: 1,
        layers: 1,
        heads: 1,
        ..cfg.model.clone()
    };
    let (model, set) = CompletionModel::init(mc.clone(), cfg.seed)?;
    let sc = SceneConfig {
        height: 8,
        width: 8,
        d_min: mc.d_min,
        d_max: mc.d_max,
        objects: 2,
        density: 0.25,
        rgb_noise: cfg.scene.rgb_noise,
    };
    let scene = synth_scene(&sc, cfg.seed)?;
    let weights = LossWeights::default();
    let mut fwd = |t: &mut Tape, s: &ParamSet| {
        scene_loss(t, &model, s, &scene, ForwardOptions::default(), &weights)
            .expect("gradcheck forward pass failed")
            .loss
    };
    let worst = check_param_grads(&set, &mut fwd, DEFAULT_STEP, 2);
    println!(
        "checked {} parameter tensors, 2 coordinates each",
        set.len()
    );
    println!("worst relative gradient error: {worst:.3e} (threshold {GRADCHECK_THRESHOLD:.0e})");
    if worst > GRADCHECK_THRESHOLD {
        return Err(Error::numeric(format!(
            "gradient check failed: {worst:.3e} > {GRADCHECK_THRESHOLD:.0e}"
        )));
    }
    println!("gradient check passed");
    Ok(())
}
