//! On-disk dataset layout: PNG quadruples plus a key=value manifest.
//!
//! Each scene becomes four files (rgb, sparse, gt, labels) named by
//! index; `manifest.txt` records the generator config, per-scene seeds,
//! and every relative path, so a dataset is self-describing and
//! byte-reproducible from the manifest alone.

use crate::depth::SceneSample;
use crate::error::{Error, Result};
use crate::pngio;
use crate::synth::{synth_scene, SceneConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Loaded manifest: config used at synthesis time plus scene entries.
#[derive(Debug)]
pub struct DatasetManifest {
    pub config: SceneConfig,
    pub base_seed: u64,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug)]
pub struct SceneEntry {
    pub seed: u64,
    pub rgb: PathBuf,
    pub sparse: PathBuf,
    pub gt: PathBuf,
    pub labels: PathBuf,
}

/// Synthesizes `count` scenes into `dir` and writes `manifest.txt`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    cfg: &SceneConfig,
    count: usize,
    base_seed: u64,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "scenes={count}");
    let _ = writeln!(manifest, "seed={base_seed}");
    let _ = writeln!(manifest, "height={}", cfg.height);
    let _ = writeln!(manifest, "width={}", cfg.width);
    let _ = writeln!(manifest, "d_min={}", cfg.d_min);
    let _ = writeln!(manifest, "d_max={}", cfg.d_max);
    let _ = writeln!(manifest, "objects={}", cfg.objects);
    let _ = writeln!(manifest, "density={}", cfg.density);
    let _ = writeln!(manifest, "rgb_noise={}", cfg.rgb_noise);
    for i in 0..count {
        let seed = base_seed.wrapping_add(i as u64);
        let sample = synth_scene(cfg, seed)?;
        let names = [
            format!("scene_{i:04}_rgb.png"),
            format!("scene_{i:04}_sparse.png"),
            format!("scene_{i:04}_gt.png"),
            format!("scene_{i:04}_labels.png"),
        ];
        pngio::save_rgb_png(dir.join(&names[0]), &sample.rgb)?;
        pngio::save_depth_png(dir.join(&names[1]), sample.sparse.map())?;
        pngio::save_depth_png(dir.join(&names[2]), &sample.gt)?;
        pngio::save_labels_png(dir.join(&names[3]), &sample.labels)?;
        let _ = writeln!(manifest, "scene.{i}.seed={seed}");
        let _ = writeln!(manifest, "scene.{i}.rgb={}", names[0]);
        let _ = writeln!(manifest, "scene.{i}.sparse={}", names[1]);
        let _ = writeln!(manifest, "scene.{i}.gt={}", names[2]);
        let _ = writeln!(manifest, "scene.{i}.labels={}", names[3]);
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parses `manifest.txt`; paths are resolved relative to its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut kv = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::data(format!(
                "manifest line {} is not key=value: {line:?}",
                lineno + 1
            )));
        };
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::data(format!("manifest missing key {key:?}")))
    };
    let parse_f = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::data(format!("manifest key {key:?} is not a number")))
    };
    let parse_u = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|_| Error::data(format!("manifest key {key:?} is not an integer")))
    };
    let config = SceneConfig {
        height: parse_u("height")? as usize,
        width: parse_u("width")? as usize,
        d_min: parse_f("d_min")?,
        d_max: parse_f("d_max")?,
        objects: parse_u("objects")? as usize,
        density: parse_f("density")?,
        rgb_noise: parse_f("rgb_noise")?,
    };
    let count = parse_u("scenes")? as usize;
    let base_seed = parse_u("seed")?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let entry = SceneEntry {
            seed: parse_u(&format!("scene.{i}.seed"))?,
            rgb: dir.join(get(&format!("scene.{i}.rgb"))?),
            sparse: dir.join(get(&format!("scene.{i}.sparse"))?),
            gt: dir.join(get(&format!("scene.{i}.gt"))?),
            labels: dir.join(get(&format!("scene.{i}.labels"))?),
        };
        scenes.push(entry);
    }
    Ok(DatasetManifest {
        config,
        base_seed,
        scenes,
    })
}

/// Loads one scene's four files back into memory.
pub fn load_scene(entry: &SceneEntry) -> Result<SceneSample> {
    let rgb = pngio::load_rgb_png(&entry.rgb)?;
    let sparse = pngio::load_depth_png(&entry.sparse)?;
    let gt = pngio::load_depth_png(&entry.gt)?.map().clone();
    let labels = pngio::load_labels_png(&entry.labels)?;
    let (h, w) = (gt.height(), gt.width());
    if sparse.height() != h
        || sparse.width() != w
        || labels.height() != h
        || labels.width() != w
        || rgb.shape()[1] != h
        || rgb.shape()[2] != w
    {
        return Err(Error::data(format!(
            "scene files disagree on dimensions near {:?}",
            entry.gt
        )));
    }
    Ok(SceneSample {
        rgb,
        sparse,
        gt,
        labels,
    })
}
