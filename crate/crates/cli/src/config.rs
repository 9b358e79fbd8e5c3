//! Flat key=value run configuration with named presets.
//!
//! Resolution order: built-in defaults → presets (in the order given)
//! → config file → `--set` overrides → the CLUDE_SEED environment
//! variable. Every key is validated against the schema below before
//! any command does work.

use clude_core::error::{Error, Result};
use clude_core::model::ModelConfig;
use clude_core::objective::{LossWeights, TrainConfig};
use clude_core::synth::SceneConfig;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    /// Scenes written by `synth` when --count is not given.
    pub scene_count: usize,
    pub train: TrainConfig,
    /// Densities for the robustness sweep, strictly descending.
    pub densities: Vec<f64>,
    /// Bucket width in meters for the interval MAE table.
    pub interval_width: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            scene_count: 8,
            train: TrainConfig::default(),
            densities: vec![0.05, 0.015, 0.005],
            interval_width: 2.5,
        };
        cfg.sync_range();
        cfg
    }
}

impl RunConfig {
    /// Keeps the synthetic-scene depth range tied to the model range.
    fn sync_range(&mut self) {
        self.scene.d_min = self.model.d_min;
        self.scene.d_max = self.model.d_max;
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "kitti" => {
                self.model.d_min = 0.0;
                self.model.d_max = 90.0;
                self.model.k = 32;
                self.model.tau = 0.5;
                self.sync_range();
            }
            "void" => {
                self.model.d_min = 0.2;
                self.model.d_max = 5.0;
                self.model.k = 16;
                self.model.tau = 0.25;
                self.sync_range();
            }
            "desk" => {
                self.model.d_min = 0.0;
                self.model.d_max = 10.0;
                self.model.k = 16;
                self.model.tau = 0.25;
                self.scene.height = 64;
                self.scene.width = 64;
                self.sync_range();
            }
            "clude-dagger" => self.train.weights = LossWeights::dagger(),
            "clude-dagger-ce" => self.train.weights = LossWeights::dagger_ce(),
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (expected kitti, void, desk, clude-dagger, clude-dagger-ce)"
                )))
            }
        }
        Ok(())
    }

    /// Applies one schema-checked key=value assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("invalid value for {key}: `{value}`")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "d_min" => {
                self.model.d_min = parse(key, value)?;
                self.sync_range();
            }
            "d_max" => {
                self.model.d_max = parse(key, value)?;
                self.sync_range();
            }
            "k" => self.model.k = parse(key, value)?,
            "tau" => self.model.tau = parse(key, value)?,
            "width" => self.model.width = parse(key, value)?,
            "blocks" => self.model.blocks = parse(key, value)?,
            "layers" => self.model.layers = parse(key, value)?,
            "heads" => self.model.heads = parse(key, value)?,
            "band_scale" => self.model.band_scale = parse(key, value)?,
            "temp_scale" => self.model.temp_scale = parse(key, value)?,
            "scene.height" => self.scene.height = parse(key, value)?,
            "scene.width" => self.scene.width = parse(key, value)?,
            "scene.objects" => self.scene.objects = parse(key, value)?,
            "scene.density" => self.scene.density = parse(key, value)?,
            "scene.rgb_noise" => self.scene.rgb_noise = parse(key, value)?,
            "scene.count" => self.scene_count = parse(key, value)?,
            "train.stage1" => self.train.stage1_steps = parse(key, value)?,
            "train.stage2" => self.train.stage2_steps = parse(key, value)?,
            "train.lr1" => self.train.lr1 = parse(key, value)?,
            "train.lr2" => self.train.lr2 = parse(key, value)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, value)?,
            "train.batch" => self.train.batch = parse(key, value)?,
            "train.wd" => self.train.weight_decay = parse(key, value)?,
            "train.w_ce" => self.train.weights.ce = parse(key, value)?,
            "train.w_mae" => self.train.weights.mae = parse(key, value)?,
            "train.w_mse" => self.train.weights.mse = parse(key, value)?,
            "train.offsets" => self.train.offsets = parse(key, value)?,
            "eval.densities" => {
                self.densities = value
                    .split(',')
                    .map(|p| parse("eval.densities", p.trim()))
                    .collect::<Result<Vec<f64>>>()?;
            }
            "eval.interval_width" => self.interval_width = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_set_flag(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            Error::config(format!("--set expects key=value, got `{assignment}`"))
        })?;
        self.apply(k.trim(), v.trim())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("CLUDE_SEED") {
            self.seed = v.parse().map_err(|_| {
                Error::config(format!("CLUDE_SEED must be an unsigned integer, got `{v}`"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        if self.scene_count == 0 {
            return Err(Error::config("scene.count must be positive"));
        }
        if self.densities.is_empty()
            || self
                .densities
                .iter()
                .any(|&d| !(d > 0.0 && d <= 1.0))
            || self.densities.windows(2).any(|p| p[1] >= p[0])
        {
            return Err(Error::config(format!(
                "eval.densities must be strictly descending within (0, 1], got {:?}",
                self.densities
            )));
        }
        if self.interval_width <= 0.0 {
            return Err(Error::config("eval.interval_width must be positive"));
        }
        Ok(())
    }

    /// Full resolution pipeline used by every subcommand.
    pub fn resolve(
        config_file: Option<&Path>,
        presets: &[String],
        sets: &[String],
    ) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for p in presets {
            cfg.apply_preset(p)?;
        }
        if let Some(path) = config_file {
            cfg.apply_file(path)?;
        }
        for s in sets {
            cfg.apply_set_flag(s)?;
        }
        cfg.apply_env()?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}
