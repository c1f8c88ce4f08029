//! Run configuration shared by every subcommand.
//!
//! Config files are `key = value` lines; `#` starts a comment. Keys use the
//! field names below. Command-line flags are applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{
    EngineOptions, SegmentOptions, DEFAULT_LAMBDA, DEFAULT_STRIDE_PX, DEFAULT_THRESHOLD,
    DEFAULT_WINDOW_PX,
};
use crate::error::{Error, Result};
use crate::refine::{PamrConfig, DEFAULT_DILATIONS};
use crate::trainer::{Aggregation, CaptionSampling, ProjectionModeConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Text-embedding container for class names.
    pub vocab: Option<PathBuf>,
    pub classes: Option<PathBuf>,

    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub temperature: f32,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub caption_sampling: CaptionSampling,
    pub projection: ProjectionModeConfig,

    pub lambda: f32,
    pub threshold: f32,
    pub window: usize,
    pub stride: usize,
    pub background_cleaning: bool,
    pub prompt_template: String,
    pub ignore_index: Option<u32>,

    pub mask_refinement: bool,
    pub pamr_iterations: usize,
    pub pamr_dilations: Vec<usize>,
    pub pamr_sigma_floor: f32,
    pub pamr_kernel_scale: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let pamr = PamrConfig::default();
        RunConfig {
            dataset: None,
            checkpoint: None,
            output: None,
            vocab: None,
            classes: None,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            max_steps: None,
            temperature: train.temperature,
            seed: train.seed,
            aggregation: train.aggregation,
            caption_sampling: train.caption_sampling,
            projection: train.projection_mode,
            lambda: DEFAULT_LAMBDA,
            threshold: DEFAULT_THRESHOLD,
            window: DEFAULT_WINDOW_PX,
            stride: DEFAULT_STRIDE_PX,
            background_cleaning: false,
            prompt_template: "{}".into(),
            ignore_index: Some(crate::eval::DEFAULT_IGNORE_INDEX),
            mask_refinement: false,
            pamr_iterations: pamr.iterations,
            pamr_dilations: DEFAULT_DILATIONS.to_vec(),
            pamr_sigma_floor: pamr.sigma_floor,
            pamr_kernel_scale: pamr.kernel_scale,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidParameter(format!(
            "bad boolean `{value}` for `{key}`"
        ))),
    }
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = Some(v.into()),
            "checkpoint" => self.checkpoint = Some(v.into()),
            "output" => self.output = Some(v.into()),
            "vocab" => self.vocab = Some(v.into()),
            "classes" => self.classes = Some(v.into()),
            "lr" => self.lr = parse(key, v)?,
            "batch_size" | "batch" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse_optional(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "aggregation" => self.aggregation = v.parse()?,
            "caption_sampling" => self.caption_sampling = v.parse()?,
            "projection" => {
                self.projection = match v {
                    "tanh" => ProjectionModeConfig::Tanh,
                    "linear" => ProjectionModeConfig::Linear,
                    _ => return Err(Error::InvalidParameter(format!("unknown projection `{v}`"))),
                }
            }
            "lambda" => self.lambda = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "background_cleaning" => self.background_cleaning = parse_bool(key, v)?,
            "prompt_template" => self.prompt_template = v.to_owned(),
            "ignore_index" => self.ignore_index = parse_optional(key, v)?,
            "mask_refinement" => self.mask_refinement = parse_bool(key, v)?,
            "pamr_iterations" => self.pamr_iterations = parse(key, v)?,
            "pamr_dilations" => {
                self.pamr_dilations = v
                    .split(',')
                    .map(|d| parse(key, d.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "pamr_sigma_floor" => self.pamr_sigma_floor = parse(key, v)?,
            "pamr_kernel_scale" => self.pamr_kernel_scale = parse(key, v)?,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown config key `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidParameter(format!("line {}: expected `key = value`", n + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = RunConfig::default();
        cfg.apply_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.batch_size == 0 || self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidParameter(
                "batch size, window and stride must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidParameter(
                "temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            lr: self.lr,
            temperature: self.temperature,
            seed: self.seed,
            aggregation: self.aggregation,
            caption_sampling: self.caption_sampling,
            projection_mode: self.projection,
            ..TrainConfig::default()
        }
    }

    pub fn pamr_config(&self) -> PamrConfig {
        PamrConfig {
            iterations: self.pamr_iterations,
            dilations: self.pamr_dilations.clone(),
            sigma_floor: self.pamr_sigma_floor,
            kernel_scale: self.pamr_kernel_scale,
        }
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            segment: SegmentOptions {
                background_cleaning: self.background_cleaning,
                lambda: self.lambda,
                threshold: self.threshold,
            },
            window_px: self.window,
            stride_px: self.stride,
            refinement: self.mask_refinement.then(|| self.pamr_config()),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.lambda, 5.0 / 6.0);
        assert_eq!(c.threshold, 0.55);
        assert_eq!(c.pamr_iterations, 10);
        assert_eq!(c.window, 448);
        assert_eq!(c.stride, 224);
    }

    #[test]
    fn parses_key_value_text() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nlr = 0.01\nbackground_cleaning = yes\npamr_dilations = 1, 2\naggregation = mean_heads # trailing\n")
            .unwrap();
        assert_eq!(c.lr, 0.01);
        assert!(c.background_cleaning);
        assert_eq!(c.pamr_dilations, vec![1, 2]);
        assert_eq!(c.aggregation, Aggregation::MeanHeads);
        assert!(c.apply_text("nonsense").is_err());
        assert!(c.set("colour", "red").is_err());
    }

    #[test]
    fn validation_catches_bad_lambda() {
        let c = RunConfig {
            lambda: 1.2,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
