//! Shared `key = value` run configuration.
//!
//! One flat namespace covers scene generation, perturbation, training and
//! loss weights; the CLI layers `--key=value` overrides on top of the file.
//! Unknown keys are rejected so typos fail loudly. `#` starts a comment.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dap::{DapConfig, DepthMode};
use crate::geometry::CameraCalib;
use crate::losses::LossWeights;
use crate::model::TrainConfig;
use crate::synth::{ClassDims, SceneConfig};
use crate::{real, Real};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line} is not 'key = value': {text:?}")]
    BadLine { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key:?}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parses `key = value` lines into an ordered map; later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Applies `--key=value` style overrides onto a parsed map.
pub fn apply_overrides(
    map: &mut BTreeMap<String, String>,
    overrides: &[String],
) -> Result<(), ConfigError> {
    for raw in overrides {
        let stripped = raw.strip_prefix("--").unwrap_or(raw);
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(ConfigError::BadLine {
                line: 0,
                text: raw.clone(),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(())
}

/// Everything one run needs: scene generation plus training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig<F> {
    pub scene: SceneConfig<F>,
    pub train: TrainConfig<F>,
    /// Scene count for dataset generation.
    pub scenes: usize,
}

impl<F: Real> Default for RunConfig<F> {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            scenes: 50,
        }
    }
}

fn parse_num<F: Real>(key: &str, value: &str) -> Result<F, ConfigError> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .and_then(F::from_f64)
        .ok_or_else(|| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        })
}

fn parse_int(key: &str, value: &str) -> Result<u64, ConfigError> {
    value.parse::<u64>().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

fn parse_list<F: Real>(key: &str, value: &str) -> Result<Vec<F>, ConfigError> {
    value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect()
}

// generic stand-in for categories past the three tuned defaults
fn generic_class_dims<F: Real>() -> ClassDims<F> {
    ClassDims {
        mean: [real(1.9), real(1.8), real(4.8)],
        std: [real(0.1), real(0.1), real(0.3)],
    }
}

impl<F: Real> RunConfig<F> {
    /// Builds a config from parsed keys, starting at the defaults. The
    /// `seed` key feeds every seeded component; `anchor_depth` defaults to 0
    /// in residual mode and to the mid depth in absolute mode.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut anchor_depth_set = false;
        let mut camera = (
            real::<F>(700.0),
            real::<F>(700.0),
            real::<F>(640.0),
            real::<F>(192.0),
            real::<F>(1280.0),
            real::<F>(384.0),
        );
        let mut sigma_depth: Option<Vec<F>> = None;
        let mut sigma_corner: Option<Vec<F>> = None;

        for (key, value) in map {
            match key.as_str() {
                "seed" => {
                    let s = parse_int(key, value)?;
                    cfg.scene.seed = s;
                    cfg.train.seed = s;
                    cfg.train.dap.seed = s;
                }
                "scenes" => cfg.scenes = parse_int(key, value)? as usize,
                "num_objects_min" => cfg.scene.num_objects_min = parse_int(key, value)? as usize,
                "num_objects_max" => cfg.scene.num_objects_max = parse_int(key, value)? as usize,
                "depth_min" => cfg.scene.depth_min = parse_num(key, value)?,
                "depth_max" => cfg.scene.depth_max = parse_num(key, value)?,
                "occlusion_prob" => cfg.scene.occlusion_prob = parse_num(key, value)?,
                "truncation_prob" => cfg.scene.truncation_prob = parse_num(key, value)?,
                "camera_height" => cfg.scene.camera_height = parse_num(key, value)?,
                "fx" => camera.0 = parse_num(key, value)?,
                "fy" => camera.1 = parse_num(key, value)?,
                "cx" => camera.2 = parse_num(key, value)?,
                "cy" => camera.3 = parse_num(key, value)?,
                "img_w" => camera.4 = parse_num(key, value)?,
                "img_h" => camera.5 = parse_num(key, value)?,
                "sigma_depth" => sigma_depth = Some(parse_list(key, value)?),
                "sigma_corner" => sigma_corner = Some(parse_list(key, value)?),
                "num_classes" => {
                    let n = parse_int(key, value)? as usize;
                    if !(1..=8).contains(&n) {
                        return Err(ConfigError::BadValue {
                            key: key.clone(),
                            value: value.clone(),
                        });
                    }
                    while cfg.scene.class_dims.len() < n {
                        cfg.scene.class_dims.push(generic_class_dims());
                    }
                    cfg.scene.class_dims.truncate(n);
                }
                "gamma_b" => cfg.train.dap.gamma_b = parse_num(key, value)?,
                "gamma_d" => cfg.train.dap.gamma_d = parse_num(key, value)?,
                "class_flip_prob" => cfg.train.dap.class_flip_prob = parse_num(key, value)?,
                "depth_mode" => {
                    cfg.train.dap.depth_mode =
                        DepthMode::parse(value).ok_or_else(|| ConfigError::BadValue {
                            key: key.clone(),
                            value: value.clone(),
                        })?
                }
                "hidden" => cfg.train.hidden = parse_int(key, value)? as usize,
                "learning_rate" => cfg.train.learning_rate = parse_num(key, value)?,
                "epochs" => cfg.train.epochs = parse_int(key, value)? as usize,
                "batch_size" => cfg.train.batch_size = parse_int(key, value)? as usize,
                "beta" => cfg.train.beta = parse_num(key, value)?,
                "groups" => cfg.train.groups = parse_int(key, value)? as usize,
                "num_anchors" => cfg.train.num_anchors = parse_int(key, value)? as usize,
                "anchor_depth" => {
                    cfg.train.anchor_depth = parse_num(key, value)?;
                    anchor_depth_set = true;
                }
                "uniform_noise" => cfg.train.uniform_noise = parse_bool(key, value)?,
                "lambda_bbox" => cfg.train.weights.lambda_bbox = parse_num(key, value)?,
                "lambda_d" => cfg.train.weights.lambda_d = parse_num(key, value)?,
                "lambda_cls" => cfg.train.weights.lambda_cls = parse_num(key, value)?,
                _ => return Err(ConfigError::UnknownKey(key.clone())),
            }
        }

        cfg.scene.camera = CameraCalib::new(
            camera.0, camera.1, camera.2, camera.3, camera.4, camera.5,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        if let Some(values) = sigma_depth {
            if values.len() != cfg.scene.strata.len() {
                resize_strata(&mut cfg.scene, values.len());
            }
            for (s, v) in cfg.scene.strata.iter_mut().zip(values) {
                s.sigma_depth = v;
            }
        }
        if let Some(values) = sigma_corner {
            if values.len() != cfg.scene.strata.len() {
                resize_strata(&mut cfg.scene, values.len());
            }
            for (s, v) in cfg.scene.strata.iter_mut().zip(values) {
                s.sigma_corner = v;
            }
        }

        if !anchor_depth_set && cfg.train.dap.depth_mode == DepthMode::Absolute {
            cfg.train.anchor_depth =
                (cfg.scene.depth_min + cfg.scene.depth_max) / real::<F>(2.0);
        }

        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.scene.num_objects_min < 1 || self.scene.num_objects_max < self.scene.num_objects_min
        {
            return err("object count range is empty");
        }
        if !(self.scene.depth_min > F::zero() && self.scene.depth_max > self.scene.depth_min) {
            return err("depth range is empty");
        }
        if self.scene.strata.is_empty() {
            return err("at least one noise stratum required");
        }
        if self.train.groups < 1 || self.train.hidden < 1 || self.train.batch_size < 1 {
            return err("groups, hidden and batch_size must be positive");
        }
        if !(self.train.learning_rate >= F::zero()) {
            return err("learning rate must be nonnegative");
        }
        if !(self.train.beta >= F::zero() && self.train.beta < F::one()) {
            return err("beta must lie in [0, 1)");
        }
        DapConfig::new(
            self.train.dap.gamma_b,
            self.train.dap.gamma_d,
            self.train.dap.class_flip_prob,
            self.train.dap.depth_mode,
            self.train.dap.seed,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        LossWeights::new(
            self.train.weights.lambda_bbox,
            self.train.weights.lambda_d,
            self.train.weights.lambda_cls,
        )
        .map_err(|_| ConfigError::Invalid("loss weights must be nonnegative".into()))?;
        Ok(())
    }
}

fn resize_strata<F: Real>(scene: &mut SceneConfig<F>, n: usize) {
    let last = *scene.strata.last().expect("defaults are nonempty");
    scene.strata.resize(n.max(1), last);
    scene.strata.truncate(n.max(1));
}
