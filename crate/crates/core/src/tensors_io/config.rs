//! Run configuration: a flat `key = value` text file whose values use JSON
//! scalar syntax (`4`, `0.9`, `true`, `"sqrt"`; bare words are read as
//! strings). Lines starting with `#` are comments. Unspecified keys keep
//! their defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmiNorm {
    /// `I / sqrt(H(U) H(V))`
    Sqrt,
    /// `2I / (H(U) + H(V))`
    Arithmetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionLoss {
    TvEntropy,
    /// Squared-distance-to-centroid baseline, ablation only.
    Concentration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Foreground part count K.
    pub num_parts: usize,
    /// Descriptor / feature dimension C.
    pub dim: usize,
    pub patch_size: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub mask_ratio: f64,
    pub group_size: usize,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub semantic_scale: f64,
    /// Additive angular margin, radians.
    pub semantic_margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub descriptor_layers: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    pub presence_threshold: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub ckpt_every: usize,
    pub fixed_masks: bool,
    pub detach_p_in_fill: bool,
    pub loss_on_masked_only: bool,
    pub decoder_pos_enc: bool,
    pub entropy_per_pixel: bool,
    pub include_background_pixels: bool,
    pub nmi_norm: NmiNorm,
    pub distribution_loss: DistributionLoss,
    pub without_r: bool,
    pub without_f: bool,
    pub without_b: bool,
    pub without_s: bool,
    pub without_v: bool,
    pub without_e: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_parts: 8,
            dim: 256,
            patch_size: 14,
            input_height: 224,
            input_width: 224,
            mask_ratio: 0.9,
            group_size: 8,
            lambda_p: 1.0,
            lambda_s: 0.25,
            lambda_d: 0.5,
            semantic_scale: 20.0,
            semantic_margin: 0.5,
            learning_rate: 5e-3,
            batch_size: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            descriptor_layers: 2,
            mlp_ratio: 4,
            seed: 0,
            presence_threshold: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 1000,
            ckpt_every: 100,
            fixed_masks: false,
            detach_p_in_fill: false,
            loss_on_masked_only: false,
            decoder_pos_enc: true,
            entropy_per_pixel: false,
            include_background_pixels: false,
            nmi_norm: NmiNorm::Sqrt,
            distribution_loss: DistributionLoss::TvEntropy,
            without_r: false,
            without_f: false,
            without_b: false,
            without_s: false,
            without_v: false,
            without_e: false,
        }
    }
}

/// Short symbols accepted in config files.
const ALIASES: &[(&str, &str)] = &[
    ("K", "num_parts"),
    ("C", "dim"),
    ("p", "patch_size"),
    ("r", "mask_ratio"),
    ("G", "group_size"),
    ("s", "semantic_scale"),
    ("m", "semantic_margin"),
    ("lr", "learning_rate"),
];

/// Keys that change parameter shapes or the forward graph.
pub const MODEL_KEYS: &[&str] = &[
    "num_parts",
    "dim",
    "patch_size",
    "input_height",
    "input_width",
    "encoder_layers",
    "decoder_layers",
    "descriptor_layers",
    "mlp_ratio",
    "decoder_pos_enc",
];

impl RunConfig {
    pub fn grid_height(&self) -> usize {
        self.input_height / self.patch_size
    }

    pub fn grid_width(&self) -> usize {
        self.input_width / self.patch_size
    }

    pub fn groups_per_batch(&self) -> usize {
        self.batch_size / self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let err = |keys: &[&str], message: String| Error::Config {
            keys: keys.iter().map(|k| k.to_string()).collect(),
            message,
        };
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(err(&["mask_ratio"], format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.group_size == 0 || self.batch_size == 0 || self.batch_size % self.group_size != 0 {
            return Err(err(
                &["batch_size", "group_size"],
                format!("batch_size {} is not divisible by group_size {}", self.batch_size, self.group_size),
            ));
        }
        if self.patch_size == 0
            || self.input_height % self.patch_size != 0
            || self.input_width % self.patch_size != 0
        {
            return Err(err(
                &["input_height", "input_width", "patch_size"],
                format!(
                    "input {}x{} is not divisible by patch_size {}",
                    self.input_height, self.input_width, self.patch_size
                ),
            ));
        }
        if self.grid_height() < 2 || self.grid_width() < 2 {
            return Err(err(&["input_height", "input_width", "patch_size"], "feature grid must be at least 2x2".into()));
        }
        if self.num_parts == 0 {
            return Err(err(&["num_parts"], "num_parts must be positive".into()));
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(err(&["dim"], format!("dim {} must be a positive multiple of 4", self.dim)));
        }
        if self.descriptor_layers == 0 || self.mlp_ratio == 0 {
            return Err(err(&["descriptor_layers", "mlp_ratio"], "must be positive".into()));
        }
        if !(self.presence_threshold >= 0.0) {
            return Err(err(&["presence_threshold"], "must be non-negative".into()));
        }
        for (k, v) in [("learning_rate", self.learning_rate), ("semantic_scale", self.semantic_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(err(&[k], format!("{k} must be positive, got {v}")));
            }
        }
        if self.ckpt_every == 0 {
            return Err(err(&["ckpt_every"], "must be positive".into()));
        }
        Ok(())
    }

    /// Parses config text, fills defaults, and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Map::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let split = line.find(['=', ':']).ok_or_else(|| Error::Config {
                keys: vec![],
                message: format!("line {}: expected `key = value`", lineno + 1),
            })?;
            let key = line[..split].trim().trim_matches('"');
            let value_text = line[split + 1..].trim().trim_end_matches(',');
            let value: Value = serde_json::from_str(value_text)
                .unwrap_or_else(|_| Value::String(value_text.to_string()));
            let canonical = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, c)| *c);
            let targets: Vec<&str> = if canonical == "input_size" {
                vec!["input_height", "input_width"]
            } else {
                vec![canonical]
            };
            for target in targets {
                if map.insert(target.to_string(), value.clone()).is_some() {
                    return Err(Error::Config {
                        keys: vec![target.to_string()],
                        message: format!("line {}: key given twice", lineno + 1),
                    });
                }
            }
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config {
            keys: vec![],
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialises to the same flat text format.
    pub fn to_text(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!()
        };
        map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Stable 16-hex-digit digest of every key.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    /// Model-shape keys whose values differ between two configs.
    pub fn model_differences(&self, other: &RunConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        MODEL_KEYS.iter().filter(|k| a[**k] != b[**k]).map(|k| k.to_string()).collect()
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}
