//! Flat `key = value` run configuration files.
//!
//! Lines are `key = value`, `#` starts a comment, blank lines are ignored.
//! Unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use xiqa_core::model::{CrossWiring, ModelConfig};
use xiqa_core::train::{PairSampling, TrainConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

const KNOWN_KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels",
    "embed_dim",
    "num_heads",
    "encoder_depth",
    "decoder_depth",
    "mlp_ratio",
    "batch_size",
    "lr",
    "epochs",
    "seed",
    "crop",
    "flip_prob",
    "weight_decay",
    "warmup_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "pair_sampling",
    "cross_wiring",
    "finetune_epochs",
    "finetune_lr",
];

const REQUIRED_KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels",
    "embed_dim",
    "num_heads",
    "encoder_depth",
    "decoder_depth",
    "mlp_ratio",
    "batch_size",
    "epochs",
    "seed",
    "crop",
    "flip_prob",
];

/// Model and training settings for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if values.insert(key, value).is_some() {
                return Err(ConfigError(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        for key in REQUIRED_KEYS {
            if !values.contains_key(key) {
                return Err(ConfigError(format!("missing required key `{key}`")));
            }
        }

        let get = |key: &str| values.get(key).copied();
        let parse_usize = |key: &str| -> Result<usize, ConfigError> {
            get(key)
                .unwrap()
                .parse()
                .map_err(|_| ConfigError(format!("`{key}` must be an unsigned integer")))
        };
        let parse_f64 = |key: &str, default: f64| -> Result<f64, ConfigError> {
            match get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| ConfigError(format!("`{key}` must be a real number"))),
            }
        };

        let model = ModelConfig {
            image_size: parse_usize("image_size")?,
            patch_size: parse_usize("patch_size")?,
            channels: parse_usize("channels")?,
            embed_dim: parse_usize("embed_dim")?,
            num_heads: parse_usize("num_heads")?,
            encoder_depth: parse_usize("encoder_depth")?,
            decoder_depth: parse_usize("decoder_depth")?,
            mlp_ratio: parse_f64("mlp_ratio", 4.0)?,
        };
        model
            .validate()
            .map_err(|e| ConfigError(format!("invalid model config: {e}")))?;

        let lr = match get("lr") {
            None => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| ConfigError("`lr` must be a real number".into()))?,
            ),
        };
        let wiring = match get("cross_wiring") {
            None => CrossWiring::Transfer,
            Some(v) => v.parse::<CrossWiring>().map_err(ConfigError)?,
        };
        let pair_sampling = match get("pair_sampling") {
            None | Some("uniform") => PairSampling::Uniform,
            Some("anchored") => PairSampling::Anchored,
            Some(other) => {
                return Err(ConfigError(format!("unknown pair_sampling: {other}")))
            }
        };
        let seed: u64 = get("seed")
            .unwrap()
            .parse()
            .map_err(|_| ConfigError("`seed` must be an unsigned integer".into()))?;
        let warmup_steps = match get("warmup_steps") {
            None => 0,
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError("`warmup_steps` must be an unsigned integer".into()))?,
        };
        let finetune_epochs = match get("finetune_epochs") {
            None => 150,
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError("`finetune_epochs` must be an unsigned integer".into()))?,
        };

        let train = TrainConfig {
            batch_size: parse_usize("batch_size")?.max(1),
            lr,
            epochs: parse_usize("epochs")?,
            seed,
            crop: parse_usize("crop")?,
            flip_prob: parse_f64("flip_prob", 0.5)?,
            weight_decay: parse_f64("weight_decay", 0.05)?,
            warmup_steps,
            wiring,
            finetune_epochs,
            finetune_lr: parse_f64("finetune_lr", 0.01)?,
            adam_beta1: parse_f64("adam_beta1", 0.9)?,
            adam_beta2: parse_f64("adam_beta2", 0.999)?,
            adam_eps: parse_f64("adam_eps", 1e-8)?,
            pair_sampling,
        };
        if train.crop != model.image_size {
            return Err(ConfigError(format!(
                "`crop` ({}) must equal `image_size` ({})",
                train.crop, model.image_size
            )));
        }
        if !(0.0..=1.0).contains(&train.flip_prob) {
            return Err(ConfigError("`flip_prob` must lie in [0, 1]".into()));
        }
        Ok(RunConfig { model, train })
    }
}
