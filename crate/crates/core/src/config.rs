//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! crop_mode = keypoint
//! vit.image_size = 64, 48
//! ssl.local_crops = 10
//! ssl.attention_layer = none
//! diffusion.method = plms
//! ```
//!
//! Keys are dotted paths into [`ExperimentConfig`]. Values are parsed as
//! JSON when possible (numbers, booleans, `[a, b]`), comma lists become
//! arrays, `none` becomes null and anything else is a string. Unknown keys
//! and ill-typed values are rejected with the offending key.
//!
//! Per-module seeds, the denoiser's latent grid and its condition width are
//! derived (from `seed`, `vit.image_size` and `vit.condition_dim`) and cannot
//! be set directly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentPolicy;
use crate::diffusion::{
    build_schedule, DenoiserConfig, DiffusionSchedule, InpaintTrainConfig, SamplerMethod, ScheduleKind, LATENT_FACTOR,
};
use crate::error::{Error, Result};
use crate::metrics::SsimParams;
use crate::ssl::{CropMode, DistillConfig};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory holding `index.json`.
    pub root: PathBuf,
    pub n_pairs: usize,
    pub test_fraction: f64,
    /// Cap on test pairs used by `infer`; 0 means all.
    pub infer_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            n_pairs: 50,
            test_fraction: 0.1,
            infer_limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub sample_steps: usize,
    pub method: SamplerMethod,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
            sample_steps: 100,
            method: SamplerMethod::Plms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub crop_mode: CropMode,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub vit: ViTConfig,
    pub ssl: DistillConfig,
    pub augment: AugmentPolicy,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub inpaint: InpaintTrainConfig,
    pub metrics: SsimParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            crop_mode: CropMode::Keypoint,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            vit: ViTConfig::default(),
            ssl: DistillConfig::default(),
            augment: AugmentPolicy::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            inpaint: InpaintTrainConfig::default(),
            metrics: SsimParams::default(),
        };
        c.derive();
        c
    }
}

const DERIVED_KEYS: &[(&str, &str)] = &[
    ("vit.seed", "seed"),
    ("ssl.seed", "seed"),
    ("augment.rng_seed", "seed"),
    ("denoiser.seed", "seed"),
    ("inpaint.seed", "seed"),
    ("denoiser.latent_size", "vit.image_size"),
    ("denoiser.condition_dim", "vit.condition_dim"),
];

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("none") {
        return Value::Null;
    }
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(parse_value).collect());
    }
    Value::String(raw.to_string())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Some(map) = node.as_object_mut() else {
            return Err(Error::config(key, "unknown key"));
        };
        let Some(slot) = map.get_mut(*part) else {
            return Err(Error::config(key, "unknown key"));
        };
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::config(key, "names a section, not a value"));
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

impl ExperimentConfig {
    /// Fills the derived fields from their sources.
    fn derive(&mut self) {
        self.vit.seed = self.seed;
        self.ssl.seed = self.seed.wrapping_add(1);
        self.augment.rng_seed = self.seed.wrapping_add(2);
        self.denoiser.seed = self.seed.wrapping_add(3);
        self.inpaint.seed = self.seed.wrapping_add(4);
        let (h, w) = self.vit.image_size;
        self.denoiser.latent_size = (h / LATENT_FACTOR, w / LATENT_FACTOR);
        self.denoiser.condition_dim = self.vit.condition_dim;
    }

    /// Applies `(key, value)` overrides in order, then validates.
    pub fn with_overrides<'a>(self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut tree = serde_json::to_value(&self)?;
        for (key, raw) in pairs {
            let key = key.trim();
            if let Some((_, source)) = DERIVED_KEYS.iter().find(|(k, _)| *k == key) {
                return Err(Error::config(key, format!("derived from `{source}`")));
            }
            set_path(&mut tree, key, parse_value(raw))?;
            // type-check eagerly so the error names this key
            serde_json::from_value::<ExperimentConfig>(tree.clone())
                .map_err(|e| Error::config(key, format!("invalid value `{}`: {e}", raw.trim())))?;
        }
        let mut config: ExperimentConfig = serde_json::from_value(tree)?;
        config.derive();
        config.validate()?;
        Ok(config)
    }

    /// Parses flat config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_flat(text)?;
        ExperimentConfig::default().with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every leaf as `key = value`, in a form [`ExperimentConfig::parse`]
    /// reads back (derived keys are written as comments).
    pub fn to_flat_text(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                Value::Null => out.push((prefix.to_string(), "none".into())),
                Value::String(s) => out.push((prefix.to_string(), s.clone())),
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut leaves = Vec::new();
        walk("", &tree, &mut leaves);
        leaves
            .into_iter()
            .map(|(k, v)| {
                let derived = DERIVED_KEYS.iter().any(|(d, _)| *d == k);
                format!("{}{k} = {v}\n", if derived { "# " } else { "" })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.ssl.validate()?;
        self.augment.validate()?;
        self.denoiser.validate().map_err(|e| match e {
            Error::Config { message, .. } => Error::config(
                "vit.image_size",
                format!("image size must be divisible by {}: {message}", 2 * LATENT_FACTOR),
            ),
            other => other,
        })?;
        let (h, w) = self.vit.image_size;
        if h % (2 * LATENT_FACTOR) != 0 || w % (2 * LATENT_FACTOR) != 0 {
            return Err(Error::config(
                "vit.image_size",
                format!("{h}x{w} must be divisible by {}", 2 * LATENT_FACTOR),
            ));
        }
        self.inpaint.validate()?;
        self.schedule()?;
        let d = &self.diffusion;
        if d.sample_steps == 0 || d.sample_steps > d.steps {
            return Err(Error::config(
                "diffusion.sample_steps",
                format!("must be in [1, {}], got {}", d.steps, d.sample_steps),
            ));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::config("data.test_fraction", "must be in [0, 1)"));
        }
        if self.metrics.window == 0 || self.metrics.sigma <= 0.0 {
            return Err(Error::config("metrics.window", "window and sigma must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let d = &self.diffusion;
        build_schedule(d.steps, d.beta_start, d.beta_end, d.schedule)
    }
}

/// Splits flat config text into trimmed `(key, value)` pairs, skipping blank
/// lines and `#` comments.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_derived() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.denoiser.latent_size, (16, 12));
        assert_eq!(c.denoiser.condition_dim, c.vit.condition_dim);
    }

    #[test]
    fn parses_flat_text() {
        let c = ExperimentConfig::parse(
            "# toy\nseed = 7\ncrop_mode = random\nvit.image_size = 32, 32\nssl.local_crops = 4\n\
             ssl.attention_layer = 1\ndiffusion.method = ddim\ndata.root = /tmp/x\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.vit.seed, 7);
        assert_eq!(c.crop_mode, CropMode::Random);
        assert_eq!(c.vit.image_size, (32, 32));
        assert_eq!(c.denoiser.latent_size, (8, 8));
        assert_eq!(c.ssl.local_crops, 4);
        assert_eq!(c.ssl.attention_layer, Some(1));
        assert_eq!(c.diffusion.method, SamplerMethod::Ddim);
        assert_eq!(c.data.root, PathBuf::from("/tmp/x"));
    }

    fn failing_key(text: &str) -> String {
        match ExperimentConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(failing_key("ssl.nope = 1"), "ssl.nope");
        assert_eq!(failing_key("ssl.local_crops = many"), "ssl.local_crops");
        assert_eq!(failing_key("vit.seed = 3"), "vit.seed");
        assert_eq!(failing_key("ssl.teacher_temp = -1"), "ssl.teacher_temp");
        assert_eq!(failing_key("diffusion.method = euler"), "diffusion.method");
        assert_eq!(failing_key("vit.image_size = 60, 48"), "vit.image_size");
        assert_eq!(failing_key("diffusion.sample_steps = 2000"), "diffusion.sample_steps");
        assert_eq!(failing_key("just words"), "line 1");
    }

    #[test]
    fn flat_text_round_trips() {
        let c = ExperimentConfig::parse("seed = 5\nssl.epochs = 2\nvit.depth = 2\n").unwrap();
        let back = ExperimentConfig::parse(&c.to_flat_text()).unwrap();
        assert_eq!(back, c);
    }
}
