//! Run configuration: JSON file, dotted-key overrides and validation.

use std::path::{Path, PathBuf};

use acpo_core::acpo::AcpoConfig;
use acpo_core::data::NUM_CLASSES;
use acpo_core::diffusion::{make_schedule, NoiseSchedule, PredictorArch};
use acpo_core::iqa::ScorerConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub adapters: AdapterConfig,
    pub iqa: IqaConfig,
    pub acpo: AcpoConfig,
    pub metrics: MetricsConfig,
    pub ablate: AblateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    /// Class-conditional generation and a conditional scorer.
    pub conditional: bool,
    pub diffusion_items: usize,
    pub iqa_items: usize,
    pub iqa_heldout_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    /// Per-pixel refinement head width; 0 disables it.
    pub pixel_hidden: usize,
    /// Condition embedding width, used only when `data.conditional` is set.
    pub cond_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IqaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub layer_weights: Vec<f64>,
    pub combine_init: [f64; 3],
    pub patch_grid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Matched-noise pairs drawn by `evaluate`.
    pub eval_samples: usize,
    /// Side-by-side PGM pairs written by `evaluate`.
    pub export_samples: usize,
    /// Clean renders used as the reference for the Fréchet distance.
    pub reference_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub lambda2: Vec<f64>,
    pub t_late_max: Vec<usize>,
    /// Anchor weights compared in the anchor on/off cells.
    pub lambda1: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            diffusion: DiffusionConfig::default(),
            adapters: AdapterConfig::default(),
            iqa: IqaConfig::default(),
            acpo: AcpoConfig::default(),
            metrics: MetricsConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { image_size: 16, conditional: false, diffusion_items: 2000, iqa_items: 3000, iqa_heldout_items: 400 }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            hidden: vec![128, 128],
            time_dim: 16,
            pixel_hidden: 0,
            cond_dim: 4,
            train_steps: 6000,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, scale: 1.0 }
    }
}

impl Default for IqaConfig {
    fn default() -> Self {
        Self { epochs: 40, lr: 3e-3, batch_size: 32, layer_weights: vec![0.5, 0.5], combine_init: [1.0, 1.0, 0.0], patch_grid: 4 }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { eval_samples: 200, export_samples: 0, reference_items: 500 }
    }
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { lambda2: vec![0.1, 1.0, 10.0], t_late_max: vec![10, 30, 50, 100], lambda1: vec![1.0, 0.0] }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies `KEY=VALUE` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        // resolve file keys first so overrides address the full tree
        let resolved: RunConfig = from_value(value)?;
        value = serde_json::to_value(&resolved).expect("config serializes");
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let cfg: RunConfig = from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version: expected {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        let d = &self.data;
        if d.image_size < 8 || d.image_size % 4 != 0 {
            return bad(format!("data.image_size: must be a multiple of 4 and >= 8, got {}", d.image_size));
        }
        for (k, v) in [("data.diffusion_items", d.diffusion_items), ("data.iqa_items", d.iqa_items), ("data.iqa_heldout_items", d.iqa_heldout_items)] {
            if v < 2 {
                return bad(format!("{k}: must be >= 2, got {v}"));
            }
        }
        let f = &self.diffusion;
        self.schedule()?;
        if f.hidden.contains(&0) {
            return bad("diffusion.hidden: widths must be >= 1".into());
        }
        if f.time_dim % 2 != 0 {
            return bad(format!("diffusion.time_dim: must be even, got {}", f.time_dim));
        }
        if d.conditional && f.cond_dim == 0 {
            return bad("diffusion.cond_dim: must be >= 1 for conditional runs".into());
        }
        if f.batch_size == 0 || !(f.lr > 0.0) {
            return bad("diffusion.batch_size and diffusion.lr must be positive".into());
        }
        let dims = self.arch().layer_dims();
        let cap = dims.iter().map(|&(i, o)| i.min(o)).min().unwrap_or(0);
        if self.adapters.rank == 0 || self.adapters.rank > cap {
            return bad(format!("adapters.rank: must lie in [1, {cap}], got {}", self.adapters.rank));
        }
        if !self.adapters.scale.is_finite() {
            return bad("adapters.scale: must be finite".into());
        }
        let q = &self.iqa;
        if q.epochs == 0 || q.batch_size == 0 || !(q.lr > 0.0) {
            return bad("iqa.epochs, iqa.batch_size and iqa.lr must be positive".into());
        }
        self.scorer_config().validate().map_err(|e| CliError::Config(format!("iqa: {e}")))?;
        self.acpo.validate(f.timesteps).map_err(|e| CliError::Config(format!("acpo: {e}")))?;
        if self.metrics.eval_samples < 2 || self.metrics.reference_items < 2 {
            return bad("metrics.eval_samples and metrics.reference_items must be >= 2".into());
        }
        if self.metrics.export_samples > self.metrics.eval_samples {
            return bad("metrics.export_samples: cannot exceed metrics.eval_samples".into());
        }
        for &w in &self.ablate.t_late_max {
            if w == 0 || w > f.timesteps || self.acpo.guided_steps > w {
                return bad(format!("ablate.t_late_max: {w} must lie in [guided_steps, {}]", f.timesteps));
            }
        }
        if self.ablate.lambda2.iter().chain(&self.ablate.lambda1).any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return bad("ablate: weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let f = &self.diffusion;
        make_schedule(f.timesteps, f.beta_start, f.beta_end).map_err(|e| CliError::Config(format!("diffusion: {e}")))
    }

    pub fn arch(&self) -> PredictorArch {
        let f = &self.diffusion;
        PredictorArch {
            image_size: self.data.image_size,
            hidden: f.hidden.clone(),
            time_dim: f.time_dim,
            cond_dim: if self.data.conditional { f.cond_dim } else { 0 },
            num_classes: NUM_CLASSES,
            pixel_hidden: f.pixel_hidden,
        }
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        let size = self.data.image_size;
        let mut c = if self.data.conditional { ScorerConfig::conditional(size, NUM_CLASSES) } else { ScorerConfig::two_stream(size) };
        c.layer_weights = self.iqa.layer_weights.clone();
        c.combine_init = self.iqa.combine_init;
        c.patch_grid = self.iqa.patch_grid;
        c
    }

    /// Fine-tuning settings with the seed taken from the run seed.
    pub fn acpo_config(&self) -> AcpoConfig {
        AcpoConfig { seed: self.seed, ..self.acpo.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact resolved configuration, ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("object").remove("out_dir");
        let text = value.to_string();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn from_value(value: Value) -> Result<RunConfig, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })
}

/// Sets `a.b.c` in `value` to the JSON-parsed right-hand side, or to the raw
/// string when it is not valid JSON. Every path segment must already exist.
pub fn apply_override(value: &mut Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| CliError::Config(format!("override `{item}` is not KEY=VALUE")))?;
    let key = key.trim();
    let mut node = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| CliError::Config(format!("{key}: `{}` is not a section", parts[..i].join("."))))?;
        node = obj.get_mut(*part).ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
