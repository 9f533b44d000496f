//! Run configuration: a JSON document mirroring the library's model and
//! training options, with CLI flags layered on top. Unknown keys are
//! rejected, and every run directory receives the fully resolved config.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stagegen::models::ModelSpec;
use stagegen::training::TrainConfig;

/// Optional per-field model overrides; unset fields fall back to the
/// side-scaled defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub image_side: Option<u32>,
    pub latent_dim: Option<usize>,
    pub base_feature_maps_g: Option<usize>,
    pub base_feature_maps_d: Option<usize>,
    pub disc_reduction_factor: Option<usize>,
    pub resnet_blocks: Option<usize>,
    pub dropout_enabled: Option<bool>,
    pub dropout_rate: Option<f64>,
    pub stage2_latent_enabled: Option<bool>,
}

impl ModelOverrides {
    pub fn resolve(&self, default_side: u32) -> ModelSpec {
        let side = self.image_side.unwrap_or(default_side);
        let base = ModelSpec::for_side(side);
        ModelSpec {
            image_side: side,
            latent_dim: self.latent_dim.unwrap_or(base.latent_dim),
            base_feature_maps_g: self.base_feature_maps_g.unwrap_or(base.base_feature_maps_g),
            base_feature_maps_d: self.base_feature_maps_d.unwrap_or(base.base_feature_maps_d),
            disc_reduction_factor: self
                .disc_reduction_factor
                .unwrap_or(base.disc_reduction_factor),
            resnet_blocks: self.resnet_blocks.unwrap_or(base.resnet_blocks),
            dropout_enabled: self.dropout_enabled.unwrap_or(base.dropout_enabled),
            dropout_rate: self.dropout_rate.unwrap_or(base.dropout_rate),
            stage2_latent_enabled: self
                .stage2_latent_enabled
                .unwrap_or(base.stage2_latent_enabled),
        }
    }
}

/// On-disk training run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: u8,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {path:?}"))?;
        let config: RunConfig = serde_json::from_str(&body)
            .with_context(|| format!("parsing config {path:?}"))?;
        Ok(config)
    }
}

/// Fully resolved training configuration as echoed into the run directory.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedRunConfig<'a> {
    pub stage: u8,
    pub manifest: &'a Path,
    pub out_dir: &'a Path,
    pub model: &'a ModelSpec,
    pub train: &'a TrainConfig,
}

/// Writes `resolved-config.json` into a run/output directory so the run is
/// reproducible from its artifacts alone.
pub fn write_echo<T: Serialize>(out_dir: &Path, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {out_dir:?}"))?;
    let path = out_dir.join("resolved-config.json");
    let body = serde_json::to_string_pretty(resolved)?;
    std::fs::write(&path, body).with_context(|| format!("writing {path:?}"))?;
    Ok(())
}
