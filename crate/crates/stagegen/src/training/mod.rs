//! Adversarial training loops, loss logging, checkpointing, and sample
//! generation.
//!
//! Determinism contract: given (seed, config, manifest), the loss columns
//! and all checkpoint bytes are reproducible within one build. The only
//! exception is the `wall_ms` telemetry column, which records real elapsed
//! time; determinism checks compare [`LossLog::deterministic_csv`].

mod checkpoint;
mod generate;
mod session;
mod stage1;
mod stage2;


use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, OptimBlob, TensorBlob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use session::{push_params, restore_params};
pub use generate::{generate, generate_samples, tensor_slice_to_image, GeneratedSet};
pub use stage1::{train_stage1, Stage1Session};
pub use stage2::{train_stage2, Stage2Session};

/// Where stage-2 training takes its conditional edge inputs from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    /// Edge images paired with their grayscale targets in the manifest.
    Real,
    /// Edges drawn from a trained stage-1 generator checkpoint.
    Checkpoint(PathBuf),
}

impl Default for EdgeSource {
    fn default() -> Self {
        EdgeSource::Real
    }
}

/// Training hyperparameters. `epochs`/`max_steps` bound the run; everything
/// else follows the standard adversarial-training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the reconstruction term in the stage-2 generator loss.
    pub lambda_l1: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub edge_source: EdgeSource,
    /// Optional hard step budget; the run stops once reached even inside an
    /// epoch. Used by the subset experiment to hold gradient updates equal.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_l1: 100.0,
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
            edge_source: EdgeSource::Real,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TrainConfig";
        if self.batch_size == 0 {
            return Err(Error::invalid(OP, "batch_size must be >= 1"));
        }
        if self.lr <= 0.0 || self.beta1 <= 0.0 || self.beta2 <= 0.0 {
            return Err(Error::invalid(OP, "lr and betas must be positive"));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::invalid(OP, "betas must be < 1"));
        }
        if self.lambda_l1 < 0.0 {
            return Err(Error::invalid(OP, "lambda_l1 must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid(OP, "log_every must be >= 1"));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub epoch: u64,
    pub d_loss: f32,
    pub g_loss_adv: f32,
    /// λ-weighted reconstruction term; 0 for stage 1 and for λ = 0.
    pub g_loss_l1: f32,
    pub wall_ms: u64,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,d_loss,g_loss_adv,g_loss_l1,wall_ms";

/// In-memory loss history; serialized as CSV with a fixed header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn csv(&self) -> String {
        let mut out = String::from(LOSS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.epoch, r.d_loss, r.g_loss_adv, r.g_loss_l1, r.wall_ms
            ));
        }
        out
    }

    /// CSV without the wall-clock column; this is the representation the
    /// determinism guarantees cover.
    pub fn deterministic_csv(&self) -> String {
        let mut out = String::from("step,epoch,d_loss,g_loss_adv,g_loss_l1");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.epoch, r.d_loss, r.g_loss_adv, r.g_loss_l1
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {parent:?}"), e))?;
        }
        std::fs::write(path, self.csv()).map_err(|e| Error::io(format!("writing {path:?}"), e))
    }

    pub fn all_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.d_loss.is_finite() && r.g_loss_adv.is_finite() && r.g_loss_l1.is_finite())
    }
}

/// Mean of a column over a clamped window; helper for convergence checks.
pub fn window_mean(rows: &[LossRow], range: std::ops::Range<usize>, col: fn(&LossRow) -> f32) -> f64 {
    let slice = &rows[range.start.min(rows.len())..range.end.min(rows.len())];
    if slice.is_empty() {
        return f64::NAN;
    }
    slice.iter().map(|r| col(r) as f64).sum::<f64>() / slice.len() as f64
}
