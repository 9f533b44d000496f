//! Fréchet-distance evaluation between image sets over a learned embedding,
//! plus the contraction probe for the conditional stage.
//!
//! Everything here computes in `f64`: covariance square roots are too
//! ill-conditioned for single precision.

mod embedder;
mod frechet;
mod probe;

pub use embedder::{fit_embedder, Embedder, EmbedderOptions, FitReport, ImageKind};
pub use frechet::{
    frechet_distance, gaussian_stats, matrix_sqrt_psd, GaussianStats, StreamingStats,
};
pub use probe::{contraction_probe, contraction_probe_stage2, ContractionReport};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imageops::ImageBuffer;

/// Evaluation report for one real-vs-generated comparison.
#[derive(Debug, Clone, Serialize)]
pub struct FidReport {
    pub fid: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub embed_dim: usize,
    pub eps_reg: f64,
    pub embedder_fingerprint: String,
}

/// Embeds both sets, fits Gaussian summaries, and returns their Fréchet
/// distance. Each set needs at least `dim + 1` images for a full-rank
/// covariance estimate.
pub fn fid_score(
    embedder: &Embedder,
    real: &[ImageBuffer],
    fake: &[ImageBuffer],
    eps_reg: f64,
) -> Result<FidReport> {
    let minimum = embedder.dim + 1;
    for (name, set) in [("real", real), ("fake", fake)] {
        if set.len() < minimum {
            return Err(Error::Metrics(format!(
                "{name} set has {} images; need at least {minimum} (embed_dim + 1)",
                set.len()
            )));
        }
    }
    let real_stats = gaussian_stats(&embedder.embed_set(real)?)?;
    let fake_stats = gaussian_stats(&embedder.embed_set(fake)?)?;
    Ok(FidReport {
        fid: frechet_distance(&real_stats, &fake_stats, eps_reg)?,
        n_real: real.len(),
        n_fake: fake.len(),
        embed_dim: embedder.dim,
        eps_reg,
        embedder_fingerprint: embedder.fingerprint.clone(),
    })
}
