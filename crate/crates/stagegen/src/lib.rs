//! Two-stage stacked GAN toolkit.
//!
//! Stage 1 synthesizes edge images from latent noise with a DCGAN-style
//! generator/discriminator pair; stage 2 translates edges to grayscale with a
//! conditional residual generator. The crate also ships the preprocessing
//! pipeline that turns an RGB corpus into paired grayscale/edge training sets,
//! a Fréchet-distance evaluator over a learned embedding, and a probe for the
//! contraction behaviour of the conditional stage.
//!
//! Modules:
//! - [`ndtensor`]: minimal differentiable-compute core (conv, norms,
//!   activations, losses, Adam) with finite-difference verification.
//! - [`imageops`]: RGB → grayscale → Sobel-edge chain, resizing, and
//!   pixel/tensor range conversion.
//! - [`dataset`]: corpus ingestion, the synthetic-face stand-in corpus, and
//!   deterministic batch iteration.
//! - [`models`]: the four networks (two generators, two discriminators).
//! - [`training`]: adversarial loops, loss logs, checkpoints, sampling.
//! - [`metrics`]: Fréchet distance, the learned embedder, contraction probe.
//! - [`pipeline`]: the stacked generator graph and the subset-size experiment.

pub mod dataset;
pub mod error;
pub mod imageops;
pub mod metrics;
pub mod models;
pub mod ndtensor;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;

use std::sync::OnceLock;

/// Cap for worker threads used by parallel sections (dataset building).
///
/// Reads `STAGEGEN_THREADS`; defaults to the logical core count. The value is
/// resolved once per process.
pub fn worker_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        let cores = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        match std::env::var("STAGEGEN_THREADS") {
            Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(cores).min(cores),
            Err(_) => cores,
        }
    })
}

/// Thread pool honouring [`worker_threads`], shared across parallel sections.
pub(crate) fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .expect("failed to build worker thread pool")
    })
}
