//! Contraction probe: measures `r = ‖f(x+h) − f(x)‖ / ‖h‖` for a mapping
//! `f` over sampled edge inputs and Gaussian perturbations. The norm is
//! Euclidean over flattened pixels.
//!
//! This produces a measurement report, not an assertion: whether the
//! conditional stage is contractive (`r < 1`) is the hypothesis under test.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{LatentVector, ModelSpec, Phase, Stage2Generator};
use crate::ndtensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub sigma: f64,
    pub n_pairs: usize,
    pub seed: u64,
    /// Fraction of sampled pairs with `r < 1`.
    pub fraction_contractive: f64,
    pub mean_ratio: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

fn norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

/// Probes `f` on `n_pairs` draws: each pair picks an edge sample (cycling
/// through `edges`) and a fresh Gaussian perturbation of scale `sigma`.
pub fn contraction_probe<F>(
    f: F,
    edges: &[Tensor<f32>],
    sigma: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<ContractionReport>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    const OP: &str = "contraction_probe";
    if edges.is_empty() {
        return Err(Error::Metrics(format!("{OP}: no edge samples given")));
    }
    if n_pairs == 0 {
        return Err(Error::Metrics(format!("{OP}: n_pairs must be >= 1")));
    }
    if sigma <= 0.0 {
        return Err(Error::Metrics(format!("{OP}: sigma must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(n_pairs);
    for pair in 0..n_pairs {
        let x = &edges[pair % edges.len()];
        let h: Vec<f32> = (0..x.len())
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                (g * sigma) as f32
            })
            .collect();
        let perturbed: Vec<f32> = x.data().iter().zip(&h).map(|(&a, &b)| a + b).collect();
        let x_pert = Tensor::from_vec(x.shape().to_vec(), perturbed);
        let y0 = f(x)?;
        let y1 = f(&x_pert)?;
        let diff: Vec<f32> = y1
            .data()
            .iter()
            .zip(y0.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let h_norm = norm(&h);
        if h_norm == 0.0 {
            return Err(Error::Metrics(format!("{OP}: degenerate zero perturbation")));
        }
        let r = norm(&diff) / h_norm;
        if !r.is_finite() {
            return Err(Error::Metrics(format!("{OP}: non-finite ratio at pair {pair}")));
        }
        ratios.push(r);
    }
    let n = ratios.len() as f64;
    Ok(ContractionReport {
        sigma,
        n_pairs,
        seed,
        fraction_contractive: ratios.iter().filter(|&&r| r < 1.0).count() as f64 / n,
        mean_ratio: ratios.iter().sum::<f64>() / n,
        min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        max_ratio: ratios.iter().copied().fold(0.0, f64::max),
    })
}

/// Probe wrapper for a stage-2 generator in eval mode. When the spec
/// enables the stage-2 latent, one z2 is fixed from `seed` for the whole
/// probe so that `f` stays a deterministic function of its input.
pub fn contraction_probe_stage2(
    gen: &Stage2Generator<f32>,
    spec: &ModelSpec,
    edges: &[Tensor<f32>],
    sigma: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<ContractionReport> {
    let z2 = spec.stage2_latent_enabled.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
        LatentVector::sample(1, spec.latent_dim, &mut rng)
    });
    contraction_probe(
        |x| gen.forward(x, z2.as_ref(), &mut Phase::Eval),
        edges,
        sigma,
        n_pairs,
        seed,
    )
}
