//! End-to-end stack composition and the dataset-subset comparison
//! experiment.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::imageops::{load_image, ImageBuffer};
use crate::metrics::{fid_score, fit_embedder, Embedder, EmbedderOptions, ImageKind};
use crate::models::{LatentVector, ModelSpec, Phase, Stage1Generator, Stage2Generator};
use crate::ndtensor::Tensor;
use crate::training::{tensor_slice_to_image, train_stage1, TrainConfig};

/// Runs noise → edges → grayscale in eval mode, returning both
/// intermediates so each stage can be scored separately. Neither network is
/// mutated (eval mode leaves normalization statistics untouched).
pub fn run_stack(
    g1: &Stage1Generator<f32>,
    spec1: &ModelSpec,
    g2: &Stage2Generator<f32>,
    spec2: &ModelSpec,
    z: &LatentVector<f32>,
    z2: Option<&LatentVector<f32>>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if spec1.image_side != spec2.image_side {
        return Err(Error::invalid(
            "run_stack",
            format!(
                "stage-1 side {} != stage-2 side {}",
                spec1.image_side, spec2.image_side
            ),
        ));
    }
    run_stack_fn(g1, z, |edge| g2.forward(edge, z2, &mut Phase::Eval))
}

/// [`run_stack`] with an arbitrary second stage; lets tests substitute
/// pass-through or constant doubles for the conditional generator.
pub fn run_stack_fn<F>(
    g1: &Stage1Generator<f32>,
    z: &LatentVector<f32>,
    stage2: F,
) -> Result<(Tensor<f32>, Tensor<f32>)>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    let edge = g1.forward(z, &mut Phase::Eval)?.detach();
    let gray = stage2(&edge)?;
    Ok((edge, gray))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetRow {
    pub fraction: f64,
    pub n_train: usize,
    pub fid: f64,
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetReport {
    pub rows: Vec<SubsetRow>,
    pub n_real_reference: usize,
    pub n_generated: usize,
    pub embedder_fingerprint: String,
    /// Experimental-design note: fractions share one seed and one step
    /// budget, so runs differ only in training-data variety.
    pub design: String,
}

impl SubsetReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {parent:?}"), e))?;
        }
        std::fs::write(path, self.to_json()?)
            .map_err(|e| Error::io(format!("writing {path:?}"), e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetOptions {
    pub fractions: Vec<f64>,
    /// Stage-1 step budget applied identically to every fraction.
    pub train_budget: u64,
    pub seed: u64,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    /// Generated edge samples scored per fraction.
    pub n_generated: usize,
    pub eps_reg: f64,
    pub embedder: EmbedderOptions,
}

/// Picks a seeded random subset of the train split, keeping manifest order.
fn subset_manifest(manifest: &DatasetManifest, fraction: f64, seed: u64) -> DatasetManifest {
    let mut subset = manifest.clone();
    if fraction >= 1.0 {
        return subset;
    }
    let train_ids: Vec<&str> = manifest
        .records_for(Split::Train)
        .iter()
        .map(|r| r.id.as_str())
        .collect();
    let take = ((train_ids.len() as f64 * fraction).round() as usize).max(1);
    let mut shuffled = train_ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED);
    shuffled.shuffle(&mut rng);
    let keep: std::collections::HashSet<String> =
        shuffled.into_iter().take(take).map(str::to_owned).collect();
    subset
        .records
        .retain(|r| r.split != Split::Train || keep.contains(&r.id));
    subset
}

/// Edge images generated by a trained stage-1 generator, decoded to 8-bit.
pub fn generated_edge_images(
    gen: &Stage1Generator<f32>,
    spec: &ModelSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<ImageBuffer>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let chunk = 32usize;
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(chunk);
        let z = LatentVector::sample(take, spec.latent_dim, &mut rng);
        let edges = gen.forward(&z, &mut Phase::Eval)?;
        for i in 0..take {
            out.push(tensor_slice_to_image(&edges, i)?);
        }
        remaining -= take;
    }
    Ok(out)
}

fn real_edge_images(manifest: &DatasetManifest) -> Result<Vec<ImageBuffer>> {
    manifest
        .records
        .iter()
        .map(|rec| load_image(&manifest.resolve(&rec.edge_path)))
        .collect()
}

/// Trains stage 1 once per fraction under an identical step budget and
/// seed, then scores each trained generator's edge samples against the full
/// real edge set with one shared embedder. Whether smaller fractions score
/// worse is reported, not asserted.
pub fn subset_experiment(
    manifest: &DatasetManifest,
    opts: &SubsetOptions,
    embedder: Option<&Embedder>,
) -> Result<SubsetReport> {
    if opts.fractions.is_empty() {
        return Err(Error::invalid("subset_experiment", "no fractions given"));
    }
    for &f in &opts.fractions {
        if !(0.0 < f && f <= 1.0) {
            return Err(Error::invalid(
                "subset_experiment",
                format!("fraction {f} outside (0, 1]"),
            ));
        }
    }

    let fitted;
    let embedder = match embedder {
        Some(e) => e,
        None => {
            let (e, _) = fit_embedder(manifest, &opts.embedder)?;
            fitted = e;
            &fitted
        }
    };
    let reference = real_edge_images(manifest)?;

    let mut rows = Vec::new();
    for &fraction in &opts.fractions {
        let sub = subset_manifest(manifest, fraction, opts.seed);
        let n_train = sub.records_for(Split::Train).len();
        let config = TrainConfig {
            seed: opts.seed,
            epochs: u32::MAX,
            max_steps: Some(opts.train_budget),
            ..opts.train.clone()
        };
        let (session, _log) = train_stage1(opts.spec.clone(), config, &sub, None)?;
        let fakes =
            generated_edge_images(&session.gen, &opts.spec, opts.n_generated, opts.seed ^ 0xFACE)?;
        let report = fid_score(embedder, &reference, &fakes, opts.eps_reg)?;
        rows.push(SubsetRow {
            fraction,
            n_train,
            fid: report.fid,
            seed: opts.seed,
            steps: session.step,
        });
    }
    Ok(SubsetReport {
        rows,
        n_real_reference: reference.len(),
        n_generated: opts.n_generated,
        embedder_fingerprint: embedder.fingerprint.clone(),
        design: "equal step budget and seed per fraction; only training data varies".into(),
    })
}
