//! Learned image embedding: a small convolutional autoencoder trained on a
//! manifest split; the encoder output is the embedding the Fréchet distance
//! runs over.
//!
//! This is a desk-scale stand-in for a large pretrained embedding network,
//! so absolute scores are comparable only within one embedder fingerprint.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::imageops::{load_image, to_model_range, ImageBuffer};
use crate::models::layers::{Conv2dLayer, ConvTranspose2dLayer};
use crate::models::NamedParams;
use crate::ndtensor::{self, Adam, Tensor};
use crate::training::Checkpoint;

use super::frechet::GaussianStats;
use super::{gaussian_stats, StreamingStats};

/// Which derived image feeds the embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Gray,
    Edge,
}

impl ImageKind {
    pub(crate) fn path<'a>(&self, rec: &'a crate::dataset::ManifestRecord) -> &'a str {
        match self {
            ImageKind::Gray => &rec.gray_path,
            ImageKind::Edge => &rec.edge_path,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderOptions {
    pub dim: usize,
    pub kind: ImageKind,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderOptions {
    fn default() -> Self {
        EmbedderOptions {
            dim: 64,
            kind: ImageKind::Gray,
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Reconstruction quality before and after fitting, both measured on the
/// held-out eval split.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitReport {
    pub start_eval_l1: f64,
    pub final_eval_l1: f64,
}

const LEAKY: f64 = 0.2;

fn encoder_widths(image_side: u32) -> Vec<usize> {
    let halvings = (image_side as f64 / 4.0).log2() as usize;
    (0..halvings).map(|i| (16usize << i).min(64)).collect()
}

struct Encoder {
    convs: Vec<Conv2dLayer<f32>>,
    head: Conv2dLayer<f32>,
}

impl Encoder {
    fn init(rng: &mut ChaCha8Rng, image_side: u32, dim: usize) -> Self {
        let widths = encoder_widths(image_side);
        let mut convs = Vec::new();
        let mut cin = 1;
        for &w in &widths {
            convs.push(Conv2dLayer::init(rng, cin, w, 4, 2, 1, false));
            cin = w;
        }
        let head = Conv2dLayer::init(rng, cin, dim, 4, 1, 0, true);
        Encoder { convs, head }
    }

    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = ndtensor::leaky_relu(&conv.forward(&h)?, LEAKY);
        }
        let code = self.head.forward(&h)?;
        let n = code.shape()[0];
        let d = code.shape()[1];
        ndtensor::reshape(&code, vec![n, d])
    }

    fn named_params(&self) -> NamedParams<f32> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("encoder.conv{i}"), &mut out);
        }
        self.head.collect("encoder.head", &mut out);
        out
    }
}

struct Decoder {
    head: ConvTranspose2dLayer<f32>,
    deconvs: Vec<ConvTranspose2dLayer<f32>>,
}

impl Decoder {
    fn init(rng: &mut ChaCha8Rng, image_side: u32, dim: usize) -> Self {
        let mut widths = encoder_widths(image_side);
        widths.reverse();
        let head = ConvTranspose2dLayer::init(rng, dim, widths[0], 4, 1, 0, true);
        let mut deconvs = Vec::new();
        for i in 0..widths.len() {
            let cout = if i + 1 < widths.len() { widths[i + 1] } else { 1 };
            deconvs.push(ConvTranspose2dLayer::init(rng, widths[i], cout, 4, 2, 1, true));
        }
        Decoder { head, deconvs }
    }

    fn forward(&self, code: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = code.shape()[0];
        let d = code.shape()[1];
        let mut h = ndtensor::relu(&self.head.forward(&ndtensor::reshape(code, vec![n, d, 1, 1])?)?);
        for (i, deconv) in self.deconvs.iter().enumerate() {
            let y = deconv.forward(&h)?;
            h = if i + 1 < self.deconvs.len() {
                ndtensor::relu(&y)
            } else {
                ndtensor::tanh(&y)
            };
        }
        Ok(h)
    }

    fn named_params(&self) -> NamedParams<f32> {
        let mut out = Vec::new();
        self.head.collect("decoder.head", &mut out);
        for (i, d) in self.deconvs.iter().enumerate() {
            d.collect(&format!("decoder.deconv{i}"), &mut out);
        }
        out
    }
}

/// Deterministic image-set embedder. For a fixed checkpoint, embedding the
/// same image always returns the same vector.
pub struct Embedder {
    encoder: Encoder,
    pub dim: usize,
    pub image_side: u32,
    pub kind: ImageKind,
    /// SHA-256 over the encoder parameter bytes; identifies the embedding
    /// space a score was computed in.
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct EmbedderMeta {
    role: String,
    dim: usize,
    image_side: u32,
    kind: ImageKind,
    fingerprint: String,
}

const EMBEDDER_ROLE: &str = "embedder";

impl Embedder {
    fn fingerprint_of(encoder: &Encoder) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in encoder.named_params() {
            hasher.update(name.as_bytes());
            for v in t.data().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Embeds one image (must match the embedder's side, single-channel).
    pub fn embed_image(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        if img.channels() != 1
            || img.width() != self.image_side
            || img.height() != self.image_side
        {
            return Err(Error::Metrics(format!(
                "embedder expects {side}x{side} single-channel images, got {}x{}x{}",
                img.width(),
                img.height(),
                img.channels(),
                side = self.image_side
            )));
        }
        let x = to_model_range(img);
        let code = self.encoder.forward(&x)?;
        let out = code.data().iter().map(|&v| v as f64).collect();
        Ok(out)
    }

    pub fn embed_set(&self, imgs: &[ImageBuffer]) -> Result<Vec<Vec<f64>>> {
        imgs.iter().map(|img| self.embed_image(img)).collect()
    }

    /// Gaussian summary of an image set, accumulated in streaming form with
    /// a deterministic (input) order.
    pub fn stats_of(&self, imgs: &[ImageBuffer]) -> Result<GaussianStats> {
        let mut acc = StreamingStats::new(self.dim);
        for img in imgs {
            acc.push(&self.embed_image(img)?);
        }
        acc.finalize()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = EmbedderMeta {
            role: EMBEDDER_ROLE.into(),
            dim: self.dim,
            image_side: self.image_side,
            kind: self.kind,
            fingerprint: self.fingerprint.clone(),
        };
        let mut ckpt = Checkpoint::new(&meta)?;
        crate::training::push_params(&mut ckpt, &self.encoder.named_params());
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let meta: EmbedderMeta = ckpt.meta_as()?;
        if meta.role != EMBEDDER_ROLE {
            return Err(Error::Checkpoint(format!(
                "expected an {EMBEDDER_ROLE} checkpoint, found role {:?}",
                meta.role
            )));
        }
        let mut throwaway = ChaCha8Rng::seed_from_u64(0);
        let encoder = Encoder::init(&mut throwaway, meta.image_side, meta.dim);
        let mut consumed = HashSet::new();
        crate::training::restore_params(&ckpt, &encoder.named_params(), &mut consumed)?;
        let embedder = Embedder {
            encoder,
            dim: meta.dim,
            image_side: meta.image_side,
            kind: meta.kind,
            fingerprint: meta.fingerprint.clone(),
        };
        let actual = Embedder::fingerprint_of(&embedder.encoder);
        if actual != meta.fingerprint {
            return Err(Error::Checkpoint(
                "embedder fingerprint does not match its parameters".into(),
            ));
        }
        Ok(embedder)
    }
}

fn load_split_images(
    manifest: &DatasetManifest,
    split: Split,
    kind: ImageKind,
) -> Result<Vec<ImageBuffer>> {
    manifest
        .records_for(split)
        .iter()
        .map(|rec| load_image(&manifest.resolve(kind.path(rec))))
        .collect()
}

fn batch_tensor(images: &[ImageBuffer], indices: &[usize], side: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(indices.len() * side * side);
    for &i in indices {
        data.extend_from_slice(&to_model_range(&images[i]).data());
    }
    Tensor::from_vec(vec![indices.len(), 1, side, side], data)
}

fn eval_reconstruction_l1(
    encoder: &Encoder,
    decoder: &Decoder,
    images: &[ImageBuffer],
    side: usize,
) -> Result<f64> {
    let mut total = 0.0f64;
    for img in images {
        let x = batch_tensor(std::slice::from_ref(img), &[0], side);
        let recon = decoder.forward(&encoder.forward(&x)?)?;
        total += ndtensor::l1_loss(&recon, &x)?.item() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Trains the autoencoder on the manifest's train split and returns the
/// encoder as an [`Embedder`], plus held-out reconstruction numbers.
pub fn fit_embedder(
    manifest: &DatasetManifest,
    opts: &EmbedderOptions,
) -> Result<(Embedder, FitReport)> {
    if opts.dim == 0 || opts.batch_size == 0 || opts.steps == 0 {
        return Err(Error::Metrics(
            "embedder dim, batch_size, and steps must be positive".into(),
        ));
    }
    let side = manifest.image_side;
    let train = load_split_images(manifest, Split::Train, opts.kind)?;
    let eval = load_split_images(manifest, Split::Eval, opts.kind)?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Metrics(
            "embedder training needs non-empty train and eval splits".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let encoder = Encoder::init(&mut rng, side, opts.dim);
    let decoder = Decoder::init(&mut rng, side, opts.dim);
    let params: Vec<Tensor<f32>> = encoder
        .named_params()
        .into_iter()
        .chain(decoder.named_params())
        .map(|(_, t)| t)
        .collect();
    let mut opt = Adam::new(&params, opts.lr, 0.5, 0.999);

    let start_eval_l1 = eval_reconstruction_l1(&encoder, &decoder, &eval, side as usize)?;
    for _ in 0..opts.steps {
        let indices: Vec<usize> =
            (0..opts.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let x = batch_tensor(&train, &indices, side as usize);
        let recon = decoder.forward(&encoder.forward(&x)?)?;
        let loss = ndtensor::l1_loss(&recon, &x)?;
        if !loss.item().is_finite() {
            return Err(Error::Metrics("embedder training diverged".into()));
        }
        loss.backward();
        opt.step(&params);
    }
    let final_eval_l1 = eval_reconstruction_l1(&encoder, &decoder, &eval, side as usize)?;

    let fingerprint = Embedder::fingerprint_of(&encoder);
    Ok((
        Embedder {
            encoder,
            dim: opts.dim,
            image_side: side,
            kind: opts.kind,
            fingerprint,
        },
        FitReport {
            start_eval_l1,
            final_eval_l1,
        },
    ))
}

/// Embeds every image of one manifest split; used to build the reference
/// stats for evaluation.
pub(crate) fn split_stats(
    manifest: &DatasetManifest,
    split: Split,
    kind: ImageKind,
    embedder: &Embedder,
) -> Result<GaussianStats> {
    let imgs = load_split_images(manifest, split, kind)?;
    gaussian_stats(&embedder.embed_set(&imgs)?)
}
