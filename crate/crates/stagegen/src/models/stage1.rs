//! Stage 1: DCGAN-style noise → edge-image generator and its discriminator.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{self, Real, Tensor};

use super::layers::{BatchNorm2d, Conv2dLayer, ConvTranspose2dLayer};
use super::{LatentVector, ModelSpec, NamedBuffers, NamedParams, Phase};

/// Transposed-conv stack: project the latent to an `8F×4×4` seed map, then
/// halve channels while doubling the spatial side up to `image_side`, and
/// finish with a transposed conv to one channel plus tanh.
pub struct Stage1Generator<T: Real = f32> {
    latent_dim: usize,
    project: ConvTranspose2dLayer<T>,
    project_bn: BatchNorm2d<T>,
    ups: Vec<(ConvTranspose2dLayer<T>, BatchNorm2d<T>)>,
    head: ConvTranspose2dLayer<T>,
}

fn generator_widths(spec: &ModelSpec) -> Vec<usize> {
    let steps = spec.upsample_steps();
    (0..steps)
        .map(|i| ((8 * spec.base_feature_maps_g) >> i).max(2))
        .collect()
}

impl<T: Real> Stage1Generator<T> {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let widths = generator_widths(spec);
        let project = ConvTranspose2dLayer::init(rng, spec.latent_dim, widths[0], 4, 1, 0, false);
        let project_bn = BatchNorm2d::init(rng, widths[0]);
        let mut ups = Vec::new();
        for w in widths.windows(2) {
            ups.push((
                ConvTranspose2dLayer::init(rng, w[0], w[1], 4, 2, 1, false),
                BatchNorm2d::init(rng, w[1]),
            ));
        }
        let head = ConvTranspose2dLayer::init(rng, *widths.last().unwrap(), 1, 4, 2, 1, true);
        Ok(Stage1Generator {
            latent_dim: spec.latent_dim,
            project,
            project_bn,
            ups,
            head,
        })
    }

    /// `z` is `N×latent_dim`; output is `N×1×side×side` inside `(−1, 1)`.
    pub fn forward(&self, z: &LatentVector<T>, phase: &mut Phase) -> Result<Tensor<T>> {
        if z.dim() != self.latent_dim {
            return Err(Error::shape(
                "stage1_generator",
                format!("latent length {} != configured {}", z.dim(), self.latent_dim),
            ));
        }
        let n = z.batch();
        let mode = phase.norm_mode();
        let mut x = ndtensor::reshape(&z.0, vec![n, self.latent_dim, 1, 1])?;
        x = ndtensor::relu(&self.project_bn.forward(&self.project.forward(&x)?, mode)?);
        for (up, bn) in &self.ups {
            x = ndtensor::relu(&bn.forward(&up.forward(&x)?, mode)?);
        }
        Ok(ndtensor::tanh(&self.head.forward(&x)?))
    }

    pub fn named_params(&self, prefix: &str) -> NamedParams<T> {
        let mut out = Vec::new();
        self.project.collect(&format!("{prefix}.project"), &mut out);
        self.project_bn.collect(&format!("{prefix}.project.bn"), &mut out);
        for (i, (up, bn)) in self.ups.iter().enumerate() {
            up.collect(&format!("{prefix}.up{i}"), &mut out);
            bn.collect(&format!("{prefix}.up{i}.bn"), &mut out);
        }
        self.head.collect(&format!("{prefix}.head"), &mut out);
        out
    }

    pub fn named_buffers(&self, prefix: &str) -> NamedBuffers<T> {
        let mut out = Vec::new();
        self.project_bn
            .collect_buffers(&format!("{prefix}.project.bn"), &mut out);
        for (i, (_, bn)) in self.ups.iter().enumerate() {
            bn.collect_buffers(&format!("{prefix}.up{i}.bn"), &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params("g").iter().map(|(_, t)| t.len()).sum()
    }
}

/// Shared discriminator trunk: strided convs with leaky-relu, batch norm on
/// every block except the first, then a 4×4 valid conv to a single logit.
/// Channel widths are the DCGAN ladder divided by the reduction factor.
pub(crate) struct ConvStack<T: Real> {
    first: Conv2dLayer<T>,
    blocks: Vec<(Conv2dLayer<T>, BatchNorm2d<T>)>,
    head: Conv2dLayer<T>,
}

const LEAKY_SLOPE: f64 = 0.2;

fn disc_widths(spec: &ModelSpec) -> Vec<usize> {
    let steps = spec.upsample_steps();
    (0..steps)
        .map(|i| ((spec.base_feature_maps_d << i) / spec.disc_reduction_factor).max(1))
        .collect()
}

impl<T: Real> ConvStack<T> {
    pub fn init(spec: &ModelSpec, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let widths = disc_widths(spec);
        let first = Conv2dLayer::init(rng, in_channels, widths[0], 4, 2, 1, false);
        let mut blocks = Vec::new();
        for w in widths.windows(2) {
            blocks.push((
                Conv2dLayer::init(rng, w[0], w[1], 4, 2, 1, false),
                BatchNorm2d::init(rng, w[1]),
            ));
        }
        let head = Conv2dLayer::init(rng, *widths.last().unwrap(), 1, 4, 1, 0, true);
        Ok(ConvStack { first, blocks, head })
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &mut Phase) -> Result<Tensor<T>> {
        let mode = phase.norm_mode();
        let mut h = ndtensor::leaky_relu(&self.first.forward(x)?, LEAKY_SLOPE);
        for (conv, bn) in &self.blocks {
            h = ndtensor::leaky_relu(&bn.forward(&conv.forward(&h)?, mode)?, LEAKY_SLOPE);
        }
        let logits = self.head.forward(&h)?;
        let n = logits.shape()[0];
        ndtensor::reshape(&logits, vec![n, 1])
    }

    pub fn named_params(&self, prefix: &str) -> NamedParams<T> {
        let mut out = Vec::new();
        self.first.collect(&format!("{prefix}.first"), &mut out);
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            conv.collect(&format!("{prefix}.block{i}"), &mut out);
            bn.collect(&format!("{prefix}.block{i}.bn"), &mut out);
        }
        self.head.collect(&format!("{prefix}.head"), &mut out);
        out
    }

    pub fn named_buffers(&self, prefix: &str) -> NamedBuffers<T> {
        let mut out = Vec::new();
        for (i, (_, bn)) in self.blocks.iter().enumerate() {
            bn.collect_buffers(&format!("{prefix}.block{i}.bn"), &mut out);
        }
        out
    }
}

/// Realness critic for edge images: `N×1×H×W` → logits `N×1` (no sigmoid;
/// pair with `bce_with_logits`).
pub struct Stage1Discriminator<T: Real = f32> {
    stack: ConvStack<T>,
    image_side: u32,
}

impl<T: Real> Stage1Discriminator<T> {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Stage1Discriminator {
            stack: ConvStack::init(spec, 1, rng)?,
            image_side: spec.image_side,
        })
    }

    pub fn forward(&self, img: &Tensor<T>, phase: &mut Phase) -> Result<Tensor<T>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.image_side as usize || s[3] != s[2] {
            return Err(Error::shape(
                "stage1_discriminator",
                format!("expected Nx1x{side}x{side}, got {s:?}", side = self.image_side),
            ));
        }
        self.stack.forward(img, phase)
    }

    pub fn named_params(&self, prefix: &str) -> NamedParams<T> {
        self.stack.named_params(prefix)
    }

    pub fn named_buffers(&self, prefix: &str) -> NamedBuffers<T> {
        self.stack.named_buffers(prefix)
    }

    pub fn param_count(&self) -> usize {
        self.named_params("d").iter().map(|(_, t)| t.len()).sum()
    }
}
