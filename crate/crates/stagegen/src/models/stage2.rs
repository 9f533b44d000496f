//! Stage 2: conditional residual generator (edges → grayscale) and its
//! conditional discriminator.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{self, Real, Tensor};

use super::layers::{Conv2dLayer, ConvTranspose2dLayer, InstanceNorm2d};
use super::stage1::ConvStack;
use super::{LatentVector, ModelSpec, NamedBuffers, NamedParams, Phase};

/// Two 3×3 reflect-padded convs with instance norm, relu after the first,
/// optional dropout between them, and an additive skip.
struct ResBlock<T: Real> {
    conv1: Conv2dLayer<T>,
    norm1: InstanceNorm2d<T>,
    conv2: Conv2dLayer<T>,
    norm2: InstanceNorm2d<T>,
    dropout_rate: Option<f64>,
}

impl<T: Real> ResBlock<T> {
    fn init(rng: &mut ChaCha8Rng, channels: usize, dropout_rate: Option<f64>) -> Self {
        ResBlock {
            conv1: Conv2dLayer::init(rng, channels, channels, 3, 1, 0, false),
            norm1: InstanceNorm2d::init(rng, channels),
            conv2: Conv2dLayer::init(rng, channels, channels, 3, 1, 0, false),
            norm2: InstanceNorm2d::init(rng, channels),
            dropout_rate,
        }
    }

    fn forward(&self, x: &Tensor<T>, phase: &mut Phase) -> Result<Tensor<T>> {
        let mut h = ndtensor::relu(
            &self
                .norm1
                .forward(&self.conv1.forward(&ndtensor::reflect_pad2d(x, 1)?)?)?,
        );
        if let (Some(rate), Phase::Train { rng }) = (self.dropout_rate, &mut *phase) {
            h = ndtensor::dropout(&h, rate, rng)?;
        }
        h = self
            .norm2
            .forward(&self.conv2.forward(&ndtensor::reflect_pad2d(&h, 1)?)?)?;
        ndtensor::add(x, &h)
    }

    fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.norm1.collect(&format!("{prefix}.norm1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.norm2.collect(&format!("{prefix}.norm2"), out);
    }
}

/// Residual translation network: 7×7 reflect-padded stem, two stride-2
/// downsampling convs, `resnet_blocks` residual blocks, two stride-2
/// transposed convs, and a 7×7 head with tanh. When the spec enables a
/// stage-2 latent, it is mapped by a 1×1 conv and added at the bottleneck.
pub struct Stage2Generator<T: Real = f32> {
    image_side: u32,
    latent_dim: usize,
    stem: Conv2dLayer<T>,
    stem_norm: InstanceNorm2d<T>,
    down: Vec<(Conv2dLayer<T>, InstanceNorm2d<T>)>,
    latent_proj: Option<ConvTranspose2dLayer<T>>,
    blocks: Vec<ResBlock<T>>,
    up: Vec<(ConvTranspose2dLayer<T>, InstanceNorm2d<T>)>,
    head: Conv2dLayer<T>,
}

impl<T: Real> Stage2Generator<T> {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let f = spec.base_feature_maps_g;
        let stem = Conv2dLayer::init(rng, 1, f, 7, 1, 0, false);
        let stem_norm = InstanceNorm2d::init(rng, f);
        let down = vec![
            (
                Conv2dLayer::init(rng, f, 2 * f, 3, 2, 1, false),
                InstanceNorm2d::init(rng, 2 * f),
            ),
            (
                Conv2dLayer::init(rng, 2 * f, 4 * f, 3, 2, 1, false),
                InstanceNorm2d::init(rng, 4 * f),
            ),
        ];
        let latent_proj = spec
            .stage2_latent_enabled
            .then(|| ConvTranspose2dLayer::init(rng, spec.latent_dim, 4 * f, 1, 1, 0, true));
        let dropout = spec.dropout_enabled.then_some(spec.dropout_rate);
        let blocks = (0..spec.resnet_blocks)
            .map(|_| ResBlock::init(rng, 4 * f, dropout))
            .collect();
        let up = vec![
            (
                ConvTranspose2dLayer::init(rng, 4 * f, 2 * f, 4, 2, 1, false),
                InstanceNorm2d::init(rng, 2 * f),
            ),
            (
                ConvTranspose2dLayer::init(rng, 2 * f, f, 4, 2, 1, false),
                InstanceNorm2d::init(rng, f),
            ),
        ];
        let head = Conv2dLayer::init(rng, f, 1, 7, 1, 0, true);
        Ok(Stage2Generator {
            image_side: spec.image_side,
            latent_dim: spec.latent_dim,
            stem,
            stem_norm,
            down,
            latent_proj,
            blocks,
            up,
            head,
        })
    }

    /// `edge` is `N×1×side×side`; `z2` is required exactly when the spec
    /// enables the stage-2 latent. Output matches the input shape.
    pub fn forward(
        &self,
        edge: &Tensor<T>,
        z2: Option<&LatentVector<T>>,
        phase: &mut Phase,
    ) -> Result<Tensor<T>> {
        const OP: &str = "stage2_generator";
        let s = edge.shape();
        let side = self.image_side as usize;
        if s.len() != 4 || s[1] != 1 || s[2] != side || s[3] != side {
            return Err(Error::shape(
                OP,
                format!("expected Nx1x{side}x{side}, got {s:?}"),
            ));
        }
        let mut x = ndtensor::relu(
            &self
                .stem_norm
                .forward(&self.stem.forward(&ndtensor::reflect_pad2d(edge, 3)?)?)?,
        );
        for (conv, norm) in &self.down {
            x = ndtensor::relu(&norm.forward(&conv.forward(&x)?)?);
        }
        match (&self.latent_proj, z2) {
            (Some(proj), Some(z)) => {
                if z.dim() != self.latent_dim {
                    return Err(Error::shape(
                        OP,
                        format!("z2 length {} != configured {}", z.dim(), self.latent_dim),
                    ));
                }
                if z.batch() != s[0] {
                    return Err(Error::shape(
                        OP,
                        format!("z2 batch {} != edge batch {}", z.batch(), s[0]),
                    ));
                }
                let zz = ndtensor::reshape(&z.0, vec![s[0], self.latent_dim, 1, 1])?;
                let bias = proj.forward(&zz)?;
                x = ndtensor::broadcast_add_channels(&x, &bias)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::invalid(OP, "stage-2 latent is enabled but no z2 was given"))
            }
            (None, Some(_)) => {
                return Err(Error::invalid(OP, "z2 given but the stage-2 latent is disabled"))
            }
        }
        for block in &self.blocks {
            x = block.forward(&x, phase)?;
        }
        for (up, norm) in &self.up {
            x = ndtensor::relu(&norm.forward(&up.forward(&x)?)?);
        }
        Ok(ndtensor::tanh(
            &self.head.forward(&ndtensor::reflect_pad2d(&x, 3)?)?,
        ))
    }

    pub fn named_params(&self, prefix: &str) -> NamedParams<T> {
        let mut out = Vec::new();
        self.stem.collect(&format!("{prefix}.stem"), &mut out);
        self.stem_norm.collect(&format!("{prefix}.stem.norm"), &mut out);
        for (i, (conv, norm)) in self.down.iter().enumerate() {
            conv.collect(&format!("{prefix}.down{i}"), &mut out);
            norm.collect(&format!("{prefix}.down{i}.norm"), &mut out);
        }
        if let Some(proj) = &self.latent_proj {
            proj.collect(&format!("{prefix}.latent_proj"), &mut out);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect(&format!("{prefix}.res{i}"), &mut out);
        }
        for (i, (up, norm)) in self.up.iter().enumerate() {
            up.collect(&format!("{prefix}.up{i}"), &mut out);
            norm.collect(&format!("{prefix}.up{i}.norm"), &mut out);
        }
        self.head.collect(&format!("{prefix}.head"), &mut out);
        out
    }

    pub fn named_buffers(&self, _prefix: &str) -> NamedBuffers<T> {
        Vec::new() // instance norm keeps no running stats
    }

    pub fn param_count(&self) -> usize {
        self.named_params("g").iter().map(|(_, t)| t.len()).sum()
    }
}

/// Conditional adversary: edge and grayscale concatenated by channel, then a
/// stage-1-style conv stack to one logit.
pub struct Stage2Discriminator<T: Real = f32> {
    stack: ConvStack<T>,
    image_side: u32,
}

impl<T: Real> Stage2Discriminator<T> {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Stage2Discriminator {
            stack: ConvStack::init(spec, 2, rng)?,
            image_side: spec.image_side,
        })
    }

    pub fn forward(&self, edge: &Tensor<T>, gray: &Tensor<T>, phase: &mut Phase) -> Result<Tensor<T>> {
        const OP: &str = "stage2_discriminator";
        let side = self.image_side as usize;
        for (name, t) in [("edge", edge), ("gray", gray)] {
            let s = t.shape();
            if s.len() != 4 || s[1] != 1 || s[2] != side || s[3] != side {
                return Err(Error::shape(
                    OP,
                    format!("{name} must be Nx1x{side}x{side}, got {s:?}"),
                ));
            }
        }
        let joint = ndtensor::concat_channels(edge, gray)?;
        self.stack.forward(&joint, phase)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::randn_tensor;
    use rand::SeedableRng;

    #[test]
    fn zeroed_second_conv_makes_resblock_an_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block: ResBlock<f32> = ResBlock::init(&mut rng, 4, None);
        for v in block.conv2.weight.data_mut().iter_mut() {
            *v = 0.0;
        }
        let x = randn_tensor::<f32>(&[2, 4, 6, 6], 8);
        let y = block.forward(&x, &mut Phase::Eval).unwrap();
        // conv2 ≡ 0 makes the residual branch collapse to beta (= 0 at
        // init), so the block reduces to the skip path.
        assert_eq!(y.to_vec(), x.to_vec());
    }
}
