//! The four networks of the stack: stage-1 generator/discriminator
//! (noise → edges) and stage-2 conditional generator/discriminator
//! (edges → grayscale).
//!
//! Parameter sets are immutable during forward passes; the optimizer updates
//! them between passes on the training thread.

pub(crate) mod layers;
mod stage1;
mod stage2;

use std::cell::RefCell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{NormMode, Real, Tensor};

pub use stage1::{Stage1Discriminator, Stage1Generator};
pub use stage2::{Stage2Discriminator, Stage2Generator};

/// Architecture hyperparameters shared by all four networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Output side length; a power of two, at least 32.
    pub image_side: u32,
    pub latent_dim: usize,
    pub base_feature_maps_g: usize,
    pub base_feature_maps_d: usize,
    /// Divides every discriminator channel width.
    pub disc_reduction_factor: usize,
    pub resnet_blocks: usize,
    pub dropout_enabled: bool,
    pub dropout_rate: f64,
    /// When set, the stage-2 generator accepts its own latent vector,
    /// injected at the bottleneck.
    pub stage2_latent_enabled: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::for_side(64)
    }
}

impl ModelSpec {
    /// Defaults scaled to the image side: 64 base feature maps at side 128,
    /// halving with the side down to a floor of 8.
    pub fn for_side(image_side: u32) -> Self {
        let base = ((image_side / 2) as usize).max(8);
        ModelSpec {
            image_side,
            latent_dim: 100,
            base_feature_maps_g: base,
            base_feature_maps_d: base,
            disc_reduction_factor: 4,
            resnet_blocks: 6,
            dropout_enabled: false,
            dropout_rate: 0.5,
            stage2_latent_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ModelSpec";
        if self.image_side < 32 || !self.image_side.is_power_of_two() {
            return Err(Error::invalid(
                OP,
                format!("image_side {} must be a power of two >= 32", self.image_side),
            ));
        }
        if self.disc_reduction_factor < 1 {
            return Err(Error::invalid(OP, "disc_reduction_factor must be >= 1"));
        }
        if self.resnet_blocks < 1 {
            return Err(Error::invalid(OP, "resnet_blocks must be >= 1"));
        }
        if self.latent_dim < 1 {
            return Err(Error::invalid(OP, "latent_dim must be >= 1"));
        }
        if self.base_feature_maps_g < 1 || self.base_feature_maps_d < 1 {
            return Err(Error::invalid(OP, "base feature maps must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(OP, "dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Number of spatial doublings between the 4×4 seed map and the output.
    pub(crate) fn upsample_steps(&self) -> usize {
        (self.image_side as f64 / 4.0).log2() as usize
    }
}

/// Forward-pass phase. Train mode uses batch statistics, updates running
/// stats, and applies dropout (drawing from the carried rng); eval mode
/// replays stored statistics and is deterministic.
pub enum Phase<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Phase<'_> {
    pub(crate) fn norm_mode(&self) -> NormMode {
        match self {
            Phase::Train { .. } => NormMode::Train,
            Phase::Eval => NormMode::Eval,
        }
    }
}

/// Latent input: `N×L`, i.i.d. standard normal from a seeded source.
#[derive(Debug, Clone)]
pub struct LatentVector<T: Real = f32>(pub Tensor<T>);

impl<T: Real> LatentVector<T> {
    pub fn sample(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let data: Vec<T> = (0..n * dim)
            .map(|_| T::of(StandardNormal.sample(rng)))
            .collect();
        LatentVector(Tensor::from_vec(vec![n, dim], data))
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Named parameter list of a network, in stable declaration order.
pub type NamedParams<T> = Vec<(String, Tensor<T>)>;
/// Named non-trainable buffers (normalization running statistics).
pub type NamedBuffers<T> = Vec<(String, Rc<RefCell<Vec<T>>>)>;

/// All four freshly initialized networks. Conv weights ~ N(0, 0.02²), norm
/// gammas ~ N(1, 0.02²), betas and biases zero; no tensor is shared.
pub struct Networks<T: Real = f32> {
    pub stage1_gen: Stage1Generator<T>,
    pub stage1_disc: Stage1Discriminator<T>,
    pub stage2_gen: Stage2Generator<T>,
    pub stage2_disc: Stage2Discriminator<T>,
}

pub fn init_params<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Networks<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Networks {
        stage1_gen: Stage1Generator::init(spec, &mut rng)?,
        stage1_disc: Stage1Discriminator::init(spec, &mut rng)?,
        stage2_gen: Stage2Generator::init(spec, &mut rng)?,
        stage2_disc: Stage2Discriminator::init(spec, &mut rng)?,
    })
}
