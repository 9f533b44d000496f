//! Layer building blocks: convolutions and normalizations bundling their
//! parameters, with DCGAN-style initialization.

use std::cell::RefCell;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ndtensor::{self, NormMode, Real, Tensor};

use super::{NamedBuffers, NamedParams};

pub(crate) fn normal_vec<T: Real>(rng: &mut ChaCha8Rng, len: usize, mean: f64, std: f64) -> Vec<T> {
    let dist = Normal::new(mean, std).expect("valid normal");
    (0..len).map(|_| T::of(dist.sample(rng))).collect()
}

const INIT_STD: f64 = 0.02;

pub(crate) struct Conv2dLayer<T: Real> {
    pub weight: Tensor<T>, // O×I×K×K
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2dLayer<T> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Conv2dLayer {
            weight: Tensor::param(
                vec![cout, cin, k, k],
                normal_vec(rng, cout * cin * k * k, 0.0, INIT_STD),
            ),
            bias: bias.then(|| Tensor::param(vec![cout], vec![T::zero(); cout])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ndtensor::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub(crate) struct ConvTranspose2dLayer<T: Real> {
    pub weight: Tensor<T>, // I×O×K×K
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvTranspose2dLayer<T> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        ConvTranspose2dLayer {
            weight: Tensor::param(
                vec![cin, cout, k, k],
                normal_vec(rng, cin * cout * k * k, 0.0, INIT_STD),
            ),
            bias: bias.then(|| Tensor::param(vec![cout], vec![T::zero(); cout])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ndtensor::conv_transpose2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub(crate) struct BatchNorm2d<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Rc<RefCell<Vec<T>>>,
    pub running_var: Rc<RefCell<Vec<T>>>,
}

impl<T: Real> BatchNorm2d<T> {
    const MOMENTUM: f64 = 0.1;
    const EPS: f64 = 1e-5;

    pub fn init(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(vec![channels], normal_vec(rng, channels, 1.0, INIT_STD)),
            beta: Tensor::param(vec![channels], vec![T::zero(); channels]),
            running_mean: Rc::new(RefCell::new(vec![T::zero(); channels])),
            running_var: Rc::new(RefCell::new(vec![T::one(); channels])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        ndtensor::batch_norm2d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            Self::MOMENTUM,
            Self::EPS,
            mode,
        )
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut NamedBuffers<T>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

pub(crate) struct InstanceNorm2d<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> InstanceNorm2d<T> {
    const EPS: f64 = 1e-5;

    pub fn init(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        InstanceNorm2d {
            gamma: Tensor::param(vec![channels], normal_vec(rng, channels, 1.0, INIT_STD)),
            beta: Tensor::param(vec![channels], vec![T::zero(); channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ndtensor::instance_norm2d(x, &self.gamma, &self.beta, Self::EPS)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}
