//! Differentiable building blocks: frequency embeddings, MLPs, the 2-D image
//! feature extractor, the 3-D U-Net volume encoder, and multi-head attention
//! over the sample-point axis.
//!
//! Blocks are lightweight descriptors (names + dims). Parameters live in a
//! [`ParameterStore`]; a forward pass binds the store onto a tape once and
//! blocks look their weights up by name.

mod attention;
mod embedding;
mod extractor;
mod mlp;
mod unet;

pub mod params;

#[cfg(test)]
mod tests;

pub use attention::{multi_head_attention, AttentionConfig, MultiHeadAttention};
pub use embedding::{embed_batch, frequency_embed, frequency_embed_values, FrequencyEmbeddingSpec};
pub use extractor::FeatureExtractor2d;
pub use mlp::{Activation, Mlp, MlpSpec};
pub use params::{BoundParams, ParameterStore};
pub use unet::Unet3d;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::tensor::Scalar;

/// Kaiming-uniform fan-in initialization (ReLU gain).
pub fn kaiming_uniform<F: Scalar, R: Rng>(rng: &mut R, fan_in: usize, shape: &[usize]) -> ArrayD<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound)
    })
}

/// Xavier-uniform initialization, used for attention projections.
pub fn xavier_uniform<F: Scalar, R: Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> ArrayD<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound)
    })
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::ones(IxDyn(shape))
}

/// A plain convolution layer descriptor (used by the extractor and U-Net).
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    fn w_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init2d<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        store.insert(
            self.w_name(),
            kaiming_uniform(rng, fan_in, &[self.out_ch, self.in_ch, self.kernel, self.kernel]),
        );
        store.insert(self.b_name(), zeros(&[self.out_ch]));
    }

    pub fn init3d<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) {
        let fan_in = self.in_ch * self.kernel.pow(3);
        store.insert(
            self.w_name(),
            kaiming_uniform(
                rng,
                fan_in,
                &[self.out_ch, self.in_ch, self.kernel, self.kernel, self.kernel],
            ),
        );
        store.insert(self.b_name(), zeros(&[self.out_ch]));
    }

    pub fn forward2d<F: Scalar>(
        &self,
        tape: &mut crate::tensor::Tape<F>,
        bound: &BoundParams,
        x: crate::tensor::Var,
    ) -> crate::tensor::Var {
        let w = bound.get(&self.w_name());
        let b = bound.get(&self.b_name());
        tape.conv2d(x, w, b, self.stride, self.kernel / 2)
    }

    pub fn forward3d<F: Scalar>(
        &self,
        tape: &mut crate::tensor::Tape<F>,
        bound: &BoundParams,
        x: crate::tensor::Var,
    ) -> crate::tensor::Var {
        let w = bound.get(&self.w_name());
        let b = bound.get(&self.b_name());
        tape.conv3d(x, w, b, self.stride, self.kernel / 2)
    }
}

/// Per-channel instance normalization descriptor.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub name: String,
    pub channels: usize,
}

impl InstanceNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        InstanceNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParameterStore<F>) {
        store.insert(format!("{}.gamma", self.name), ones(&[self.channels]));
        store.insert(format!("{}.beta", self.name), zeros(&[self.channels]));
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut crate::tensor::Tape<F>,
        bound: &BoundParams,
        x: crate::tensor::Var,
    ) -> crate::tensor::Var {
        let gamma = bound.get(&format!("{}.gamma", self.name));
        let beta = bound.get(&format!("{}.beta", self.name));
        tape.instance_norm(x, gamma, beta, F::from_f64(1e-5))
    }
}
