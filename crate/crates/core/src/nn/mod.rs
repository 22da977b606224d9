//! Transformer building blocks shared by the generator and discriminator.

mod attention;
mod block;
mod upsample;

pub use attention::{attention_weights, multi_head_self_attention, AttentionMask, AttentionRoute, Window};
pub use block::{encoder_block, EncoderBlockParams, LN_EPS};
pub use upsample::{pixelshuffle_index, pixelshuffle_upsample, positional_embedding_add, TokenGrid};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Anything that owns named trainable tensors.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// `(name, tensor)` pairs in a stable order.
    fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A copy of `module` whose parameters are constants sharing the same data.
pub fn frozen<T: Scalar, M: Module<T> + Clone>(module: &M) -> M {
    let mut m = module.clone();
    m.visit_mut("", &mut |_, t| *t = t.detach());
    m
}

/// Normal(0, std) truncated to ±2·std, the usual transformer weight init.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
        .collect();
    Tensor::param(data, shape)
}

pub const INIT_STD: f64 = 0.02;

/// `y = x·W + b` on `[rows, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            weight: trunc_normal(rng, &[input, output], INIT_STD)?,
            bias: Tensor::param(vec![T::zero(); output], &[output])?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, Some(&self.bias))
    }

    /// Applies the layer to the last axis of an arbitrary-rank input.
    pub fn forward_tokens(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        let input = *shape.last().unwrap_or(&0);
        let rows = x.numel() / input.max(1);
        let y = self.forward(&x.reshape(&[rows, input])?)?;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().expect("rank >= 1") = self.output_dim();
        y.reshape(&out_shape)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::param(vec![T::one(); dim], &[dim])?,
            beta: Tensor::param(vec![T::zero(); dim], &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm(&self.gamma, &self.beta, LN_EPS)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
