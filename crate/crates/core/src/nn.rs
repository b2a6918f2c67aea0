//! Named parameters and the two layer types everything else is built from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng;

/// A trainable tensor with its hierarchical checkpoint name.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.param(&self.name, &self.value)
    }
}

/// Anything holding parameters. Visiting order is fixed by the structure.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

impl<T: Module> Module for Option<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

/// He (Kaiming) normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut r = rng::named_stream(seed, name);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| normal.sample(&mut r)).collect()).expect("shape")
}

/// Xavier (Glorot) uniform initialization: `U(±sqrt(6 / (fan_in + fan_out)))`.
pub fn xavier_uniform(name: &str, shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng::named_stream(seed, name);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| r.random_range(-limit..=limit)).collect()).expect("shape")
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    /// He-initialized `size x size` convolution with "same" padding for odd sizes.
    pub fn he(prefix: &str, in_channels: usize, out_channels: usize, size: usize, seed: u64) -> Self {
        let kernel_name = format!("{prefix}.kernel");
        let kernel = he_normal(
            &kernel_name,
            &[out_channels, in_channels, size, size],
            in_channels * size * size,
            seed,
        );
        ConvParams {
            kernel: Param::new(kernel_name, kernel),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])),
            stride: 1,
            padding: size / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = self.kernel.bind(g);
        let b = self.bias.bind(g);
        g.conv2d(x, k, b, self.stride, self.padding)
    }
}

impl Module for ConvParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.kernel);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

/// Affine layer `x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: Param,
    pub bias: Param,
}

impl DenseParams {
    pub fn xavier(prefix: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        let weight_name = format!("{prefix}.weight");
        let weight = xavier_uniform(&weight_name, &[d_in, d_out], d_in, d_out, seed);
        DenseParams {
            weight: Param::new(weight_name, weight),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        g.dense(x, w, b)
    }
}

impl Module for DenseParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Sets every parameter of `m` to zero; handy for the closed-form examples.
pub fn zero_all(m: &mut impl Module) {
    m.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
}
