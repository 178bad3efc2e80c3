//! Named parameter storage and the two parametric primitives (linear maps
//! and convolutions) every larger layer is assembled from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{config_err, Result};
use crate::grid::{ConvKernel, GridSpec};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// serialization order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter name {name}");
        self.params.push(NamedTensor { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    /// Gradient per parameter, zeros for parameters the loss did not reach.
    pub fn collect_grads(&self, grads: &mut Gradients<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.0)
            .map(|(p, &v)| grads.take_or_zeros(v, p.value.shape()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| NamedTensor { name: p.name.clone(), value: p.value.cast() }).collect(),
        }
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binds externally created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// `y = x W + b` over the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(Shape::matrix(in_dim, out_dim), bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::matrix(1, out_dim)));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.var(self.weight), bound.var(self.bias))
    }
}

/// Weight bound for convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvInit {
    /// `±sqrt(1/fan_in)`.
    #[default]
    FanIn,
    /// `±sqrt(6/fan_in)`, which keeps activation variance through ReLU layers.
    He,
}

impl ConvInit {
    pub fn gain(self) -> f64 {
        match self {
            ConvInit::FanIn => 1.0,
            ConvInit::He => 6.0,
        }
    }
}

/// Same-padded dilated convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: GridSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: GridSpec,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_init(store, name, spec, in_channels, out_channels, ConvInit::FanIn, rng)
    }

    pub fn with_init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: GridSpec,
        in_channels: usize,
        out_channels: usize,
        init: ConvInit,
        rng: &mut R,
    ) -> Self {
        let k = ConvKernel::<T>::init_with_gain(spec.kernel_size(), in_channels, out_channels, init.gain(), rng);
        let weight = store.add(format!("{name}.weight"), k.weights);
        let bias = store.add(format!("{name}.bias"), k.bias);
        ConvLayer { weight, bias, spec, in_channels, out_channels }
    }

    pub fn param_count(kernel_size: usize, in_channels: usize, out_channels: usize) -> usize {
        kernel_size * kernel_size * in_channels * out_channels + out_channels
    }

    pub fn kernel<T: Scalar>(&self, store: &ParamStore<T>) -> ConvKernel<T> {
        ConvKernel { weights: store.get(self.weight).clone(), bias: store.get(self.bias).clone() }
    }

    pub fn set_kernel<T: Scalar>(&self, store: &mut ParamStore<T>, kernel: ConvKernel<T>) -> Result<()> {
        if kernel.weights.shape() != store.get(self.weight).shape() || kernel.bias.numel() != self.out_channels {
            return config_err(format!("kernel {} does not fit layer", kernel.weights.shape()));
        }
        *store.get_mut(self.weight) = kernel.weights;
        *store.get_mut(self.bias) = kernel.bias;
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, bound.var(self.weight), Some(bound.var(self.bias)), self.spec)
    }
}
