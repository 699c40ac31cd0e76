//! The residual volumetric super-resolution network: a stack of same-padded
//! 3D convolutions with ReLU between layers and a linear final layer whose
//! output is added back onto the input.

pub mod conv;
mod gradcheck;
mod model_file;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

pub use conv::MacCounter;
pub use gradcheck::{
    gradient_check, gradient_check_with, CheckInit, GradCheckOptions, GradCheckReport,
};
pub use model_file::{
    load_model, model_from_bytes, model_to_bytes, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC,
};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    pub residual: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 12,
            channels: 64,
            kernel: 3,
            residual: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(
                "network.depth",
                format!("must be at least 2, got {}", self.depth),
            ));
        }
        if self.channels < 1 {
            return Err(Error::config("network.channels", "must be at least 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(
                "network.kernel",
                format!("must be odd, got {}", self.kernel),
            ));
        }
        Ok(())
    }

    /// Channel counts between layers: `(1, C, ..., C, 1)`.
    pub fn channel_chain(&self) -> Vec<usize> {
        let mut chain = vec![self.channels; self.depth + 1];
        chain[0] = 1;
        chain[self.depth] = 1;
        chain
    }

    /// Number of voxels on each side of an output voxel that can influence it.
    pub fn receptive_radius(&self) -> usize {
        self.depth * (self.kernel - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        let k3 = self.kernel.pow(3);
        self.channel_chain()
            .windows(2)
            .map(|c| c[0] * c[1] * k3 + c[1])
            .sum()
    }
}

/// Dense multiply-accumulate count of one forward pass over an `m³` feature
/// map, counting taps that land in the zero padding.
pub fn cost_model(cfg: &NetworkConfig, m: usize) -> u64 {
    let m3 = (m as u64).pow(3);
    let k3 = (cfg.kernel as u64).pow(3);
    cfg.channel_chain()
        .windows(2)
        .map(|c| m3 * k3 * c[0] as u64 * c[1] as u64)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dLayer<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    /// `(c_out, c_in, k, k, k)`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3dLayer<T> {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Conv3dLayer {
            c_in,
            c_out,
            k,
            weights: vec![T::zero(); c_out * c_in * k * k * k],
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn new(c_in: usize, c_out: usize, k: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("kernel edge {k} must be odd")));
        }
        if weights.len() != c_out * c_in * k * k * k || bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "layer {c_in}->{c_out} k={k} needs {} weights and {c_out} biases, got {} and {}",
                c_out * c_in * k * k * k,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Conv3dLayer {
            c_in,
            c_out,
            k,
            weights,
            bias,
        })
    }

    pub fn weight(&self, o: usize, i: usize, kz: usize, ky: usize, kx: usize) -> T {
        let k = self.k;
        self.weights[(((o * self.c_in + i) * k + kz) * k + ky) * k + kx]
    }

    fn cast<U: Real>(&self) -> Conv3dLayer<U> {
        Conv3dLayer {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            weights: self
                .weights
                .iter()
                .map(|v| U::of(v.to_f64_lossless()))
                .collect(),
            bias: self
                .bias
                .iter()
                .map(|v| U::of(v.to_f64_lossless()))
                .collect(),
        }
    }
}

/// Same-padded stride-1 convolution of `input` by `layer`.
pub fn conv3d_forward<T: Real>(input: &Tensor4<T>, layer: &Conv3dLayer<T>) -> Result<Tensor4<T>> {
    conv3d_forward_counted(input, layer, None)
}

pub fn conv3d_forward_counted<T: Real>(
    input: &Tensor4<T>,
    layer: &Conv3dLayer<T>,
    counter: Option<&MacCounter>,
) -> Result<Tensor4<T>> {
    if input.channels() != layer.c_in {
        return Err(Error::ShapeMismatch(format!(
            "layer expects {} input channels, got {}",
            layer.c_in,
            input.channels()
        )));
    }
    let dims = input.spatial();
    let mut out = Tensor4::zeros(Shape4::new(layer.c_out, dims));
    conv::conv_same(
        input.data(),
        layer.c_in,
        dims,
        &layer.weights,
        Some(&layer.bias),
        layer.c_out,
        layer.k,
        out.data_mut(),
        counter,
    );
    Ok(out)
}

pub fn relu<T: Real>(t: &Tensor4<T>) -> Tensor4<T> {
    t.map(|v| v.max(T::zero()))
}

fn relu_in_place<T: Real>(t: &mut Tensor4<T>) {
    for v in t.data_mut() {
        *v = v.max(T::zero());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    layers: Vec<Conv3dLayer<T>>,
}

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input of every layer: `x` followed by the post-ReLU activations.
    pub inputs: Vec<Tensor4<T>>,
    /// Pre-activation of every layer that is followed by a ReLU.
    pub pre_activations: Vec<Tensor4<T>>,
    /// Raw output of the final layer, `f(x)`.
    pub head: Tensor4<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
    /// Gradient with respect to the network input.
    pub input: Option<Tensor4<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![T::zero(); l.weights.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
            input: None,
        }
    }

    /// Parameter gradients in the order of [`Network::params`].
    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    /// Elementwise `self += other` over parameter gradients.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.slices_mut().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.slices()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

#[doc(hidden)]
/// Deliberate defects used to prove that the gradient check catches bugs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Pass gradient where the pre-activation is negative instead of positive.
    ReluSignFlip,
}

/// Tracks bytes of live activation tensors during inference.
#[derive(Debug, Default)]
pub struct ActivationMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl ActivationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: usize) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn free(&self, bytes: usize) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn current_bytes(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<T: Real> Network<T> {
    /// A network with every weight and bias set to zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .channel_chain()
            .windows(2)
            .map(|c| Conv3dLayer::zeros(c[0], c[1], config.kernel))
            .collect();
        Ok(Network { config, layers })
    }

    /// Weights i.i.d. `N(0, std²)` from a generator seeded with `seed`;
    /// biases zero.
    pub fn init_gaussian(config: NetworkConfig, seed: u64, std: f64) -> Result<Self> {
        let mut net = Network::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::config("init std", e.to_string()))?;
        for layer in &mut net.layers {
            for w in &mut layer.weights {
                *w = T::of(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    pub fn from_layers(config: NetworkConfig, layers: Vec<Conv3dLayer<T>>) -> Result<Self> {
        config.validate()?;
        let chain = config.channel_chain();
        if layers.len() != config.depth {
            return Err(Error::ShapeMismatch(format!(
                "config depth {} but {} layers given",
                config.depth,
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.c_in != chain[l] || layer.c_out != chain[l + 1] || layer.k != config.kernel {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} is {}->{} k={}, expected {}->{} k={}",
                    layer.c_in,
                    layer.c_out,
                    layer.k,
                    chain[l],
                    chain[l + 1],
                    config.kernel
                )));
            }
        }
        Ok(Network { config, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Conv3dLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Conv3dLayer<T>] {
        &mut self.layers
    }

    /// Parameter grids in order: weights then bias of each layer.
    pub fn params(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config,
            layers: self.layers.iter().map(Conv3dLayer::cast).collect(),
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "network input must have 1 channel, got {}",
                x.channels()
            )));
        }
        Ok(())
    }

    /// Full forward pass retaining every activation. Returns `y = x + f(x)`
    /// for residual networks and `y = f(x)` otherwise.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre_activations = Vec::with_capacity(depth - 1);
        inputs.push(x.clone());
        for layer in &self.layers[..depth - 1] {
            let z = conv3d_forward(inputs.last().expect("non-empty"), layer)?;
            inputs.push(relu(&z));
            pre_activations.push(z);
        }
        let head = conv3d_forward(inputs.last().expect("non-empty"), &self.layers[depth - 1])?;
        let y = self.combine(x, head.clone());
        Ok((
            y,
            ForwardCache {
                inputs,
                pre_activations,
                head,
            },
        ))
    }

    fn combine(&self, x: &Tensor4<T>, mut head: Tensor4<T>) -> Tensor4<T> {
        if self.config.residual {
            for (h, &v) in head.data_mut().iter_mut().zip(x.data()) {
                *h = v + *h;
            }
        }
        head
    }

    /// Inference-only forward pass holding at most two hidden activations at
    /// a time. Live activation bytes are reported to `meter`.
    pub fn predict(&self, x: &Tensor4<T>, meter: Option<&ActivationMeter>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let track = |bytes: usize, alloc: bool| {
            if let Some(m) = meter {
                if alloc {
                    m.alloc(bytes)
                } else {
                    m.free(bytes)
                }
            }
        };
        track(x.byte_size(), true);
        let depth = self.layers.len();
        let mut h: Option<Tensor4<T>> = None;
        for layer in &self.layers[..depth - 1] {
            let src = h.as_ref().unwrap_or(x);
            let next_bytes = layer.c_out * x.spatial().len() * std::mem::size_of::<T>();
            track(next_bytes, true);
            let mut next = conv3d_forward(src, layer)?;
            relu_in_place(&mut next);
            if let Some(old) = h.replace(next) {
                track(old.byte_size(), false);
            }
        }
        let last = &self.layers[depth - 1];
        track(x.spatial().len() * std::mem::size_of::<T>(), true);
        let head = conv3d_forward(h.as_ref().unwrap_or(x), last)?;
        if let Some(old) = h.take() {
            track(old.byte_size(), false);
        }
        let y = self.combine(x, head);
        track(y.byte_size(), false);
        track(x.byte_size(), false);
        Ok(y)
    }

    /// Peak activation bytes of [`Network::predict`] on a volume of `voxels`.
    pub fn predict_footprint_bytes(&self, voxels: usize) -> usize {
        let c = if self.config.depth > 2 {
            2 * self.config.channels
        } else {
            self.config.channels + 1
        };
        (1 + c) * voxels * std::mem::size_of::<T>()
    }

    /// Backpropagate `d_y = ∂L/∂y` through a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<T>, d_y: &Tensor4<T>) -> Result<Gradients<T>> {
        self.backward_impl(cache, d_y, None, true)
    }

    /// [`Network::backward`] without the input gradient, which saves one
    /// convolution. `input` of the result is `None`.
    pub fn parameter_gradients(
        &self,
        cache: &ForwardCache<T>,
        d_y: &Tensor4<T>,
    ) -> Result<Gradients<T>> {
        self.backward_impl(cache, d_y, None, false)
    }

    #[doc(hidden)]
    pub fn backward_with_fault(
        &self,
        cache: &ForwardCache<T>,
        d_y: &Tensor4<T>,
        fault: BackwardFault,
    ) -> Result<Gradients<T>> {
        self.backward_impl(cache, d_y, Some(fault), true)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache<T>,
        d_y: &Tensor4<T>,
        fault: Option<BackwardFault>,
        want_input: bool,
    ) -> Result<Gradients<T>> {
        let depth = self.layers.len();
        if cache.inputs.len() != depth || cache.pre_activations.len() != depth - 1 {
            return Err(Error::ShapeMismatch(
                "forward cache does not match network depth".into(),
            ));
        }
        if d_y.shape() != cache.head.shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {} does not match output {}",
                d_y.shape(),
                cache.head.shape()
            )));
        }
        let dims = d_y.spatial();
        let mut grads = Gradients::zeros_like(self);
        let mut d_out = d_y.clone();
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            conv::conv_weight_grad(
                cache.inputs[l].data(),
                layer.c_in,
                dims,
                d_out.data(),
                layer.c_out,
                layer.k,
                &mut g.weights,
                &mut g.bias,
            );
            if l == 0 && !want_input {
                return Ok(grads);
            }
            let adjoint = conv::adjoint_weights(&layer.weights, layer.c_out, layer.c_in, layer.k);
            let mut d_in = Tensor4::zeros(Shape4::new(layer.c_in, dims));
            conv::conv_same(
                d_out.data(),
                layer.c_out,
                dims,
                &adjoint,
                None,
                layer.c_in,
                layer.k,
                d_in.data_mut(),
                None,
            );
            if l > 0 {
                let pre = cache.pre_activations[l - 1].data();
                for (d, &z) in d_in.data_mut().iter_mut().zip(pre) {
                    let pass = match fault {
                        None => z > T::zero(),
                        Some(BackwardFault::ReluSignFlip) => z < T::zero(),
                    };
                    if !pass {
                        *d = T::zero();
                    }
                }
            } else if self.config.residual {
                for (d, &g) in d_in.data_mut().iter_mut().zip(d_y.data()) {
                    *d = *d + g;
                }
            }
            d_out = d_in;
        }
        grads.input = Some(d_out);
        Ok(grads)
    }
}

/// Network initialized for training: Gaussian weights with std
/// [`INIT_STD`], zero biases.
pub fn init_network(cfg: NetworkConfig, seed: u64) -> Result<Network<f32>> {
    Network::init_gaussian(cfg, seed, INIT_STD)
}

pub fn forward<T: Real>(net: &Network<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, ForwardCache<T>)> {
    net.forward(x)
}

pub fn backward<T: Real>(
    net: &Network<T>,
    cache: &ForwardCache<T>,
    d_y: &Tensor4<T>,
) -> Result<Gradients<T>> {
    net.backward(cache, d_y)
}

#[cfg(test)]
mod tests;
