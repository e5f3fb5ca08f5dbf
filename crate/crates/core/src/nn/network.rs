//! conv → ReLU → max-pool → conv → ReLU → max-pool → fully-connected → L2 normalization.

use std::ops::Deref;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, l2_normalize, l2_normalize_backward,
    maxpool_backward, maxpool_forward, output_extent, relu, relu_backward, PoolIndices,
};
use crate::tensor::Tensor;

/// Layer sizes of the embedding network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv1_kernels: usize,
    pub conv1_kernel_size: usize,
    pub conv1_stride: usize,
    pub conv2_kernels: usize,
    pub conv2_kernel_size: usize,
    pub conv2_stride: usize,
    /// Pooling window side `z`.
    pub pool_window: usize,
    /// Pooling stride `s`; windows overlap when `s < z`.
    pub pool_stride: usize,
    pub embedding_dim: usize,
    pub norm_epsilon: f64,
}

/// `(channels, height, width)` after each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShapes {
    pub conv1: [usize; 3],
    pub pool1: [usize; 3],
    pub conv2: [usize; 3],
    pub pool2: [usize; 3],
}

impl LayerShapes {
    /// Length of the flattened second pooling output fed to the fully-connected layer.
    pub fn flat_len(&self) -> usize {
        self.pool2.iter().product()
    }
}

impl ArchitectureConfig {
    /// Full-size network on 250×100 images.
    pub fn full() -> Self {
        ArchitectureConfig {
            input_channels: 3,
            input_height: 250,
            input_width: 100,
            conv1_kernels: 32,
            conv1_kernel_size: 5,
            conv1_stride: 2,
            conv2_kernels: 32,
            conv2_kernel_size: 5,
            conv2_stride: 1,
            pool_window: 2,
            pool_stride: 1,
            embedding_dim: 400,
            norm_epsilon: 1e-12,
        }
    }

    /// Full-size network consuming 230×80 training crops.
    pub fn full_crop() -> Self {
        ArchitectureConfig {
            input_height: 230,
            input_width: 80,
            ..Self::full()
        }
    }

    /// Small network for tests and desk-scale runs: 3×20×12 input, 8 kernels, 16-dim output.
    pub fn desk() -> Self {
        ArchitectureConfig {
            input_channels: 3,
            input_height: 20,
            input_width: 12,
            conv1_kernels: 8,
            conv1_kernel_size: 3,
            conv1_stride: 2,
            conv2_kernels: 8,
            conv2_kernel_size: 3,
            conv2_stride: 1,
            pool_window: 2,
            pool_stride: 1,
            embedding_dim: 16,
            norm_epsilon: 1e-12,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }

    pub fn layer_shapes(&self) -> Result<LayerShapes> {
        let sweep = |[_, h, w]: [usize; 3], c: usize, k: usize, s: usize| -> Result<[usize; 3]> {
            Ok([c, output_extent(h, k, s)?, output_extent(w, k, s)?])
        };
        let conv1 = sweep(
            self.input_shape(),
            self.conv1_kernels,
            self.conv1_kernel_size,
            self.conv1_stride,
        )?;
        let pool1 = sweep(conv1, conv1[0], self.pool_window, self.pool_stride)?;
        let conv2 = sweep(
            pool1,
            self.conv2_kernels,
            self.conv2_kernel_size,
            self.conv2_stride,
        )?;
        let pool2 = sweep(conv2, conv2[0], self.pool_window, self.pool_stride)?;
        Ok(LayerShapes {
            conv1,
            pool1,
            conv2,
            pool2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("conv1_kernels", self.conv1_kernels),
            ("conv2_kernels", self.conv2_kernels),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !(self.norm_epsilon.is_finite() && self.norm_epsilon >= 0.0) {
            return Err(Error::config("norm_epsilon must be finite and non-negative"));
        }
        self.layer_shapes()
            .map(|_| ())
            .map_err(|e| Error::config(format!("architecture does not fit its input: {e}")))
    }
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Names the six parameter arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Conv1Weight,
    Conv1Bias,
    Conv2Weight,
    Conv2Bias,
    FcWeight,
    FcBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Conv1Weight,
        ParamGroup::Conv1Bias,
        ParamGroup::Conv2Weight,
        ParamGroup::Conv2Bias,
        ParamGroup::FcWeight,
        ParamGroup::FcBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Conv1Weight => "conv1_weight",
            ParamGroup::Conv1Bias => "conv1_bias",
            ParamGroup::Conv2Weight => "conv2_weight",
            ParamGroup::Conv2Bias => "conv2_bias",
            ParamGroup::FcWeight => "fc_weight",
            ParamGroup::FcBias => "fc_bias",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Network weights and biases; also the container for parameter gradients.
///
/// Every mutable access assigns a new stamp, so a [`ForwardCache`] taken before the
/// mutation is recognised as stale.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    groups: [Tensor; 6],
    stamp: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.groups == other.groups
    }
}

impl NetworkParams {
    /// Assembles parameters from arrays in [`ParamGroup::ALL`] order, checking shapes.
    pub fn from_groups(config: &ArchitectureConfig, groups: [Tensor; 6]) -> Result<Self> {
        let expected = Self::group_shapes(config)?;
        for ((g, t), shape) in ParamGroup::ALL.iter().zip(&groups).zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{}: expected {shape:?}, got {:?}",
                    g.name(),
                    t.shape()
                )));
            }
        }
        Ok(NetworkParams {
            groups,
            stamp: fresh_stamp(),
        })
    }

    pub fn zeros(config: &ArchitectureConfig) -> Result<Self> {
        let shapes = Self::group_shapes(config)?;
        let groups = shapes.map(|s| Tensor::zeros(&s));
        Ok(NetworkParams {
            groups,
            stamp: fresh_stamp(),
        })
    }

    pub fn group_shapes(config: &ArchitectureConfig) -> Result<[Vec<usize>; 6]> {
        let shapes = config.layer_shapes()?;
        let k1 = config.conv1_kernel_size;
        let k2 = config.conv2_kernel_size;
        Ok([
            vec![config.conv1_kernels, config.input_channels, k1, k1],
            vec![config.conv1_kernels],
            vec![config.conv2_kernels, config.conv1_kernels, k2, k2],
            vec![config.conv2_kernels],
            vec![config.embedding_dim, shapes.flat_len()],
            vec![config.embedding_dim],
        ])
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            groups: self.groups.clone().map(|t| Tensor::zeros(t.shape())),
            stamp: fresh_stamp(),
        }
    }

    pub fn group(&self, g: ParamGroup) -> &Tensor {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Tensor {
        self.stamp = fresh_stamp();
        &mut self.groups[g.index()]
    }

    pub fn groups(&self) -> impl Iterator<Item = (ParamGroup, &Tensor)> {
        ParamGroup::ALL.iter().copied().zip(self.groups.iter())
    }

    pub fn into_groups(self) -> [Tensor; 6] {
        self.groups
    }

    pub fn num_parameters(&self) -> usize {
        self.groups.iter().map(Tensor::len).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &NetworkParams) -> Result<()> {
        self.stamp = fresh_stamp();
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &NetworkParams) -> Result<()> {
        self.stamp = fresh_stamp();
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.stamp = fresh_stamp();
        self.groups.iter_mut().for_each(|t| t.scale(alpha));
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.groups.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// `||self - other||_F / max(||other||_F, tiny)`.
    pub fn relative_difference(&self, other: &NetworkParams) -> f64 {
        let diff: f64 = self
            .groups
            .iter()
            .zip(&other.groups)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        diff / other.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(Tensor::is_finite)
    }
}

/// Samples conv weights from N(0, 0.01²) and fc weights from N(0, 0.001²); biases are 0.
pub fn init_params(config: &ArchitectureConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = Normal::new(0.0, 0.01).expect("valid std");
    let fc = Normal::new(0.0, 0.001).expect("valid std");
    let mut params = NetworkParams::zeros(config)?;
    for (group, dist) in [
        (ParamGroup::Conv1Weight, conv),
        (ParamGroup::Conv2Weight, conv),
        (ParamGroup::FcWeight, fc),
    ] {
        params
            .group_mut(group)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = dist.sample(&mut rng));
    }
    Ok(params)
}

/// A unit-norm network output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps an arbitrary vector; only network outputs are guaranteed unit norm.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Activations retained by [`Network::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    input: Tensor,
    conv1_pre: Tensor,
    pool1_idx: PoolIndices,
    pool1_out: Tensor,
    conv2_pre: Tensor,
    pool2_idx: PoolIndices,
    flat: Vec<f64>,
    fc_out: Vec<f64>,
}

/// Which side of every kink the forward pass fell on: ReLU signs and pooling argmaxes.
/// The network is smooth in a neighbourhood where this stays fixed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    pub relu1: Vec<bool>,
    pub pool1: Vec<usize>,
    pub relu2: Vec<bool>,
    pub pool2: Vec<usize>,
}

impl ForwardCache {
    /// Fully-connected output before normalization.
    pub fn pre_normalization(&self) -> &[f64] {
        &self.fc_out
    }

    pub fn activation_pattern(&self) -> ActivationPattern {
        ActivationPattern {
            relu1: self.conv1_pre.data().iter().map(|&x| x > 0.0).collect(),
            pool1: self.pool1_idx.argmax().to_vec(),
            relu2: self.conv2_pre.data().iter().map(|&x| x > 0.0).collect(),
            pool2: self.pool2_idx.argmax().to_vec(),
        }
    }
}

/// Embedding network: an architecture plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ArchitectureConfig,
    params: NetworkParams,
}

impl Network {
    pub fn new(config: ArchitectureConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        let expected = NetworkParams::group_shapes(&config)?;
        for ((g, t), shape) in params.groups().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{} does not match architecture: expected {shape:?}, got {:?}",
                    g.name(),
                    t.shape()
                )));
            }
        }
        Ok(Network { config, params })
    }

    pub fn initialized(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn into_params(self) -> NetworkParams {
        self.params
    }

    pub fn forward(&self, image: &Tensor) -> Result<(Embedding, ForwardCache)> {
        let cfg = &self.config;
        if image.shape() != cfg.input_shape() {
            return Err(Error::shape(format!(
                "image shape {:?}, network expects {:?}",
                image.shape(),
                cfg.input_shape()
            )));
        }
        let p = &self.params;
        let conv1_pre = conv2d_forward(
            image,
            p.group(ParamGroup::Conv1Weight),
            p.group(ParamGroup::Conv1Bias),
            cfg.conv1_stride,
        )?;
        let (pool1_out, pool1_idx) =
            maxpool_forward(&relu(&conv1_pre), cfg.pool_window, cfg.pool_stride)?;
        let conv2_pre = conv2d_forward(
            &pool1_out,
            p.group(ParamGroup::Conv2Weight),
            p.group(ParamGroup::Conv2Bias),
            cfg.conv2_stride,
        )?;
        let (pool2_out, pool2_idx) =
            maxpool_forward(&relu(&conv2_pre), cfg.pool_window, cfg.pool_stride)?;
        let flat = pool2_out.into_data();
        let fc_out = fc_forward(&flat, p.group(ParamGroup::FcWeight), p.group(ParamGroup::FcBias))?;
        let y = l2_normalize(&fc_out, cfg.norm_epsilon)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let cache = ForwardCache {
            stamp: p.stamp,
            input: image.clone(),
            conv1_pre,
            pool1_idx,
            pool1_out,
            conv2_pre,
            pool2_idx,
            flat,
            fc_out,
        };
        Ok((Embedding(y), cache))
    }

    pub fn embed(&self, image: &Tensor) -> Result<Embedding> {
        self.forward(image).map(|(e, _)| e)
    }

    /// Parameter gradient of `<output_grad, F(image)>` for the image behind `cache`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<NetworkParams> {
        if cache.stamp != self.params.stamp {
            return Err(Error::contract(
                "forward cache was produced with different parameters",
            ));
        }
        if output_grad.len() != self.config.embedding_dim {
            return Err(Error::shape(format!(
                "output gradient length {}, embedding dim {}",
                output_grad.len(),
                self.config.embedding_dim
            )));
        }
        let cfg = &self.config;
        let p = &self.params;

        let d_fc = l2_normalize_backward(&cache.fc_out, output_grad, cfg.norm_epsilon)?;
        let fc = fc_backward(&cache.flat, p.group(ParamGroup::FcWeight), &d_fc)?;
        let d_pool2 = Tensor::from_vec(cache.pool2_idx.output_shape().to_vec(), fc.input)?;
        let d_relu2 = maxpool_backward(&cache.pool2_idx, &d_pool2)?;
        let d_conv2 = relu_backward(&cache.conv2_pre, &d_relu2)?;
        let conv2 = conv2d_backward(
            &cache.pool1_out,
            p.group(ParamGroup::Conv2Weight),
            cfg.conv2_stride,
            &d_conv2,
        )?;
        let d_relu1 = maxpool_backward(&cache.pool1_idx, &conv2.input)?;
        let d_conv1 = relu_backward(&cache.conv1_pre, &d_relu1)?;
        let conv1 = conv2d_backward(
            &cache.input,
            p.group(ParamGroup::Conv1Weight),
            cfg.conv1_stride,
            &d_conv1,
        )?;

        Ok(NetworkParams {
            groups: [
                conv1.weight,
                conv1.bias,
                conv2.weight,
                conv2.bias,
                fc.weight,
                fc.bias,
            ],
            stamp: fresh_stamp(),
        })
    }
}
