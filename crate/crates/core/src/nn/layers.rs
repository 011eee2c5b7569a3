//! Parameterized building blocks shared by the U-Net family.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

use super::graph::{Graph, Padding, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

/// Batchnorm epsilon inside the square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, running statistics updated.
    Train,
    /// Running statistics, dropout off.
    Eval,
}

/// He-normal initialization with standard deviation `sqrt(2 / fan_in)`.
fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl Conv2dLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel, padding: Padding::Same }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.padding)
    }
}

/// Transposed 2x2 stride-2 convolution ("up-convolution").
#[derive(Debug, Clone)]
pub struct UpConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UpConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(&[in_channels, out_channels, 2, 2], in_channels, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.upconv2(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let eps = T::from_f64(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batchnorm_train(x, gamma, beta, eps)?;
                let mom = T::from_f64(BN_MOMENTUM);
                let rest = T::one() - mom;
                let unbias = if stats.count > 1 {
                    T::from_f64(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                let rm = store.get_mut(self.running_mean).value.data_mut();
                for (r, &m) in rm.iter_mut().zip(&stats.mean) {
                    *r = mom * *r + rest * m;
                }
                let rv = store.get_mut(self.running_var).value.data_mut();
                for (r, &v) in rv.iter_mut().zip(&stats.var) {
                    *r = mom * *r + rest * v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                g.batchnorm_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }
}

/// Two rounds of conv3x3 -> batchnorm -> ReLU, each optionally followed
/// by dropout.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNorm2d,
    pub dropout_rate: f64,
}

impl ConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        dropout_rate: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv2dLayer::new(store, &format!("{name}.conv1"), in_channels, out_channels, 3, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_channels),
            conv2: Conv2dLayer::new(store, &format!("{name}.conv2"), out_channels, out_channels, 3, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_channels),
            dropout_rate,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2)] {
            h = conv.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.relu(h);
            h = g.dropout(h, self.dropout_rate, mode == Mode::Train, rng)?;
        }
        Ok(h)
    }
}
