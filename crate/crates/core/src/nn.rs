//! Layers that register their parameters in a [`ParamStore`] and emit tape ops.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{ConvGeom, Graph, Mode, Var};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[in_dim, out_dim], bound, rng),
            ParamKind::Weight,
            group,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_tensor(&[out_dim], bound, rng),
                ParamKind::Bias,
                group,
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                ParamKind::NormScale,
                group,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::NormShift,
                group,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::RunningMean,
                group,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                ParamKind::RunningVar,
                group,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        g.batch_norm(
            store,
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            BN_EPS,
            BN_MOMENTUM,
            mode,
        )
    }
}

/// Square-kernel convolution without bias (always followed by batch norm here).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // He initialization, fan-out mode.
        let std = (2.0 / (out_ch * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(&[out_ch, in_ch, kernel, kernel], std, rng),
            ParamKind::Weight,
            group,
        );
        Self {
            weight,
            geom: ConvGeom { stride, pad },
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        g.conv2d(x, w, self.geom)
    }
}

/// `Linear -> BatchNorm -> ReLU`, the hidden unit of every perceptron here.
#[derive(Clone, Debug)]
pub struct LinearBnRelu {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl LinearBnRelu {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, &format!("{name}.fc"), group, in_dim, out_dim, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), group, out_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let y = self.linear.forward(g, store, x);
        let y = self.bn.forward(g, store, y, mode);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                group,
                in_ch,
                out_ch,
                kernel,
                stride,
                kernel / 2,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), group, out_ch),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let y = self.conv.forward(g, store, x);
        self.bn.forward(g, store, y, mode)
    }
}
