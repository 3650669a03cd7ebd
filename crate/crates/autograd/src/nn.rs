//! Layers built on top of [`Graph`](crate::Graph).

use rand::Rng;

use crate::conv::ConvGeom;
use crate::graph::{Graph, Var};
use crate::store::{Builder, Kind, ParamId, ParamStore};

/// Zero padding that keeps `floor(len / stride)` output samples; the extra
/// sample of an odd total goes to the left.
pub fn same_padding(kernel: usize, stride: usize) -> (usize, usize) {
    let total = kernel.saturating_sub(stride);
    (total.div_ceil(2), total / 2)
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1dConfig {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Default for Conv1dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
            bias: true,
        }
    }
}

impl Conv1dConfig {
    /// Padding that preserves `floor(len / stride)` for a dilated kernel.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        let effective = dilation * (kernel - 1) + 1;
        let (pad_left, pad_right) = same_padding(effective, stride);
        Self {
            stride,
            dilation,
            pad_left,
            pad_right,
            ..Self::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
}

impl Conv1d {
    /// Uniform(±1/sqrt(fan_in)) initialization.
    pub fn new<R: Rng>(
        vb: &mut Builder<'_, R>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: Conv1dConfig,
    ) -> Self {
        assert!(
            in_channels % cfg.groups == 0 && out_channels % cfg.groups == 0,
            "channels {in_channels}->{out_channels} not divisible by {} groups",
            cfg.groups
        );
        let fan_in = in_channels / cfg.groups * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = vb.uniform("weight", &[out_channels, in_channels / cfg.groups, kernel], bound);
        let bias = cfg.bias.then(|| vb.uniform("bias", &[out_channels], bound));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geom: ConvGeom {
                kernel,
                stride: cfg.stride,
                dilation: cfg.dilation,
                pad_left: cfg.pad_left,
                pad_right: cfg.pad_right,
                groups: cfg.groups,
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let w = g.param(p, self.weight);
        let b = self.bias.map(|b| g.param(p, b));
        g.conv1d(x, w, b, self.geom)
    }

    pub fn out_len(&self, len: usize) -> usize {
        self.geom.out_len(len)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl ConvTranspose1d {
    pub fn new<R: Rng>(
        vb: &mut Builder<'_, R>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: Conv1dConfig,
    ) -> Self {
        let fan_in = out_channels / cfg.groups * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = vb.uniform("weight", &[in_channels, out_channels / cfg.groups, kernel], bound);
        let bias = cfg.bias.then(|| vb.uniform("bias", &[out_channels], bound));
        Self {
            weight,
            bias,
            geom: ConvGeom {
                kernel,
                stride: cfg.stride,
                dilation: cfg.dilation,
                pad_left: cfg.pad_left,
                pad_right: cfg.pad_right,
                groups: cfg.groups,
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let w = g.param(p, self.weight);
        let b = self.bias.map(|b| g.param(p, b));
        g.conv_transpose1d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new<R: Rng>(vb: &mut Builder<'_, R>, channels: usize) -> Self {
        Self {
            gamma: vb.constant("gamma", &[channels], 1.0, Kind::Trainable),
            beta: vb.constant("beta", &[channels], 0.0, Kind::Trainable),
            running_mean: vb.constant("running_mean", &[channels], 0.0, Kind::Buffer),
            running_var: vb.constant("running_var", &[channels], 1.0, Kind::Buffer),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        g.batch_norm(
            p,
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.momentum,
            self.eps,
        )
    }
}
