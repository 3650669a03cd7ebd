use d2m_autograd::nn::{same_padding, BatchNorm1d, Conv1d, Conv1dConfig};
use d2m_autograd::{Builder, Graph, ParamStore, Tensor, Var};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{width, MotionRepr, MotionSequence, VisualFeatureSequence, VISUAL_DIM};
use crate::codec::{Level, VQSequence, CODE_DIM};
use crate::error::{Error, Result};
use crate::layers::{batch_tensor, batch_item, ConvUnit, ResidualStack};

/// Shortest motion clip accepted by the motion encoder (its widest kernel).
pub const MIN_MOTION_FRAMES: usize = 6;

const DILATIONS: [usize; 3] = [1, 3, 9];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub level: Level,
    /// Output bound of the generator, `sigma * tanh(.)`.
    pub sigma: f64,
    /// Divides every hidden channel count; 1 is the full network.
    pub width_div: usize,
    pub motion: MotionRepr,
    pub no_motion: bool,
    pub no_visual: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            sigma: 100.0,
            width_div: 1,
            motion: MotionRepr::Keypoints2d,
            no_motion: false,
            no_visual: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.width_div == 0 {
            return Err(Error::Config("width_div must be at least 1".into()));
        }
        Ok(())
    }
}

fn conv_unit(
    vb: &mut Builder<'_, ChaCha8Rng>,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    norm: bool,
    activate: bool,
) -> ConvUnit {
    let (pad_left, pad_right) = same_padding(kernel, stride);
    let conv = Conv1d::new(
        &mut vb.pp("conv"),
        c_in,
        c_out,
        kernel,
        Conv1dConfig {
            stride,
            pad_left,
            pad_right,
            ..Conv1dConfig::default()
        },
    );
    let norm = norm.then(|| BatchNorm1d::new(&mut vb.pp("bn"), c_out));
    ConvUnit { conv, norm, activate }
}

#[derive(Debug, Clone)]
enum Layer {
    Unit(ConvUnit),
    Res(ResidualStack),
}

fn run(layers: &[Layer], g: &mut Graph, p: &ParamStore, mut h: Var) -> Var {
    for l in layers {
        h = match l {
            Layer::Unit(u) => u.forward(g, p, h),
            Layer::Res(r) => r.forward(g, p, h),
        };
    }
    h
}

/// Stride-1 pose encoder: conv/residual-stack pairs at 256, 512, 1024
/// channels and a 1024-channel conv whose output is what gets fused. A
/// single-channel head sits on top as an auxiliary output.
#[derive(Debug, Clone)]
pub struct MotionEncoder {
    layers: Vec<Layer>,
    head: Conv1d,
    pub out_channels: usize,
}

impl MotionEncoder {
    fn new(vb: &mut Builder<'_, ChaCha8Rng>, c_in: usize, div: usize) -> Self {
        let spec = [(6, 256, true), (3, 512, true), (3, 1024, true), (3, 1024, false)];
        let mut layers = Vec::new();
        let mut c = c_in;
        for (i, &(k, out, res)) in spec.iter().enumerate() {
            let out = width(out, div);
            layers.push(Layer::Unit(conv_unit(&mut vb.pp(&format!("layer{i}")), c, out, k, 1, false, true)));
            if res {
                layers.push(Layer::Res(ResidualStack::new(&mut vb.pp(&format!("res{i}")), out, &DILATIONS)));
            }
            c = out;
        }
        let (pad_left, pad_right) = same_padding(4, 1);
        let head = Conv1d::new(
            &mut vb.pp("head"),
            c,
            1,
            4,
            Conv1dConfig {
                pad_left,
                pad_right,
                ..Conv1dConfig::default()
            },
        );
        Self {
            layers,
            head,
            out_channels: c,
        }
    }

    /// `[B, C_m, T_m]` to `[B, 1024 / div, T_m]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        run(&self.layers, g, p, x)
    }

    /// Auxiliary single-channel output `[B, 1, T_m]`.
    pub fn head(&self, g: &mut Graph, p: &ParamStore, features: Var) -> Var {
        self.head.forward(g, p, features)
    }
}

/// Two stride-1 convolutions, 1024 to 512 to 256 channels.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    layers: Vec<Layer>,
    pub out_channels: usize,
}

impl VisualEncoder {
    fn new(vb: &mut Builder<'_, ChaCha8Rng>, div: usize) -> Self {
        let (c1, c2) = (width(512, div), width(256, div));
        Self {
            layers: vec![
                Layer::Unit(conv_unit(&mut vb.pp("layer0"), VISUAL_DIM, c1, 3, 1, false, true)),
                Layer::Unit(conv_unit(&mut vb.pp("layer1"), c1, c2, 3, 1, false, true)),
            ],
            out_channels: c2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        run(&self.layers, g, p, x)
    }
}

/// Conv stack mapping fused conditioning at `4 * T` steps to `[64, T]`.
#[derive(Debug, Clone)]
pub struct VqGenerator {
    layers: Vec<Layer>,
    sigma: f64,
}

impl VqGenerator {
    fn new(vb: &mut Builder<'_, ChaCha8Rng>, level: Level, c_in: usize, div: usize, sigma: f64) -> Self {
        // (kernel, stride, channels, residual stack after)
        let body: &[(usize, usize, usize, bool)] = match level {
            Level::High => &[
                (6, 2, 32, true),
                (41, 2, 64, true),
                (41, 1, 128, true),
                (41, 1, 256, true),
                (41, 1, 512, true),
            ],
            Level::Low => &[
                (6, 2, 32, true),
                (4, 1, 64, true),
                (40, 2, 128, true),
                (40, 1, 256, true),
                (40, 1, 512, true),
                (40, 1, 1024, true),
                (40, 1, 1024, false),
            ],
        };
        let mut layers = Vec::new();
        let mut c = c_in;
        for (i, &(k, s, out, res)) in body.iter().enumerate() {
            let out = width(out, div);
            layers.push(Layer::Unit(conv_unit(&mut vb.pp(&format!("layer{i}")), c, out, k, s, true, true)));
            if res {
                layers.push(Layer::Res(ResidualStack::new(&mut vb.pp(&format!("res{i}")), out, &DILATIONS)));
            }
            c = out;
        }
        // The low-level table keeps a leaky activation before the final tanh.
        let activate = level == Level::Low;
        layers.push(Layer::Unit(conv_unit(&mut vb.pp("output"), c, CODE_DIM, 40, 1, false, activate)));
        Self { layers, sigma }
    }

    /// `[B, C, 4T]` to `[B, 64, T]` strictly inside `(-sigma, sigma)`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let h = run(&self.layers, g, p, x);
        g.scaled_tanh(h, self.sigma)
    }
}

/// Nearest-neighbour time index map from `src` to `dst` steps.
pub fn nearest_index_map(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| (i * src / dst).min(src - 1)).collect()
}

/// Motion encoder, visual encoder and VQ generator with one parameter
/// store. BatchNorm statistics live in the same store as buffers.
#[derive(Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub motion: MotionEncoder,
    pub visual: VisualEncoder,
    pub vq: VqGenerator,
    pub params: ParamStore,
}

impl Generator {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let mut vb = Builder::new(&mut params, &mut rng, "");
        let motion = MotionEncoder::new(&mut vb.pp("motion"), cfg.motion.channels(), cfg.width_div);
        let visual = VisualEncoder::new(&mut vb.pp("visual"), cfg.width_div);
        let fused = motion.out_channels + visual.out_channels;
        let vq = VqGenerator::new(&mut vb.pp("generator"), cfg.level, fused, cfg.width_div, cfg.sigma);
        Ok(Self {
            cfg,
            motion,
            visual,
            vq,
            params,
        })
    }

    pub fn fused_channels(&self) -> usize {
        self.motion.out_channels + self.visual.out_channels
    }

    /// Encodes both streams, resamples each to `4 * target_t` steps and
    /// concatenates them along channels. A disabled stream contributes
    /// zeros of the same width and its encoder is never run.
    pub fn fuse(&self, g: &mut Graph, motion: Var, visual: Var, target_t: usize) -> Var {
        let len = 4 * target_t;
        let batch = g.shape(motion)[0];
        let stream = |g: &mut Graph, off: bool, x: Var, channels: usize, enc: &dyn Fn(&mut Graph, Var) -> Var| {
            if off {
                g.constant(Tensor::zeros(IxDyn(&[batch, channels, len])))
            } else {
                let h = enc(g, x);
                let src = g.shape(h)[2];
                if src == len {
                    h
                } else {
                    g.gather_time(h, nearest_index_map(src, len))
                }
            }
        };
        let m = stream(g, self.cfg.no_motion, motion, self.motion.out_channels, &|g, x| {
            self.motion.forward(g, &self.params, x)
        });
        let v = stream(g, self.cfg.no_visual, visual, self.visual.out_channels, &|g, x| {
            self.visual.forward(g, &self.params, x)
        });
        g.concat_channels(&[m, v])
    }

    /// Generated features `[B, 64, target_t]`.
    pub fn forward(&self, g: &mut Graph, motion: Var, visual: Var, target_t: usize) -> Var {
        let fused = self.fuse(g, motion, visual, target_t);
        self.vq.forward(g, &self.params, fused)
    }

    pub fn check_inputs(&self, m: &MotionSequence, v: &VisualFeatureSequence) -> Result<()> {
        if m.channels.nrows() != self.cfg.motion.channels() {
            return Err(Error::Shape(format!(
                "motion has {} channels, model expects {}",
                m.channels.nrows(),
                self.cfg.motion.channels()
            )));
        }
        if m.frames() < MIN_MOTION_FRAMES {
            return Err(Error::InvalidInput(format!(
                "motion of {} frames is shorter than the encoder minimum {MIN_MOTION_FRAMES}",
                m.frames()
            )));
        }
        if v.features.nrows() != VISUAL_DIM || v.windows() == 0 {
            return Err(Error::Shape(format!("visual features must be [{VISUAL_DIM}, T>0], got {:?}", v.features.dim())));
        }
        Ok(())
    }

    /// Inference for one clip.
    pub fn generate_vq(&self, m: &MotionSequence, v: &VisualFeatureSequence, target_t: usize) -> Result<VQSequence> {
        Ok(self.generate_batch(&[m], &[v], target_t)?.remove(0))
    }

    pub fn generate_batch(
        &self,
        ms: &[&MotionSequence],
        vs: &[&VisualFeatureSequence],
        target_t: usize,
    ) -> Result<Vec<VQSequence>> {
        if target_t == 0 {
            return Err(Error::InvalidInput("target length must be positive".into()));
        }
        for (m, v) in ms.iter().zip(vs) {
            self.check_inputs(m, v)?;
        }
        let mut g = Graph::new();
        let (mv, vv) = self.input_vars(&mut g, ms, vs)?;
        let y = self.forward(&mut g, mv, vv, target_t);
        let out = g.value(y);
        Ok((0..ms.len())
            .map(|b| VQSequence {
                features: batch_item(out, b),
                level: self.cfg.level,
            })
            .collect())
    }

    /// Batched input tensors; all clips must share their frame counts.
    pub fn input_vars(
        &self,
        g: &mut Graph,
        ms: &[&MotionSequence],
        vs: &[&VisualFeatureSequence],
    ) -> Result<(Var, Var)> {
        let mm: Vec<_> = ms.iter().map(|m| &m.channels).collect();
        let vm: Vec<_> = vs.iter().map(|v| &v.features).collect();
        if mm.iter().any(|m| m.dim() != mm[0].dim()) || vm.iter().any(|v| v.dim() != vm[0].dim()) {
            return Err(Error::Shape("batch clips differ in length".into()));
        }
        Ok((g.constant(batch_tensor(&mm)), g.constant(batch_tensor(&vm))))
    }
}
