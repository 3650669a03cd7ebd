use d2m_autograd::nn::{Conv1d, Conv1dConfig};
use d2m_autograd::{Builder, Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::width;
use crate::error::{Error, Result};
use crate::layers::LEAK;

/// Intermediate feature maps returned by each block (all layers but the
/// final score conv).
pub const DISC_FEATURE_LAYERS: usize = 6;

/// Shortest input accepted at the coarsest scale: the first kernel width.
const MIN_COARSE_LEN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Channels of the sequence fed to each block (1 after reshaping).
    pub in_channels: usize,
    pub width_div: usize,
    /// Number of blocks / scales, 1 to 3.
    pub scales: usize,
    /// Flatten `[B, 64, T]` features time-major to `[B, 1, 64T]` first.
    pub reshape: bool,
    pub seed: u64,
}

impl DiscriminatorConfig {
    /// Discriminator over reshaped VQ sequences.
    pub fn for_vq(width_div: usize, scales: usize, reshape: bool) -> Self {
        Self {
            in_channels: if reshape { 1 } else { crate::codec::CODE_DIM },
            width_div,
            scales,
            reshape,
            seed: 1,
        }
    }

    /// Discriminator over raw waveforms.
    pub fn for_waveform(width_div: usize) -> Self {
        Self {
            in_channels: 1,
            width_div,
            scales: 3,
            reshape: false,
            seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.scales) {
            return Err(Error::Config(format!("discriminator scales must be 1, 2 or 3, got {}", self.scales)));
        }
        if self.width_div == 0 || self.in_channels == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    layers: Vec<Conv1d>,
}

impl Block {
    fn new(vb: &mut Builder<'_, ChaCha8Rng>, c_in: usize, div: usize) -> Self {
        // (kernel, stride, grouped, channels)
        let spec = [
            (15, 1, false, 16),
            (41, 4, true, 64),
            (41, 4, true, 256),
            (41, 4, true, 1024),
            (41, 4, true, 1024),
            (5, 1, false, 1024),
        ];
        let mut layers = Vec::new();
        let mut c = c_in;
        for (i, &(k, s, grouped, out)) in spec.iter().enumerate() {
            let out = width(out, div);
            // Full width: 4, 16, 64, 256 groups.
            let groups = if grouped { (c / 4).max(1) } else { 1 };
            let groups = if c % groups == 0 && out % groups == 0 { groups } else { 1 };
            let pad = (k - 1) / 2;
            layers.push(Conv1d::new(
                &mut vb.pp(&format!("layer{i}")),
                c,
                out,
                k,
                Conv1dConfig {
                    stride: s,
                    pad_left: pad,
                    pad_right: pad,
                    groups,
                    ..Conv1dConfig::default()
                },
            ));
            c = out;
        }
        layers.push(Conv1d::new(
            &mut vb.pp("score"),
            c,
            1,
            3,
            Conv1dConfig {
                pad_left: 1,
                pad_right: 1,
                ..Conv1dConfig::default()
            },
        ));
        Self { layers }
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> (Var, Vec<Var>) {
        let mut h = x;
        let mut features = Vec::with_capacity(DISC_FEATURE_LAYERS);
        let last = self.layers.len() - 1;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(g, p, h);
            if i < last {
                h = g.leaky_relu(h, LEAK);
                features.push(h);
            }
        }
        (h, features)
    }
}

/// Per-scale window scores `[B, 1, W_k]` and intermediate feature maps.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub scores: Vec<Var>,
    pub features: Vec<Vec<Var>>,
}

/// Blocks applied to the input and to 2x and 4x average-pooled copies.
#[derive(Debug)]
pub struct MultiScaleDiscriminator {
    pub cfg: DiscriminatorConfig,
    blocks: Vec<Block>,
    pub params: ParamStore,
}

impl MultiScaleDiscriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let mut vb = Builder::new(&mut params, &mut rng, "disc");
        let blocks = (0..cfg.scales)
            .map(|i| Block::new(&mut vb.pp(&format!("block{i}")), cfg.in_channels, cfg.width_div))
            .collect();
        Ok(Self { cfg, blocks, params })
    }

    /// Length of the sequence block `k` sees for a prepared input of `len`.
    pub fn scale_len(len: usize, k: usize) -> usize {
        (0..k).fold(len, |l, _| l / 2)
    }

    /// Applies the optional reshape. Inputs are `[B, C, T]`.
    pub fn prepare(&self, g: &mut Graph, x: Var) -> Var {
        if self.cfg.reshape {
            g.flatten_time_major(x)
        } else {
            x
        }
    }

    pub fn check_len(&self, prepared_len: usize) -> Result<()> {
        let coarse = Self::scale_len(prepared_len, self.cfg.scales - 1);
        if coarse < MIN_COARSE_LEN {
            return Err(Error::InvalidInput(format!(
                "sequence of {prepared_len} steps leaves {coarse} at the coarsest scale (< {MIN_COARSE_LEN})"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<DiscriminatorOutput> {
        let x = self.prepare(g, x);
        let shape = g.shape(x).to_vec();
        if shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {}",
                self.cfg.in_channels, shape[1]
            )));
        }
        self.check_len(shape[2])?;
        let mut scores = Vec::new();
        let mut features = Vec::new();
        let mut h = x;
        for (k, block) in self.blocks.iter().enumerate() {
            if k > 0 {
                h = g.avg_pool1d(h, 4, 2, 1);
            }
            let (s, f) = block.forward(g, &self.params, h);
            scores.push(s);
            features.push(f);
        }
        Ok(DiscriminatorOutput { scores, features })
    }
}
