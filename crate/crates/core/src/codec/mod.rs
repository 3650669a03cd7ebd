//! Per-level VQ audio codec: strided conv encoder, nearest-neighbour
//! codebook lookup and a mirrored transposed-conv decoder.

mod finetune;
mod train;

pub use finetune::{finetune_decoder, FinetuneConfig, FinetuneStats};
pub use train::{codebook_usage, pretrain_codec, reconstruction_l1, PretrainConfig, PretrainStats};

use std::fmt;
use std::str::FromStr;

use d2m_autograd::nn::{Conv1d, Conv1dConfig, ConvTranspose1d};
use d2m_autograd::{Builder, Graph, ParamStore, Var};
use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelParams, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::layers::{batch_item, batch_tensor, signal_tensor, ResidualStack, LEAK};

/// Width of every codebook entry and generated feature column.
pub const CODE_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    High,
    Low,
}

impl Level {
    /// Samples per code.
    pub fn hop(self) -> usize {
        match self {
            Level::High => 128,
            Level::Low => 32,
        }
    }

    /// Encoder strides, applied in order; their product is the hop.
    pub fn strides(self) -> &'static [usize] {
        match self {
            Level::High => &[4, 4, 8],
            Level::Low => &[4, 8],
        }
    }

    /// Code count for a clip of `samples` samples.
    pub fn codes_for(self, samples: usize) -> usize {
        samples / self.hop()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::High => "high",
            Level::Low => "low",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Level::High),
            "low" => Ok(Level::Low),
            other => Err(Error::Config(format!("unknown level {other:?} (expected high or low)"))),
        }
    }
}

/// `[K, D]` matrix of code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Array2<f64>,
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidInput("empty codebook".into()));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Index of the nearest entry by squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, column: ArrayView1<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.entries.rows().into_iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in column.iter().zip(e.iter()) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Continuous or quantized `[D, T]` feature sequence of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct VQSequence {
    pub features: Array2<f64>,
    pub level: Level,
}

impl VQSequence {
    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.ncols() == 0
    }

    pub fn hop(&self) -> usize {
        self.level.hop()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeIndices {
    pub indices: Vec<usize>,
}

/// Per time step nearest-entry indices and the corresponding entries.
pub fn quantize(f: &VQSequence, cb: &Codebook) -> Result<(CodeIndices, VQSequence)> {
    if f.features.nrows() != cb.dim() {
        return Err(Error::Shape(format!(
            "feature dimension {} does not match codebook dimension {}",
            f.features.nrows(),
            cb.dim()
        )));
    }
    let indices: Vec<usize> = f.features.columns().into_iter().map(|c| cb.nearest(c)).collect();
    let features = Array2::from_shape_fn(f.features.dim(), |(d, t)| cb.entries[[indices[t], d]]);
    Ok((
        CodeIndices { indices },
        VQSequence {
            features,
            level: f.level,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub level: Level,
    pub codebook_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl CodecConfig {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            codebook_size: 512,
            channels: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv1d,
    res: ResidualStack,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    input: Conv1d,
    stages: Vec<Stage>,
    output: Conv1d,
}

fn strided(stride: usize) -> Conv1dConfig {
    Conv1dConfig {
        stride,
        pad_left: stride / 2,
        pad_right: stride / 2,
        ..Conv1dConfig::default()
    }
}

impl Encoder {
    fn new(vb: &mut Builder<'_, ChaCha8Rng>, level: Level, c: usize) -> Self {
        let input = Conv1d::new(&mut vb.pp("input"), 1, c, 7, Conv1dConfig::same(7, 1, 1));
        let stages = level
            .strides()
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut st = vb.pp(&format!("stage{i}"));
                Stage {
                    res: ResidualStack::new(&mut st.pp("res"), c, &[1, 3]),
                    conv: Conv1d::new(&mut st.pp("down"), c, c, 2 * s, strided(s)),
                }
            })
            .collect();
        let output = Conv1d::new(&mut vb.pp("output"), c, CODE_DIM, 3, Conv1dConfig::same(3, 1, 1));
        Self { input, stages, output }
    }

    /// `[B, 1, L]` to `[B, D, floor(L / hop)]`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let mut h = self.input.forward(g, p, x);
        for st in &self.stages {
            h = st.res.forward(g, p, h);
            h = g.leaky_relu(h, LEAK);
            h = st.conv.forward(g, p, h);
        }
        let h = g.leaky_relu(h, LEAK);
        self.output.forward(g, p, h)
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    conv: ConvTranspose1d,
    res: ResidualStack,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    input: Conv1d,
    stages: Vec<UpStage>,
    output: Conv1d,
}

impl Decoder {
    fn new(vb: &mut Builder<'_, ChaCha8Rng>, level: Level, c: usize) -> Self {
        let input = Conv1d::new(&mut vb.pp("input"), CODE_DIM, c, 7, Conv1dConfig::same(7, 1, 1));
        let stages = level
            .strides()
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &s)| {
                let mut st = vb.pp(&format!("stage{i}"));
                UpStage {
                    conv: ConvTranspose1d::new(&mut st.pp("up"), c, c, 2 * s, strided(s)),
                    res: ResidualStack::new(&mut st.pp("res"), c, &[1, 3]),
                }
            })
            .collect();
        let output = Conv1d::new(&mut vb.pp("output"), c, 1, 7, Conv1dConfig::same(7, 1, 1));
        Self { input, stages, output }
    }

    /// `[B, D, T]` to `[B, 1, T * hop]`, bounded by tanh.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let mut h = self.input.forward(g, p, x);
        for st in &self.stages {
            h = g.leaky_relu(h, LEAK);
            h = st.conv.forward(g, p, h);
            h = st.res.forward(g, p, h);
        }
        let h = g.leaky_relu(h, LEAK);
        let h = self.output.forward(g, p, h);
        g.tanh(h)
    }
}

/// One trained codec level: encoder, codebook and decoder.
#[derive(Debug)]
pub struct CodecLevel {
    pub cfg: CodecConfig,
    pub mel: MelParams,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub encoder_params: ParamStore,
    pub decoder_params: ParamStore,
    pub codebook: Codebook,
}

impl Clone for CodecLevel {
    fn clone(&self) -> Self {
        let mut copy = Self::new(self.cfg);
        copy.mel = self.mel;
        copy.encoder_params.load_from(|n| self.encoder_params.id_of(n).map(|id| self.encoder_params.get(id)));
        copy.decoder_params.load_from(|n| self.decoder_params.id_of(n).map(|id| self.decoder_params.get(id)));
        copy.codebook = self.codebook.clone();
        copy
    }
}

impl CodecLevel {
    /// Randomly initialized codec; the codebook starts at zero and is
    /// normally seeded from encoder outputs by pretraining.
    pub fn new(cfg: CodecConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut encoder_params = ParamStore::new();
        let mut decoder_params = ParamStore::new();
        let encoder = Encoder::new(&mut Builder::new(&mut encoder_params, &mut rng, "encoder"), cfg.level, cfg.channels);
        let decoder = Decoder::new(&mut Builder::new(&mut decoder_params, &mut rng, "decoder"), cfg.level, cfg.channels);
        Self {
            cfg,
            mel: MelParams::default(),
            encoder,
            decoder,
            encoder_params,
            decoder_params,
            codebook: Codebook {
                entries: Array2::zeros((cfg.codebook_size, CODE_DIM)),
            },
        }
    }

    pub fn level(&self) -> Level {
        self.cfg.level
    }

    pub fn hop(&self) -> usize {
        self.cfg.level.hop()
    }

    fn check_input(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate() != SAMPLE_RATE {
            return Err(Error::InvalidInput(format!("codec expects {SAMPLE_RATE} Hz audio, got {}", w.sample_rate())));
        }
        if w.len() < self.hop() {
            return Err(Error::InvalidInput(format!(
                "clip of {} samples is shorter than one hop ({})",
                w.len(),
                self.hop()
            )));
        }
        Ok(())
    }

    /// Continuous encoder output `[D, floor(n / hop)]`.
    pub fn encode(&self, w: &Waveform) -> Result<VQSequence> {
        Ok(self.encode_batch(&[w])?.remove(0))
    }

    /// Batched [`encode`](Self::encode); clips are truncated to whole hops
    /// and must share a length.
    pub fn encode_batch(&self, ws: &[&Waveform]) -> Result<Vec<VQSequence>> {
        for w in ws {
            self.check_input(w)?;
        }
        let len = self.cfg.level.codes_for(ws[0].len()) * self.hop();
        if ws.iter().any(|w| self.cfg.level.codes_for(w.len()) * self.hop() != len) {
            return Err(Error::Shape("batch clips differ in length".into()));
        }
        let signals: Vec<&[f64]> = ws.iter().map(|w| &w.samples()[..len]).collect();
        let mut g = Graph::new();
        let x = g.constant(signal_tensor(&signals));
        let z = self.encoder.forward(&mut g, &self.encoder_params, x);
        let out = g.value(z);
        Ok((0..ws.len())
            .map(|b| VQSequence {
                features: batch_item(out, b),
                level: self.level(),
            })
            .collect())
    }

    pub fn quantize(&self, f: &VQSequence) -> Result<(CodeIndices, VQSequence)> {
        quantize(f, &self.codebook)
    }

    /// Waveform of `T * hop` samples.
    pub fn decode(&self, q: &VQSequence) -> Result<Waveform> {
        Ok(self.decode_batch(&[q])?.remove(0))
    }

    pub fn decode_batch(&self, qs: &[&VQSequence]) -> Result<Vec<Waveform>> {
        for q in qs {
            if q.level != self.level() {
                return Err(Error::InvalidInput(format!(
                    "{} level sequence given to the {} level decoder",
                    q.level,
                    self.level()
                )));
            }
            if q.features.nrows() != CODE_DIM || q.is_empty() {
                return Err(Error::Shape(format!("expected [{CODE_DIM}, T>0], got {:?}", q.features.dim())));
            }
        }
        let mats: Vec<&Array2<f64>> = qs.iter().map(|q| &q.features).collect();
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&mats));
        let y = self.decoder.forward(&mut g, &self.decoder_params, x);
        let out = g.value(y);
        (0..qs.len())
            .map(|b| Waveform::new(batch_item(out, b).into_raw_vec_and_offset().0, SAMPLE_RATE))
            .collect()
    }

    /// Encode, quantize, decode.
    pub fn reconstruct(&self, w: &Waveform) -> Result<Waveform> {
        let f = self.encode(w)?;
        let (_, q) = self.quantize(&f)?;
        self.decode(&q)
    }
}
