//! Per-level adversarial training, checkpoints and end-to-end generation.

mod config;
mod dataset;

pub use config::{parse_kv, TrainConfig, TRAIN_KEYS};
pub use dataset::{clip_visual, load_split_clips, load_train_set, TrainSample, TrainSet};

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use d2m_autograd::{Adam, AdamConfig, Graph, Tensor, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{spectral_denoise, LogMelOp, Waveform};
use crate::checkpoint::Archive;
use crate::codec::{CodeIndices, CodecLevel};
use crate::error::{Error, Result};
use crate::layers::{apply_updates, batch_tensor, signal_tensor};
use crate::losses::{
    commitment_loss, feature_matching_loss, hinge_d_loss, hinge_g_loss, mel_loss, total_g_loss, waveform_loss,
    weighted_total, LossReport, LossTerms,
};
use crate::model::{Generator, MotionSequence, MultiScaleDiscriminator, VisualFeatureSequence};

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    #[serde(flatten)]
    pub g: LossReport,
}

/// Complete training state of one level.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: MultiScaleDiscriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub step: u64,
    pub metrics_tail: VecDeque<StepMetrics>,
}

fn adam(cfg: &TrainConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        clip_norm: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
        ..AdamConfig::default()
    }
}

impl Checkpoint {
    /// Freshly initialized networks and optimizers, deterministic in the seed.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.model_config())?;
        let discriminator = MultiScaleDiscriminator::new(config.disc_config())?;
        let g_opt = Adam::new(&generator.params, adam(config, config.g_lr));
        let d_opt = Adam::new(&discriminator.params, adam(config, config.d_lr));
        Ok(Self {
            config: config.clone(),
            generator,
            discriminator,
            g_opt,
            d_opt,
            step: 0,
            metrics_tail: VecDeque::new(),
        })
    }

    fn archive(&self) -> Result<Archive> {
        let meta = serde_json::json!({
            "kind": "d2m",
            "config": self.config,
            "step": self.step,
            "g_opt_step": self.g_opt.step_count(),
            "d_opt_step": self.d_opt.step_count(),
            "metrics_tail": self.metrics_tail,
        });
        let mut a = Archive::new(meta);
        a.add_store("generator", &self.generator.params);
        a.add_store("discriminator", &self.discriminator.params);
        a.add_adam("g_opt", &self.g_opt, &self.generator.params);
        a.add_adam("d_opt", &self.d_opt, &self.discriminator.params);
        Ok(a)
    }

    /// Atomic write; returns the content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        self.archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("d2m") {
            return Err(bad("not a model checkpoint"));
        }
        let field = |k: &str| a.meta.get(k).cloned().ok_or_else(|| bad(&format!("missing {k}")));
        let config: TrainConfig = serde_json::from_value(field("config")?).map_err(|e| bad(&e.to_string()))?;
        let mut ck = Self::init(&config)?;
        ck.step = serde_json::from_value(field("step")?).map_err(|e| bad(&e.to_string()))?;
        ck.metrics_tail = serde_json::from_value(field("metrics_tail")?).map_err(|e| bad(&e.to_string()))?;
        let g_step: u64 = serde_json::from_value(field("g_opt_step")?).map_err(|e| bad(&e.to_string()))?;
        let d_step: u64 = serde_json::from_value(field("d_opt_step")?).map_err(|e| bad(&e.to_string()))?;
        a.load_store("generator", &mut ck.generator.params)?;
        a.load_store("discriminator", &mut ck.discriminator.params)?;
        a.load_adam("g_opt", &mut ck.g_opt, &ck.generator.params, g_step)?;
        a.load_adam("d_opt", &mut ck.d_opt, &ck.discriminator.params, d_step)?;
        Ok(ck)
    }
}

/// Where a run reports progress.
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// Receives one JSON object per step.
    pub metrics: Option<&'a mut dyn Write>,
    /// Written with the last good state if a loss turns non-finite.
    pub abort_checkpoint: Option<&'a Path>,
}

/// Stacked inputs and targets of a minibatch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub motion: Tensor,
    pub visual: Tensor,
    /// Continuous codec features of the ground truth.
    pub target: Tensor,
    /// Quantized ground-truth features.
    pub codes: Tensor,
    pub audio: Vec<Vec<f64>>,
}

pub fn gather(set: &TrainSet, idx: &[usize]) -> Result<TrainBatch> {
    let pick = |f: &dyn Fn(&TrainSample) -> &Array2<f64>| -> Result<Tensor> {
        let items: Vec<&Array2<f64>> = idx.iter().map(|&i| f(&set.samples[i])).collect();
        if items.iter().any(|m| m.dim() != items[0].dim()) {
            return Err(Error::Data("training clips differ in shape; check the clip length and frame rates".into()));
        }
        Ok(batch_tensor(&items))
    };
    Ok(TrainBatch {
        motion: pick(&|s| &s.motion.channels)?,
        visual: pick(&|s| &s.visual.features)?,
        target: pick(&|s| &s.target)?,
        codes: pick(&|s| &s.codes)?,
        audio: idx.iter().map(|&i| set.samples[i].audio.samples().to_vec()).collect(),
    })
}

/// Seeded epoch-wise shuffling.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn non_finite(step: u64, what: &str, v: f64) -> Error {
    Error::Numeric(format!("{what} loss became {v} at step {step}"))
}

/// State shared by the steps of one run.
struct Run<'a> {
    cfg: TrainConfig,
    codec: &'a CodecLevel,
    mel: Rc<LogMelOp>,
    sampler: Sampler,
    crop_rng: ChaCha8Rng,
}

impl Run<'_> {
    /// Feature-step span decoded for the waveform and mel losses.
    fn crop(&mut self, t: usize) -> (usize, usize) {
        let hop = self.codec.hop();
        let min_len = self.codec.mel.n_fft.div_ceil(hop).min(t);
        let want = (self.cfg.wave_crop_seconds * crate::audio::SAMPLE_RATE as f64 / hop as f64).round() as usize;
        if want == 0 || want >= t {
            return (0, t);
        }
        let len = want.max(min_len);
        (self.crop_rng.random_range(0..=t - len), len)
    }

    fn step(&mut self, ck: &mut Checkpoint, set: &TrainSet) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        let step = ck.step + 1;
        let batch = gather(set, &self.sampler.next(cfg.batch_size))?;
        let t = batch.target.shape()[2];
        let gen = &ck.generator;
        let disc = &ck.discriminator;

        // Discriminator step against a detached generation.
        let fake = {
            let mut g = Graph::training();
            let m = g.constant(batch.motion.clone());
            let v = g.constant(batch.visual.clone());
            let y = gen.forward(&mut g, m, v, t);
            g.value(y).clone()
        };
        let mut g = Graph::training();
        g.train_store(&disc.params);
        let real = g.constant(batch.target.clone());
        let fake = g.constant(fake);
        let dr = disc.forward(&mut g, real)?;
        let df = disc.forward(&mut g, fake)?;
        let d_loss = hinge_d_loss(&mut g, &dr.scores, &df.scores)?;
        let dl = g.scalar(d_loss);
        if !dl.is_finite() {
            return Err(non_finite(step, "discriminator", dl));
        }
        let grads = g.backward(d_loss);
        ck.d_opt.step(&mut ck.discriminator.params, &grads);

        // Generator step.
        let span = self.crop(t);
        let gen = &ck.generator;
        let mut g = Graph::training();
        g.train_store(&gen.params);
        let loss = generator_loss(&mut g, gen, &ck.discriminator, self.codec, &self.mel, &cfg, &batch, span)?;
        let total = loss.total;
        let report = total_g_loss(loss.terms(&g), &cfg.weights).map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        let graph_total = g.scalar(total);
        if !graph_total.is_finite() {
            return Err(non_finite(step, "generator", graph_total));
        }
        debug_assert_eq!(graph_total.to_bits(), report.total.to_bits());
        let grads = g.backward(total);
        ck.g_opt.step(&mut ck.generator.params, &grads);
        apply_updates(&mut ck.generator.params, &mut g);
        ck.step = step;
        Ok(StepMetrics {
            step,
            d_loss: dl,
            g: report,
        })
    }
}

/// Generator loss nodes; disabled terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adv: Var,
    pub fm: Option<Var>,
    pub code: Option<Var>,
    pub wav: Option<Var>,
    pub mel: Option<Var>,
}

impl GeneratorLoss {
    pub fn terms(&self, g: &Graph) -> LossTerms {
        let scalar = |v: Option<Var>| v.map(|v| g.scalar(v));
        LossTerms {
            adv: g.scalar(self.adv),
            fm: scalar(self.fm),
            code: scalar(self.code),
            wav: scalar(self.wav),
            mel: scalar(self.mel),
        }
    }
}

/// Builds the weighted generator objective for `batch` on `g`. The
/// waveform and mel terms decode the feature span `(start, len)` through
/// the frozen codec decoder.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    g: &mut Graph,
    gen: &Generator,
    disc: &MultiScaleDiscriminator,
    codec: &CodecLevel,
    mel_op: &Rc<LogMelOp>,
    cfg: &TrainConfig,
    batch: &TrainBatch,
    (start, len): (usize, usize),
) -> Result<GeneratorLoss> {
    let t = batch.target.shape()[2];
    let m = g.constant(batch.motion.clone());
    let v = g.constant(batch.visual.clone());
    let y = gen.forward(g, m, v, t);
    let real = g.constant(batch.target.clone());
    let dr = disc.forward(g, real)?;
    let df = disc.forward(g, y)?;
    let adv = hinge_g_loss(g, &df.scores)?;
    let fm = (!cfg.disable_fm)
        .then(|| feature_matching_loss(g, &dr.features, &df.features))
        .transpose()?;
    let code = if cfg.disable_code {
        None
    } else {
        let q = g.constant(batch.codes.clone());
        Some(commitment_loss(g, y, q)?)
    };
    let (mut wav, mut mel) = (None, None);
    if !(cfg.disable_wav && cfg.disable_mel) {
        if start + len > t || len == 0 {
            return Err(Error::InvalidInput(format!("feature span {start}+{len} outside {t} steps")));
        }
        let hop = codec.hop();
        let part = if len == t { y } else { g.narrow_time(y, start, len) };
        let decoded = codec.decoder.forward(g, &codec.decoder_params, part);
        let gt: Vec<&[f64]> = batch.audio.iter().map(|a| &a[start * hop..(start + len) * hop]).collect();
        let gt = g.constant(signal_tensor(&gt));
        if !cfg.disable_wav {
            wav = Some(waveform_loss(g, gt, decoded)?);
        }
        if !cfg.disable_mel {
            mel = Some(mel_loss(g, mel_op, gt, decoded)?);
        }
    }
    let total = weighted_total(g, adv, [fm, code, wav, mel], &cfg.weights);
    Ok(GeneratorLoss {
        total,
        adv,
        fm,
        code,
        wav,
        mel,
    })
}

/// Trains the level of `cfg` from a fresh initialization for
/// `cfg.max_steps` steps. The codec stays frozen.
pub fn train_level(cfg: &TrainConfig, set: &TrainSet, codec: &CodecLevel, sinks: TrainSinks<'_>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::init(cfg)?;
    continue_training(&mut ck, set, codec, cfg.max_steps, sinks)?;
    Ok(ck)
}

/// Runs `steps` more alternating discriminator/generator updates.
pub fn continue_training(
    ck: &mut Checkpoint,
    set: &TrainSet,
    codec: &CodecLevel,
    steps: usize,
    mut sinks: TrainSinks<'_>,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let cfg = ck.config.clone();
    if codec.level() != cfg.level {
        return Err(Error::Config(format!("{} level codec given for a {} level run", codec.level(), cfg.level)));
    }
    let len = cfg.target_len();
    if set.samples.iter().any(|s| s.target.ncols() != len) {
        return Err(Error::Data(format!("training clips must have {len} target steps")));
    }
    let mut run = Run {
        mel: Rc::new(LogMelOp::new(codec.mel)),
        sampler: Sampler::new(set.len(), cfg.seed.wrapping_add(ck.step)),
        crop_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ck.step) ^ 0xc0de),
        cfg,
        codec,
    };
    for _ in 0..steps {
        match run.step(ck, set) {
            Ok(m) => {
                if let Some(w) = sinks.metrics.as_deref_mut() {
                    let line = serde_json::to_string(&m)?;
                    writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
                }
                ck.metrics_tail.push_back(m);
                while ck.metrics_tail.len() > ck.config.log_tail {
                    ck.metrics_tail.pop_front();
                }
            }
            Err(e) => {
                if let (Error::Numeric(_), Some(path)) = (&e, sinks.abort_checkpoint) {
                    ck.save(path)?;
                    log::error!("aborting: {e}; last good state written to {}", path.display());
                }
                return Err(e);
            }
        }
    }
    Ok(())
}

/// Generated audio with the codebook rows it was decoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMusic {
    pub audio: Waveform,
    pub indices: CodeIndices,
}

/// Conditioning inputs to features, codebook lookup, decoding and optional
/// denoising. The output holds `floor(clip_samples / hop) * hop` samples.
pub fn generate_music(
    ck: &Checkpoint,
    codec: &CodecLevel,
    motion: &MotionSequence,
    visual: &VisualFeatureSequence,
    denoise: bool,
) -> Result<GeneratedMusic> {
    let cfg = &ck.config;
    if codec.level() != cfg.level {
        return Err(Error::Config(format!("{} level codec given for a {} level model", codec.level(), cfg.level)));
    }
    let need = cfg.clip_seconds * motion.frame_rate;
    if (motion.frames() as f64) + 0.5 < need {
        return Err(Error::InvalidInput(format!(
            "motion of {} frames is shorter than the {} s clip window",
            motion.frames(),
            cfg.clip_seconds
        )));
    }
    let frames = need.round() as usize;
    let motion = MotionSequence {
        channels: motion.channels.slice(ndarray::s![.., ..frames]).to_owned(),
        ..motion.clone()
    };
    let features = ck.generator.generate_vq(&motion, visual, cfg.target_len())?;
    let (indices, q) = codec.quantize(&features)?;
    let mut audio = codec.decode(&q)?;
    if denoise {
        audio = spectral_denoise(&audio);
    }
    Ok(GeneratedMusic { audio, indices })
}
