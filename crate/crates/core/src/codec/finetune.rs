//! Adversarial fine-tuning of a codec decoder on quantized codes.

use std::rc::Rc;

use d2m_autograd::{Adam, AdamConfig, Graph};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CodecLevel;
use crate::audio::{LogMelOp, Waveform};
use crate::error::{Error, Result};
use crate::layers::{batch_tensor, signal_tensor};
use crate::losses::{feature_matching_loss, hinge_d_loss, hinge_g_loss, mel_loss};
use crate::model::{DiscriminatorConfig, MultiScaleDiscriminator};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop_samples: usize,
    pub lr: f64,
    pub lambda_fm: f64,
    pub lambda_mel: f64,
    /// Channel divisor of the waveform discriminator.
    pub disc_width_div: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            crop_samples: 8192,
            lr: 1e-5,
            lambda_fm: 3.0,
            lambda_mel: 15.0,
            disc_width_div: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneStats {
    pub g_loss: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub mel: Vec<f64>,
}

/// Trains only the decoder of `codec` against a multi-scale waveform
/// discriminator. The encoder and codebook are left untouched.
pub fn finetune_decoder(codec: &CodecLevel, corpus: &[Waveform], cfg: &FinetuneConfig) -> Result<(CodecLevel, FinetuneStats)> {
    let mut out = codec.clone();
    let mut stats = FinetuneStats::default();
    if cfg.steps == 0 {
        return Ok((out, stats));
    }
    if corpus.is_empty() {
        return Err(Error::Data("empty fine-tuning corpus".into()));
    }
    let hop = codec.hop();
    let crop = (cfg.crop_samples / hop) * hop;
    if crop < codec.mel.n_fft {
        return Err(Error::Config(format!(
            "fine-tuning crop of {} samples is shorter than one mel frame",
            cfg.crop_samples
        )));
    }
    let mut disc = MultiScaleDiscriminator::new(DiscriminatorConfig {
        seed: cfg.seed.wrapping_add(2),
        ..DiscriminatorConfig::for_waveform(cfg.disc_width_div)
    })?;
    disc.check_len(crop)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut g_opt = Adam::new(&out.decoder_params, adam);
    let mut d_opt = Adam::new(&disc.params, adam);
    let mel_op = Rc::new(LogMelOp::new(codec.mel));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for step in 1..=cfg.steps {
        let clips: Vec<Waveform> = (0..cfg.batch_size)
            .map(|_| {
                let w = corpus.choose(&mut rng).unwrap();
                let start = if w.len() > crop { rng.random_range(0..=w.len() - crop) } else { 0 };
                w.segment(start, crop)
            })
            .collect();
        let refs: Vec<&Waveform> = clips.iter().collect();
        let codes: Vec<_> = out
            .encode_batch(&refs)?
            .iter()
            .map(|f| out.quantize(f).map(|(_, q)| q.features))
            .collect::<Result<_>>()?;
        let code_refs: Vec<_> = codes.iter().collect();
        let q = batch_tensor(&code_refs);
        let signals: Vec<&[f64]> = clips.iter().map(|c| c.samples()).collect();
        let x = signal_tensor(&signals);

        // Discriminator step on a detached decoding.
        let fake = {
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let y = out.decoder.forward(&mut g, &out.decoder_params, qv);
            g.value(y).clone()
        };
        let mut g = Graph::training();
        g.train_store(&disc.params);
        let xr = g.constant(x.clone());
        let xf = g.constant(fake);
        let real = disc.forward(&mut g, xr)?;
        let fk = disc.forward(&mut g, xf)?;
        let d_loss = hinge_d_loss(&mut g, &real.scores, &fk.scores)?;
        let dl = g.scalar(d_loss);
        let grads = g.backward(d_loss);
        d_opt.step(&mut disc.params, &grads);

        // Decoder step.
        let mut g = Graph::training();
        g.train_store(&out.decoder_params);
        let qv = g.constant(q);
        let y = out.decoder.forward(&mut g, &out.decoder_params, qv);
        let xr = g.constant(x);
        let real = disc.forward(&mut g, xr)?;
        let fk = disc.forward(&mut g, y)?;
        let adv = hinge_g_loss(&mut g, &fk.scores)?;
        let fm = feature_matching_loss(&mut g, &real.features, &fk.features)?;
        let mel = mel_loss(&mut g, &mel_op, xr, y)?;
        let fm_w = g.scale(fm, cfg.lambda_fm);
        let mel_w = g.scale(mel, cfg.lambda_mel);
        let total = g.add(adv, fm_w);
        let total = g.add(total, mel_w);
        let (gl, ml) = (g.scalar(total), g.scalar(mel));
        if !(gl.is_finite() && dl.is_finite()) {
            return Err(Error::Numeric(format!(
                "decoder fine-tuning diverged at step {step}: generator {gl}, discriminator {dl}"
            )));
        }
        let grads = g.backward(total);
        g_opt.step(&mut out.decoder_params, &grads);
        stats.g_loss.push(gl);
        stats.d_loss.push(dl);
        stats.mel.push(ml);
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, Level};

    #[test]
    fn zero_steps_leave_the_codec_unchanged() {
        let codec = CodecLevel::new(CodecConfig {
            channels: 4,
            codebook_size: 8,
            ..CodecConfig::new(Level::Low)
        });
        let cfg = FinetuneConfig {
            steps: 0,
            ..FinetuneConfig::default()
        };
        let (tuned, stats) = finetune_decoder(&codec, &[], &cfg).unwrap();
        assert!(stats.g_loss.is_empty());
        let w = Waveform::new((0..2048).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(), 22050).unwrap();
        assert_eq!(tuned.reconstruct(&w).unwrap(), codec.reconstruct(&w).unwrap());
    }

    #[test]
    fn only_the_decoder_moves() {
        let codec = CodecLevel::new(CodecConfig {
            channels: 4,
            codebook_size: 8,
            ..CodecConfig::new(Level::Low)
        });
        let w = Waveform::new((0..4096).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(), 22050).unwrap();
        let cfg = FinetuneConfig {
            steps: 2,
            batch_size: 1,
            crop_samples: 2048,
            lr: 1e-3,
            disc_width_div: 16,
            ..FinetuneConfig::default()
        };
        let (tuned, stats) = finetune_decoder(&codec, std::slice::from_ref(&w), &cfg).unwrap();
        assert_eq!(stats.g_loss.len(), 2);
        assert_eq!(tuned.encode(&w).unwrap(), codec.encode(&w).unwrap());
        assert_eq!(tuned.codebook, codec.codebook);
        assert_ne!(tuned.reconstruct(&w).unwrap(), codec.reconstruct(&w).unwrap());
    }
}
