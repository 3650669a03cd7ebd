//! VQ-VAE pretraining with an exponential-moving-average codebook.

use d2m_autograd::{Adam, AdamConfig, Graph};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CodecConfig, CodecLevel, Codebook, CODE_DIM};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::layers::signal_tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training crop length in samples; rounded down to whole hops.
    pub crop_samples: usize,
    pub lr: f64,
    pub commitment: f64,
    pub ema_decay: f64,
    /// Entries unused for this many consecutive steps are re-seeded.
    pub dead_code_steps: usize,
    /// Clips encoded to seed the initial codebook.
    pub init_clips: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            crop_samples: 4096,
            lr: 1e-3,
            commitment: 0.25,
            ema_decay: 0.99,
            dead_code_steps: 200,
            init_clips: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainStats {
    pub reconstruction: Vec<f64>,
    pub commitment: Vec<f64>,
    pub resets: usize,
}

struct EmaState {
    cluster_size: Array1<f64>,
    embed_sum: Array2<f64>,
    last_used: Vec<usize>,
}

fn crop_batch(corpus: &[Waveform], cfg: &PretrainConfig, crop: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..cfg.batch_size)
        .map(|_| {
            let w = corpus.choose(rng).expect("non-empty corpus");
            let start = if w.len() > crop { rng.random_range(0..=w.len() - crop) } else { 0 };
            w.segment(start, crop).into_samples()
        })
        .collect()
}

/// `[B, D, T]` tensor as a list of `D`-vectors.
fn columns(z: &ArrayD<f64>) -> Vec<Vec<f64>> {
    let (b, d, t) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let flat = z.as_slice().unwrap();
    let mut out = Vec::with_capacity(b * t);
    for bi in 0..b {
        for ti in 0..t {
            out.push((0..d).map(|di| flat[(bi * d + di) * t + ti]).collect());
        }
    }
    out
}

fn seed_codebook(codec: &mut CodecLevel, corpus: &[Waveform], cfg: &PretrainConfig, crop: usize, rng: &mut ChaCha8Rng) {
    let n = cfg.init_clips.min(corpus.len()).max(1);
    let clips: Vec<Vec<f64>> = corpus[..n].iter().map(|w| w.segment(0, crop).into_samples()).collect();
    let refs: Vec<&[f64]> = clips.iter().map(|c| c.as_slice()).collect();
    let mut g = Graph::new();
    let x = g.constant(signal_tensor(&refs));
    let z = codec.encoder.forward(&mut g, &codec.encoder_params, x);
    let pool = columns(g.value(z));
    let spread = {
        let all: Vec<f64> = pool.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt()
    };
    let jitter = Normal::new(0.0, 0.01 * spread.max(1e-6)).unwrap();
    let k = codec.cfg.codebook_size;
    let mut entries = Array2::zeros((k, CODE_DIM));
    for i in 0..k {
        let v = pool.choose(rng).unwrap();
        for d in 0..CODE_DIM {
            entries[[i, d]] = v[d] + jitter.sample(rng);
        }
    }
    codec.codebook = Codebook { entries };
}

/// Trains encoder, decoder and codebook on random crops of `corpus`.
/// Gradients reach the encoder through a straight-through estimator; the
/// codebook follows encoder outputs by EMA.
pub fn pretrain_codec(corpus: &[Waveform], codec_cfg: CodecConfig, cfg: &PretrainConfig) -> Result<(CodecLevel, PretrainStats)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty codec training corpus".into()));
    }
    let hop = codec_cfg.level.hop();
    let crop = (cfg.crop_samples / hop) * hop;
    if crop == 0 {
        return Err(Error::Config(format!("crop of {} samples is shorter than one hop", cfg.crop_samples)));
    }
    if let Some(w) = corpus.iter().find(|w| w.len() < hop) {
        return Err(Error::Data(format!("corpus clip of {} samples is shorter than one hop", w.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codec = CodecLevel::new(codec_cfg);
    seed_codebook(&mut codec, corpus, cfg, crop, &mut rng);

    let k = codec_cfg.codebook_size;
    let mut ema = EmaState {
        cluster_size: Array1::ones(k),
        embed_sum: codec.codebook.entries.clone(),
        last_used: vec![0; k],
    };
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        ..AdamConfig::default()
    };
    let mut enc_opt = Adam::new(&codec.encoder_params, adam_cfg);
    let mut dec_opt = Adam::new(&codec.decoder_params, adam_cfg);
    let mut stats = PretrainStats::default();

    for step in 1..=cfg.steps {
        let batch = crop_batch(corpus, cfg, crop, &mut rng);
        let refs: Vec<&[f64]> = batch.iter().map(|c| c.as_slice()).collect();
        let mut g = Graph::training();
        g.train_store(&codec.encoder_params);
        g.train_store(&codec.decoder_params);
        let x = g.constant(signal_tensor(&refs));
        let z = codec.encoder.forward(&mut g, &codec.encoder_params, x);
        let zval = g.value(z).clone();
        let (b, t) = (zval.shape()[0], zval.shape()[2]);
        let cols = columns(&zval);
        let idx: Vec<usize> = cols
            .iter()
            .map(|c| codec.codebook.nearest(ndarray::ArrayView1::from(c.as_slice())))
            .collect();
        let q = ArrayD::from_shape_fn(IxDyn(&[b, CODE_DIM, t]), |ix| codec.codebook.entries[[idx[ix[0] * t + ix[2]], ix[1]]]);

        let offset = g.constant(&q - &zval);
        let st = g.add(z, offset);
        let y = codec.decoder.forward(&mut g, &codec.decoder_params, st);
        let diff = g.sub(y, x);
        let ad = g.abs(diff);
        let recon = g.mean(ad);
        let qv = g.constant(q);
        let cd = g.sub(z, qv);
        let sq = g.square(cd);
        let commit = g.mean(sq);
        let commit_w = g.scale(commit, cfg.commitment);
        let loss = g.add(recon, commit_w);
        let (r, c) = (g.scalar(recon), g.scalar(commit));
        if !(r.is_finite() && c.is_finite()) {
            return Err(Error::Numeric(format!(
                "codec pretraining diverged at step {step}: reconstruction {r}, commitment {c}"
            )));
        }
        stats.reconstruction.push(r);
        stats.commitment.push(c);
        let grads = g.backward(loss);
        enc_opt.step(&mut codec.encoder_params, &grads);
        dec_opt.step(&mut codec.decoder_params, &grads);

        // EMA codebook update.
        let decay = cfg.ema_decay;
        let mut counts = Array1::<f64>::zeros(k);
        let mut sums = Array2::<f64>::zeros((k, CODE_DIM));
        for (col, &i) in cols.iter().zip(&idx) {
            counts[i] += 1.0;
            for d in 0..CODE_DIM {
                sums[[i, d]] += col[d];
            }
            ema.last_used[i] = step;
        }
        ema.cluster_size = &ema.cluster_size * decay + &counts * (1.0 - decay);
        ema.embed_sum = &ema.embed_sum * decay + &sums * (1.0 - decay);
        for i in 0..k {
            if step - ema.last_used[i] >= cfg.dead_code_steps {
                let v = cols.choose(&mut rng).unwrap();
                for d in 0..CODE_DIM {
                    ema.embed_sum[[i, d]] = v[d];
                }
                ema.cluster_size[i] = 1.0;
                ema.last_used[i] = step;
                stats.resets += 1;
            }
        }
        codec.codebook.entries = &ema.embed_sum / &ema.cluster_size.view().insert_axis(Axis(1));
    }
    Ok((codec, stats))
}

/// Mean absolute error of encode/quantize/decode over `clips`.
pub fn reconstruction_l1(codec: &CodecLevel, clips: &[Waveform]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Data("no clips to evaluate".into()));
    }
    let mut total = 0.0;
    for w in clips {
        let y = codec.reconstruct(w)?;
        let err: f64 = y.samples().iter().zip(w.samples()).map(|(a, b)| (a - b).abs()).sum();
        total += err / y.len() as f64;
    }
    Ok(total / clips.len() as f64)
}

/// Fraction of codebook entries selected at least once over `clips`.
pub fn codebook_usage(codec: &CodecLevel, clips: &[Waveform]) -> Result<f64> {
    let mut used = vec![false; codec.codebook.size()];
    for w in clips {
        let (idx, _) = codec.quantize(&codec.encode(w)?)?;
        for i in idx.indices {
            used[i] = true;
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use crate::codec::{quantize, Level, VQSequence};
    use std::f64::consts::PI;

    fn sine_corpus(n: usize, len: usize) -> Vec<Waveform> {
        (0..n)
            .map(|i| {
                let f = 220.0 + 40.0 * i as f64;
                Waveform::new(
                    (0..len).map(|t| 0.5 * (2.0 * PI * f * t as f64 / SAMPLE_RATE as f64).sin()).collect(),
                    SAMPLE_RATE,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(pretrain_codec(&[], CodecConfig::new(Level::Low), &PretrainConfig::default()).is_err());
    }

    #[test]
    fn single_entry_codebook() {
        let corpus = sine_corpus(4, 2048);
        let cfg = CodecConfig {
            codebook_size: 1,
            channels: 4,
            ..CodecConfig::new(Level::Low)
        };
        let pc = PretrainConfig {
            steps: 3,
            batch_size: 2,
            crop_samples: 1024,
            ..PretrainConfig::default()
        };
        let (codec, _) = pretrain_codec(&corpus, cfg, &pc).unwrap();
        let f = codec.encode(&corpus[0]).unwrap();
        let (idx, q) = codec.quantize(&f).unwrap();
        assert!(idx.indices.iter().all(|&i| i == 0));
        let constant = VQSequence {
            features: Array2::from_shape_fn(q.features.dim(), |(d, _)| codec.codebook.entries[[0, d]]),
            level: Level::Low,
        };
        assert_eq!(codec.decode(&q).unwrap(), codec.decode(&constant).unwrap());
    }

    #[test]
    fn training_beats_an_untrained_decoder() {
        let corpus = sine_corpus(6, 4096);
        let cfg = CodecConfig {
            codebook_size: 32,
            channels: 8,
            ..CodecConfig::new(Level::Low)
        };
        let pc = PretrainConfig {
            steps: 60,
            batch_size: 4,
            crop_samples: 1024,
            lr: 3e-3,
            ..PretrainConfig::default()
        };
        let (trained, stats) = pretrain_codec(&corpus, cfg, &pc).unwrap();
        let first = stats.reconstruction[..5].iter().sum::<f64>();
        let last = stats.reconstruction[stats.reconstruction.len() - 5..].iter().sum::<f64>();
        assert!(last < first);
        // Random decoder reading the trained codes.
        let mut untrained = trained.clone();
        let fresh = CodecLevel::new(CodecConfig { seed: 99, ..cfg });
        untrained.decoder = fresh.decoder;
        untrained.decoder_params = fresh.decoder_params;
        assert!(reconstruction_l1(&trained, &corpus).unwrap() < reconstruction_l1(&untrained, &corpus).unwrap());
        // Idempotence of quantization on trained codes.
        let (idx, q) = trained.quantize(&trained.encode(&corpus[1]).unwrap()).unwrap();
        assert_eq!(quantize(&q, &trained.codebook).unwrap().0, idx);
    }
}
