//! Audio substrate: waveform container, WAV I/O, resampling, mel features,
//! onset/beat detection and spectral-gating denoise.

mod denoise;
mod mel;
mod onset;
mod resample;
mod wav;

pub use denoise::{spectral_denoise, spectral_denoise_with, DenoiseParams};
pub use mel::{
    hann_window, mel_band_center, mel_filterbank, mel_spectrogram, LogMelOp, MelParams, MelSpectrogram,
};
pub(crate) use mel::Stft;
pub use onset::{detect_beats, onset_strength, BeatList, OnsetEnvelope, ThresholdPolicy};
pub use resample::resample;
pub use wav::{load_wav, load_wav_canonical, save_wav};

use crate::error::{Error, Result};

/// Canonical internal sample rate.
pub const SAMPLE_RATE: u32 = 22050;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scales to unit peak; silent input is returned unchanged.
    pub fn peak_normalized(&self) -> Self {
        let peak = self.peak();
        if peak == 0.0 {
            return self.clone();
        }
        Self {
            samples: self.samples.iter().map(|s| s / peak).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `[start, start + len)`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> Self {
        let mut samples = vec![0.0; len];
        if start < self.samples.len() {
            let n = len.min(self.samples.len() - start);
            samples[..n].copy_from_slice(&self.samples[start..start + n]);
        }
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn clamped(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
            sample_rate: self.sample_rate,
        }
    }
}
