//! STFT, Slaney mel filterbank and log-mel features.
//!
//! Frames are centered: the signal is zero padded by `n_fft / 2` on both
//! sides, so a clip of `L` samples yields `1 + L / hop` frames. Magnitudes
//! carry a small floor (`sqrt(|X|^2 + MAG_EPS)`) which keeps the adjoint
//! finite at silence; log compression is `ln(1 + x)`.

use std::sync::Arc;

use d2m_autograd::{CustomOp, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub(crate) const MAG_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
        }
    }
}

impl MelParams {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 || self.hop == 0 || self.n_mels == 0 || self.sample_rate == 0 {
            return Err(Error::Config(format!("invalid mel parameters {self:?}")));
        }
        Ok(())
    }
}

/// Log-compressed mel spectrogram, `[n_mels, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub params: MelParams,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.ncols()
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Band edge frequencies (`n_mels + 2` points from 0 Hz to Nyquist).
pub(crate) fn mel_points(p: &MelParams) -> Vec<f64> {
    let top = hz_to_mel(p.sample_rate as f64 / 2.0);
    (0..p.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (p.n_mels + 1) as f64))
        .collect()
}

/// Center frequency of band `j`.
pub fn mel_band_center(p: &MelParams, j: usize) -> f64 {
    mel_points(p)[j + 1]
}

/// Slaney-normalized triangular filterbank, `[n_mels, n_fft/2 + 1]`.
pub fn mel_filterbank(p: &MelParams) -> Array2<f64> {
    let pts = mel_points(p);
    let bin_hz = p.sample_rate as f64 / p.n_fft as f64;
    Array2::from_shape_fn((p.n_mels, p.n_bins()), |(j, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (pts[j], pts[j + 1], pts[j + 2]);
        let rise = (f - lo) / (mid - lo);
        let fall = (hi - f) / (hi - mid);
        rise.min(fall).max(0.0) * 2.0 / (hi - lo)
    })
}

/// Shared STFT machinery: window, plans and center padding.
pub(crate) struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann_window(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// One-sided spectra, one `Vec` of `n_fft/2 + 1` bins per frame.
    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let half = self.n_fft / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        (0..self.n_frames(x.len()))
            .map(|t| {
                for (n, b) in buf.iter_mut().enumerate() {
                    let pos = (t * self.hop + n) as isize - half as isize;
                    let s = if pos >= 0 && (pos as usize) < x.len() {
                        x[pos as usize]
                    } else {
                        0.0
                    };
                    *b = Complex64::new(s * self.window[n], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..=half].to_vec()
            })
            .collect()
    }

    /// Real part of the unnormalized inverse transform of a one-sided
    /// spectrum whose upper half is taken as zero.
    fn half_inverse(&self, spec: &[Complex64], buf: &mut [Complex64]) {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        buf[..spec.len()].copy_from_slice(spec);
        self.inverse.process(buf);
    }

    /// Adjoint of [`analyze`](Self::analyze) restricted to the real input:
    /// maps per-bin gradients `dL/dRe + i dL/dIm` back to samples.
    pub fn analyze_adjoint(&self, grads: &[Vec<Complex64>], len: usize) -> Vec<f64> {
        let half = self.n_fft / 2;
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (t, g) in grads.iter().enumerate() {
            // With X_k = sum_n v_n e^{-i theta_kn} and G_k = dL/dRe X_k + i dL/dIm X_k,
            // dL/dv_n = Re(sum_k G_k e^{+i theta_kn}).
            self.half_inverse(g, &mut buf);
            for n in 0..self.n_fft {
                let pos = (t * self.hop + n) as isize - half as isize;
                if pos >= 0 && (pos as usize) < len {
                    out[pos as usize] += buf[n].re * self.window[n];
                }
            }
        }
        out
    }

    /// Overlap-add resynthesis normalized by the summed squared window.
    pub fn synthesize(&self, frames: &[Vec<Complex64>], len: usize) -> Vec<f64> {
        let half = self.n_fft / 2;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (t, spec) in frames.iter().enumerate() {
            buf[..=half].copy_from_slice(spec);
            for k in 1..half {
                buf[self.n_fft - k] = spec[k].conj();
            }
            self.inverse.process(&mut buf);
            for n in 0..self.n_fft {
                let pos = (t * self.hop + n) as isize - half as isize;
                if pos >= 0 && (pos as usize) < len {
                    let w = self.window[n];
                    out[pos as usize] += buf[n].re / self.n_fft as f64 * w;
                    norm[pos as usize] += w * w;
                }
            }
        }
        out.iter()
            .zip(&norm)
            .map(|(&o, &n)| if n > 1e-8 { o / n } else { 0.0 })
            .collect()
    }
}

/// Batched log-mel kernel used both for plain feature extraction and as a
/// differentiable graph op.
pub struct LogMelOp {
    params: MelParams,
    filterbank: Array2<f64>,
    stft: Stft,
}

impl LogMelOp {
    pub fn new(params: MelParams) -> Self {
        Self {
            params,
            filterbank: mel_filterbank(&params),
            stft: Stft::new(params.n_fft, params.hop),
        }
    }

    pub fn params(&self) -> &MelParams {
        &self.params
    }

    /// Magnitude matrix `[n_bins, T]` and the raw spectra.
    fn magnitudes(&self, x: &[f64]) -> (Array2<f64>, Vec<Vec<Complex64>>) {
        let spectra = self.stft.analyze(x);
        let mag = Array2::from_shape_fn((self.params.n_bins(), spectra.len()), |(k, t)| {
            (spectra[t][k].norm_sqr() + MAG_EPS).sqrt()
        });
        (mag, spectra)
    }

    /// Log-mel matrix `[n_mels, T]` of one signal.
    pub fn compute(&self, x: &[f64]) -> Array2<f64> {
        let (mag, _) = self.magnitudes(x);
        self.filterbank.dot(&mag).mapv(f64::ln_1p)
    }

    fn rows(input: &ndarray::ArrayViewD<f64>) -> (usize, usize) {
        let shape = input.shape();
        let len = *shape.last().expect("log-mel input needs a time axis");
        (input.len() / len.max(1), len)
    }
}

impl CustomOp for LogMelOp {
    fn name(&self) -> &'static str {
        "log_mel"
    }

    /// `[B, 1, L]` or `[B, L]` to `[B, n_mels, T]`.
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0].as_standard_layout();
        let (batch, len) = Self::rows(&x.view());
        let xs = x.as_slice().unwrap();
        let t = self.params.n_frames(len);
        let m = self.params.n_mels;
        let mut out = Vec::with_capacity(batch * m * t);
        for b in 0..batch {
            out.extend(self.compute(&xs[b * len..(b + 1) * len]).iter());
        }
        ArrayD::from_shape_vec(IxDyn(&[batch, m, t]), out).unwrap()
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0].as_standard_layout();
        let (batch, len) = Self::rows(&x.view());
        let xs = x.as_slice().unwrap();
        let out = output.as_standard_layout();
        let g = grad.as_standard_layout();
        let m = self.params.n_mels;
        let t = self.params.n_frames(len);
        let mut dx = Vec::with_capacity(batch * len);
        for b in 0..batch {
            let (mag, spectra) = self.magnitudes(&xs[b * len..(b + 1) * len]);
            let o = &out.as_slice().unwrap()[b * m * t..(b + 1) * m * t];
            let gs = &g.as_slice().unwrap()[b * m * t..(b + 1) * m * t];
            // d ln(1 + y) = dy / (1 + y) and 1 + y = exp(out).
            let dmel = Array2::from_shape_fn((m, t), |(j, f)| gs[j * t + f] / o[j * t + f].exp());
            let dmag = self.filterbank.t().dot(&dmel);
            let bin_grads: Vec<Vec<Complex64>> = spectra
                .iter()
                .enumerate()
                .map(|(f, spec)| {
                    spec.iter()
                        .enumerate()
                        .map(|(k, &xk)| xk * (dmag[[k, f]] / mag[[k, f]]))
                        .collect()
                })
                .collect();
            dx.extend(self.stft.analyze_adjoint(&bin_grads, len));
        }
        vec![Some(ArrayD::from_shape_vec(inputs[0].raw_dim(), dx).unwrap())]
    }
}

/// Log-mel spectrogram of a waveform. The clip must hold at least `n_fft`
/// samples and match the parameter sample rate.
pub fn mel_spectrogram(w: &Waveform, params: &MelParams) -> Result<MelSpectrogram> {
    params.validate()?;
    if w.sample_rate() != params.sample_rate {
        return Err(Error::InvalidInput(format!(
            "waveform at {} Hz, mel parameters at {} Hz",
            w.sample_rate(),
            params.sample_rate
        )));
    }
    if w.len() < params.n_fft {
        return Err(Error::InvalidInput(format!(
            "clip of {} samples is shorter than one frame ({})",
            w.len(),
            params.n_fft
        )));
    }
    let frames = LogMelOp::new(*params).compute(w.samples());
    Ok(MelSpectrogram {
        frames,
        params: *params,
    })
}
