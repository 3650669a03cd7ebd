use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the interpolation kernel on each side.
const ZERO_CROSSINGS: f64 = 24.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel. The cutoff is
/// the lower of the two Nyquist rates; output length is
/// `round(len * target / source)`.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidInput("target sample rate must be positive".into()));
    }
    if target_rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate() as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let x = w.samples();
    let samples = (0..out_len)
        .map(|m| {
            let centre = m as f64 / ratio;
            let lo = (centre - half_width).ceil().max(0.0) as usize;
            let hi = ((centre + half_width).floor() as usize).min(x.len().saturating_sub(1));
            let mut acc = 0.0;
            for (n, &s) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = n as f64 - centre;
                let window = 0.5 + 0.5 * (PI * d / half_width).cos();
                acc += s * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect();
    Waveform::new(samples, target_rate)
}
