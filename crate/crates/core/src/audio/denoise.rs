//! Stationary spectral gating.
//!
//! The noise profile is the mean magnitude per bin over the quietest frames,
//! median-smoothed across frequency so that steady tones do not end up in
//! the profile themselves. Bins above `threshold_factor` times the profile
//! pass; the binary mask is then averaged over a small time/frequency
//! neighborhood before resynthesis.

use rustfft::num_complex::Complex64;

use super::{Stft, Waveform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseParams {
    pub n_fft: usize,
    pub hop: usize,
    pub quiet_fraction: f64,
    pub threshold_factor: f64,
    /// Half-width, in bins, of the median filter applied to the profile.
    pub profile_median_bins: usize,
    pub mask_smooth_frames: usize,
    pub mask_smooth_bins: usize,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            quiet_fraction: 0.1,
            threshold_factor: 2.0,
            profile_median_bins: 16,
            mask_smooth_frames: 1,
            mask_smooth_bins: 1,
        }
    }
}

pub fn spectral_denoise(w: &Waveform) -> Waveform {
    spectral_denoise_with(w, &DenoiseParams::default())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn spectral_denoise_with(w: &Waveform, p: &DenoiseParams) -> Waveform {
    if w.is_empty() {
        return w.clone();
    }
    let stft = Stft::new(p.n_fft, p.hop);
    let spectra = stft.analyze(w.samples());
    let n_frames = spectra.len();
    let n_bins = p.n_fft / 2 + 1;
    let mags: Vec<Vec<f64>> = spectra
        .iter()
        .map(|s| s.iter().map(|c| c.norm()).collect())
        .collect();

    let mut order: Vec<usize> = (0..n_frames).collect();
    let energy: Vec<f64> = mags.iter().map(|m| m.iter().map(|v| v * v).sum()).collect();
    order.sort_by(|&a, &b| energy[a].total_cmp(&energy[b]).then(a.cmp(&b)));
    let quiet = ((n_frames as f64 * p.quiet_fraction).ceil() as usize).clamp(1, n_frames);
    let raw: Vec<f64> = (0..n_bins)
        .map(|k| order[..quiet].iter().map(|&t| mags[t][k]).sum::<f64>() / quiet as f64)
        .collect();
    let profile: Vec<f64> = (0..n_bins)
        .map(|k| {
            let lo = k.saturating_sub(p.profile_median_bins);
            let hi = (k + p.profile_median_bins + 1).min(n_bins);
            median(&mut raw[lo..hi].to_vec())
        })
        .collect();

    let gate: Vec<Vec<f64>> = mags
        .iter()
        .map(|m| {
            m.iter()
                .zip(&profile)
                .map(|(&v, &n)| if v > p.threshold_factor * n { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();

    let (ft, fk) = (p.mask_smooth_frames, p.mask_smooth_bins);
    let gated: Vec<Vec<Complex64>> = (0..n_frames)
        .map(|t| {
            (0..n_bins)
                .map(|k| {
                    let (mut sum, mut count) = (0.0, 0.0);
                    for tt in t.saturating_sub(ft)..(t + ft + 1).min(n_frames) {
                        for kk in k.saturating_sub(fk)..(k + fk + 1).min(n_bins) {
                            sum += gate[tt][kk];
                            count += 1.0;
                        }
                    }
                    spectra[t][k] * (sum / count)
                })
                .collect()
        })
        .collect();

    let samples = stft
        .synthesize(&gated, w.len())
        .into_iter()
        .map(|s| s.clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, w.sample_rate()).expect("resynthesis is finite")
}
