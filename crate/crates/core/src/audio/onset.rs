//! Onset strength and peak-picking beat detection.

use super::mel::{mel_spectrogram, MelParams};
use super::Waveform;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct OnsetEnvelope {
    pub strength: Vec<f64>,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeatList {
    pub times: Vec<f64>,
}

impl BeatList {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Adaptive threshold `mean + k * std` over a centered sliding window, plus
/// a minimum spacing between accepted beats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPolicy {
    pub window_seconds: f64,
    pub k: f64,
    pub min_gap_seconds: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            window_seconds: 1.0,
            k: 1.5,
            min_gap_seconds: 0.1,
        }
    }
}

/// Sum over mel bands of the rectified frame-to-frame increase of log-mel
/// energy. Frame 0 has no predecessor and is 0.
pub fn onset_strength(w: &Waveform) -> Result<OnsetEnvelope> {
    let params = MelParams {
        sample_rate: w.sample_rate(),
        ..MelParams::default()
    };
    let mel = mel_spectrogram(w, &params)?;
    let frames = &mel.frames;
    let mut strength = vec![0.0; frames.ncols()];
    for t in 1..frames.ncols() {
        strength[t] = frames
            .column(t)
            .iter()
            .zip(frames.column(t - 1))
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    Ok(OnsetEnvelope {
        strength,
        frame_rate: params.frame_rate(),
    })
}

/// Interior local maxima that beat the adaptive threshold. Strongest peaks
/// claim their neighborhood first when two fall within the minimum gap.
pub fn detect_beats(env: &OnsetEnvelope, policy: ThresholdPolicy) -> BeatList {
    let s = &env.strength;
    let n = s.len();
    if n < 3 {
        return BeatList::default();
    }
    let half = ((policy.window_seconds * env.frame_rate) / 2.0).round() as usize;
    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&t| s[t] > 0.0 && s[t] > s[t - 1] && s[t] >= s[t + 1])
        .filter(|&t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            let win = &s[lo..hi];
            let mean = win.iter().sum::<f64>() / win.len() as f64;
            let var = win.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / win.len() as f64;
            s[t] > mean + policy.k * var.sqrt()
        })
        .collect();
    candidates.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let min_gap = policy.min_gap_seconds * env.frame_rate;
    let mut accepted: Vec<usize> = Vec::new();
    for t in candidates {
        if accepted.iter().all(|&a| (a as f64 - t as f64).abs() >= min_gap) {
            accepted.push(t);
        }
    }
    accepted.sort_unstable();
    BeatList {
        times: accepted.into_iter().map(|t| t as f64 / env.frame_rate).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;

    fn click_track(times: &[f64], seconds: f64) -> Waveform {
        let mut s = vec![0.0; (seconds * SAMPLE_RATE as f64) as usize];
        for &t in times {
            let i = (t * SAMPLE_RATE as f64).round() as usize;
            s[i] = 1.0;
        }
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    fn peak_frames(env: &OnsetEnvelope, count: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..env.strength.len()).collect();
        idx.sort_by(|&a, &b| env.strength[b].total_cmp(&env.strength[a]));
        idx.truncate(count);
        idx.sort_unstable();
        idx
    }

    #[test]
    fn silence_has_zero_envelope() {
        let env = onset_strength(&Waveform::zeros(44100, SAMPLE_RATE)).unwrap();
        assert!(env.strength.iter().all(|&v| v == 0.0));
        assert!(detect_beats(&env, ThresholdPolicy::default()).is_empty());
    }

    #[test]
    fn single_click_peak() {
        let w = click_track(&[1.0], 2.0);
        let env = onset_strength(&w).unwrap();
        let top = peak_frames(&env, 1)[0] as f64;
        let click_frame = 1.0 * env.frame_rate;
        assert!((top - click_frame).abs() <= 1.0, "peak {top} vs {click_frame}");
        let beats = detect_beats(&env, ThresholdPolicy::default());
        assert_eq!(beats.len(), 1);
    }

    #[test]
    fn click_train_120_bpm() {
        let clicks = [0.25, 0.75, 1.25, 1.75];
        let env = onset_strength(&click_track(&clicks, 2.0)).unwrap();
        let peaks = peak_frames(&env, 4);
        for (p, c) in peaks.iter().zip(clicks) {
            assert!((*p as f64 - c * env.frame_rate).abs() <= 1.0);
        }
        let beats = detect_beats(&env, ThresholdPolicy::default());
        assert_eq!(beats.len(), 4);
        for (b, c) in beats.times.iter().zip(clicks) {
            assert!((b - c).abs() <= 0.05, "beat {b} vs click {c}");
        }
    }

    #[test]
    fn isolated_peak_is_one_beat() {
        let mut strength = vec![0.0; 200];
        strength[77] = 3.0;
        let env = OnsetEnvelope {
            strength,
            frame_rate: 86.0,
        };
        assert_eq!(detect_beats(&env, ThresholdPolicy::default()).times, vec![77.0 / 86.0]);
    }

    #[test]
    fn min_gap_keeps_stronger_peak() {
        let mut strength = vec![0.0; 200];
        strength[50] = 2.0;
        strength[54] = 3.0;
        let env = OnsetEnvelope {
            strength,
            frame_rate: 86.0,
        };
        assert_eq!(detect_beats(&env, ThresholdPolicy::default()).times, vec![54.0 / 86.0]);
    }
}
