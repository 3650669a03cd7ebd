//! Synthetic separable corpus: per-genre click tracks over harmonic beds,
//! beat-locked keypoint motion and genre-tagged visual features.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{segment_clips, split_by_song, ClipRecord, DatasetManifest};
use super::motion::{save_json, KeypointFile, KEYPOINT_JOINTS, MOTION_FPS};
use super::npy::write_npy;
use crate::audio::{save_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::{MotionRepr, VISUAL_DIM};

/// Time of the first click in every song.
pub const CLICK_OFFSET: f64 = 0.1;
const CLICK_SAMPLES: usize = 64;
const CLICK_AMP: f64 = 0.6;
const BED_AMP: f64 = 0.3;
const VISUAL_WINDOW: f64 = 0.5;
const VISUAL_RANK: usize = 4;
const FRAME_W: f64 = 1920.0;
const FRAME_H: f64 = 1080.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreSpec {
    pub name: String,
    pub bpm: f64,
    /// Bed fundamental as a whole number of samples per cycle.
    pub period_samples: usize,
    pub harmonics: [f64; 3],
    pub click_hz: f64,
}

impl GenreSpec {
    /// Built-in genres; tempos divide a 2 s clip into whole beats.
    pub fn preset(i: usize) -> Option<Self> {
        let (name, bpm, period, harmonics, click_hz) = match i {
            0 => ("genre_a", 90.0, 147, [1.0, 0.5, 0.25], 3000.0),
            1 => ("genre_b", 150.0, 98, [1.0, 0.15, 0.6], 2000.0),
            2 => ("genre_c", 120.0, 126, [1.0, 0.35, 0.1], 4000.0),
            3 => ("genre_d", 60.0, 168, [1.0, 0.6, 0.4], 2500.0),
            _ => return None,
        };
        Some(Self {
            name: name.into(),
            bpm,
            period_samples: period,
            harmonics,
            click_hz,
        })
    }

    pub fn beat_period(&self) -> f64 {
        60.0 / self.bpm
    }

    fn validate(&self) -> Result<()> {
        if !(self.bpm > 0.0 && self.bpm.is_finite()) {
            return Err(Error::Config(format!("genre {:?} has invalid tempo {}", self.name, self.bpm)));
        }
        if self.period_samples < 2 {
            return Err(Error::Config(format!("genre {:?} has a degenerate bed period", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub genres: Vec<GenreSpec>,
    /// Total clip count across all genres.
    pub clips: usize,
    pub clip_seconds: f64,
    pub clips_per_song: usize,
    /// Train, val and test song fractions, applied per genre.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl ToyConfig {
    pub fn preset(genres: usize, clips: usize) -> Result<Self> {
        let genres = (0..genres)
            .map(|i| GenreSpec::preset(i).ok_or_else(|| Error::Config(format!("at most 4 preset genres, asked for {genres}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            genres,
            clips,
            clip_seconds: 2.0,
            clips_per_song: 2,
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
        })
    }
}

/// Click times in `[0, seconds)`.
pub fn click_times(bpm: f64, seconds: f64) -> Vec<f64> {
    let period = 60.0 / bpm;
    (0..).map(|k| CLICK_OFFSET + k as f64 * period).take_while(|&t| t < seconds).collect()
}

/// Harmonic bed plus decaying clicks on the beat.
pub fn toy_song(g: &GenreSpec, seconds: f64, bed_gain: f64) -> Result<Waveform> {
    g.validate()?;
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let norm: f64 = g.harmonics.iter().sum();
    let p = g.period_samples as f64;
    let mut s: Vec<f64> = (0..n)
        .map(|i| {
            let phase = 2.0 * PI * (i % g.period_samples) as f64 / p;
            let bed: f64 = g.harmonics.iter().enumerate().map(|(k, h)| h * ((k + 1) as f64 * phase).sin()).sum();
            BED_AMP * bed_gain * bed / norm
        })
        .collect();
    for t in click_times(g.bpm, seconds) {
        let at = (t * SAMPLE_RATE as f64).round() as usize;
        for j in 0..CLICK_SAMPLES.min(n.saturating_sub(at)) {
            let env = (-(j as f64) / 16.0).exp();
            s[at + j] += CLICK_AMP * env * (2.0 * PI * g.click_hz * j as f64 / SAMPLE_RATE as f64).sin();
        }
    }
    Waveform::new(s.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), SAMPLE_RATE)
}

/// Keypoints bobbing vertically once per beat (lowest on screen, i.e. max
/// `y`, exactly at each click) with a half-tempo sway.
pub fn toy_motion(g: &GenreSpec, genre_index: usize, seconds: f64, gain: f64) -> KeypointFile {
    let frames = (seconds * MOTION_FPS).round() as usize;
    let period = g.beat_period();
    let bob = (20.0 + 10.0 * genre_index as f64) * gain;
    KeypointFile {
        fps: MOTION_FPS,
        width: FRAME_W,
        height: FRAME_H,
        frames: (0..frames)
            .map(|f| {
                let t = f as f64 / MOTION_FPS;
                let beat = 2.0 * PI * (t - CLICK_OFFSET) / period;
                Some(
                    (0..KEYPOINT_JOINTS)
                        .map(|j| {
                            let w = 0.5 + j as f64 / KEYPOINT_JOINTS as f64;
                            let cx = FRAME_W / 2.0 + 30.0 * (j % 5) as f64 - 60.0;
                            let cy = 250.0 + 35.0 * j as f64;
                            Some([cx + 0.5 * bob * w * (beat / 2.0).sin(), cy + bob * w * beat.cos(), 1.0])
                        })
                        .collect(),
                )
            })
            .collect(),
    }
}

/// `(T_v, 1024)` rows from a genre-specific rank-4 basis.
fn toy_visual(basis: &Array2<f64>, windows: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut out = Array2::zeros((windows, VISUAL_DIM));
    for w in 0..windows {
        let z: Vec<f64> = (0..VISUAL_RANK).map(|_| unit.sample(rng)).collect();
        for d in 0..VISUAL_DIM {
            let v: f64 = (0..VISUAL_RANK).map(|r| basis[[d, r]] * z[r]).sum();
            out[[w, d]] = 0.5 * v + 0.05 * unit.sample(rng);
        }
    }
    out
}

/// Writes audio/, motion/, visual/ and manifests/manifest.json under
/// `out` and returns the loaded manifest.
pub fn synth_toy_dataset(cfg: &ToyConfig, out: &Path) -> Result<DatasetManifest> {
    if cfg.genres.len() < 2 {
        return Err(Error::Config("the toy corpus needs at least two genres".into()));
    }
    for g in &cfg.genres {
        g.validate()?;
    }
    if cfg.clips_per_song == 0 || cfg.clips < cfg.genres.len() * cfg.clips_per_song {
        return Err(Error::Config(format!(
            "{} clips cannot cover {} genres at {} clips per song",
            cfg.clips,
            cfg.genres.len(),
            cfg.clips_per_song
        )));
    }
    for sub in ["audio", "motion", "visual", "manifests"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let song_seconds = cfg.clip_seconds * cfg.clips_per_song as f64;
    let n_songs = cfg.clips / cfg.clips_per_song;
    let mut manifest = DatasetManifest {
        root: "..".into(),
        clip_seconds: cfg.clip_seconds,
        fps: MOTION_FPS,
        sample_rate: SAMPLE_RATE,
        visual_window_seconds: VISUAL_WINDOW,
        genres: cfg.genres.iter().map(|g| g.name.clone()).collect(),
        train: vec![],
        val: vec![],
        test: vec![],
        base: out.to_path_buf(),
    };
    for (gi, g) in cfg.genres.iter().enumerate() {
        let basis = Array2::from_shape_fn((VISUAL_DIM, VISUAL_RANK), |_| unit.sample(&mut rng));
        let songs = n_songs / cfg.genres.len() + usize::from(gi < n_songs % cfg.genres.len());
        let mut records = Vec::new();
        for si in 0..songs {
            let id = format!("{}_{si:03}", g.name);
            let gain = rng.random_range(0.85..1.15);
            let audio = format!("audio/{id}.wav");
            let motion = format!("motion/{id}.json");
            let visual = format!("visual/{id}.npy");
            save_wav(&toy_song(g, song_seconds, gain)?, out.join(&audio))?;
            save_json(&out.join(&motion), &toy_motion(g, gi, song_seconds, gain))?;
            let windows = (song_seconds / VISUAL_WINDOW).ceil() as usize;
            write_npy(&out.join(&visual), &toy_visual(&basis, windows, &mut rng))?;
            let song = ClipRecord {
                clip_id: id.clone(),
                song_id: id,
                genre: g.name.clone(),
                audio: audio.into(),
                motion: motion.into(),
                motion_repr: MotionRepr::Keypoints2d,
                visual: Some(visual.into()),
                start: 0.0,
                end: song_seconds,
            };
            records.extend(segment_clips(&song, cfg.clip_seconds, cfg.clip_seconds)?);
        }
        let split = split_by_song(&records, cfg.ratios, cfg.seed.wrapping_add(gi as u64))?;
        manifest.train.extend(split.train);
        manifest.val.extend(split.val);
        manifest.test.extend(split.test);
    }
    manifest.check()?;
    manifest.save(&out.join("manifests/manifest.json"))?;
    Ok(manifest)
}
