//! In-memory training clips with their ground-truth codec features.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::audio::Waveform;
use crate::codec::CodecLevel;
use crate::data::{segment_clips, ClipData, ClipRecord, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{MotionSequence, VisualFeatureSequence};

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub clip_id: String,
    pub genre: String,
    pub audio: Waveform,
    pub motion: MotionSequence,
    pub visual: VisualFeatureSequence,
    /// Continuous encoder output of the clip audio, `[64, T]`.
    pub target: Array2<f64>,
    /// The target after codebook lookup.
    pub codes: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub samples: Vec<TrainSample>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Re-cuts each song's span into clips of the configured length. Without
/// random offsets this is the fixed grid starting at the song's first clip.
fn regroup(records: &[ClipRecord], cfg: &TrainConfig) -> Result<Vec<ClipRecord>> {
    let mut spans: BTreeMap<&str, ClipRecord> = BTreeMap::new();
    for r in records {
        spans
            .entry(r.song_id.as_str())
            .and_modify(|s| {
                s.start = s.start.min(r.start);
                s.end = s.end.max(r.end);
            })
            .or_insert_with(|| ClipRecord {
                clip_id: r.song_id.clone(),
                ..r.clone()
            });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut out = Vec::new();
    for (_, mut span) in spans {
        if span.duration() + 1e-6 < cfg.clip_seconds {
            log::warn!("song {:?} is shorter than one {} s clip; skipped", span.song_id, cfg.clip_seconds);
            continue;
        }
        if cfg.random_offsets {
            let spare = span.duration() % cfg.clip_seconds;
            span.start += rng.random_range(0.0..=spare);
        }
        out.extend(segment_clips(&span, cfg.clip_seconds, cfg.clip_seconds)?);
    }
    Ok(out)
}

fn sample(clip: ClipData, manifest: &DatasetManifest, cfg: &TrainConfig, codec: &CodecLevel) -> Result<TrainSample> {
    if clip.record.motion_repr != cfg.motion {
        return Err(Error::Data(format!(
            "clip {:?} has {:?} motion but the model expects {:?}",
            clip.record.clip_id, clip.record.motion_repr, cfg.motion
        )));
    }
    let visual = clip_visual(&clip, manifest, cfg.no_visual)?;
    let target = codec.encode(&clip.audio)?;
    let (_, codes) = codec.quantize(&target)?;
    Ok(TrainSample {
        clip_id: clip.record.clip_id.clone(),
        genre: clip.record.genre.clone(),
        audio: clip.audio,
        motion: clip.motion,
        visual,
        target: target.features,
        codes: codes.features,
    })
}

/// Loads every clip of `split`, re-cut to `cfg.clip_seconds`. Returns the
/// manifest view with the matching clip length alongside.
pub fn load_split_clips(manifest: &DatasetManifest, split: Split, cfg: &TrainConfig) -> Result<(DatasetManifest, Vec<ClipData>)> {
    let records = regroup(manifest.split(split), cfg)?;
    if records.is_empty() {
        return Err(Error::Data(format!("the {split:?} split has no clips of {} s", cfg.clip_seconds)));
    }
    let recut = DatasetManifest {
        clip_seconds: cfg.clip_seconds,
        ..manifest.clone()
    };
    let clips = records.iter().map(|r| recut.load_clip(r)).collect::<Result<_>>()?;
    Ok((recut, clips))
}

/// [`load_split_clips`] plus ground-truth features from the frozen codec.
pub fn load_train_set(manifest: &DatasetManifest, split: Split, cfg: &TrainConfig, codec: &CodecLevel) -> Result<TrainSet> {
    if codec.level() != cfg.level {
        return Err(Error::Config(format!("{} level codec given for a {} level run", codec.level(), cfg.level)));
    }
    let (recut, clips) = load_split_clips(manifest, split, cfg)?;
    let samples = clips
        .into_iter()
        .map(|c| sample(c, &recut, cfg, codec))
        .collect::<Result<_>>()?;
    Ok(TrainSet { samples })
}

/// Visual features for a clip, or zeros when the stream is disabled.
pub fn clip_visual(clip: &ClipData, manifest: &DatasetManifest, no_visual: bool) -> Result<VisualFeatureSequence> {
    match (no_visual, &clip.visual) {
        (true, _) => Ok(VisualFeatureSequence::zeros(manifest.visual_windows())),
        (false, Some(v)) => Ok(v.clone()),
        (false, None) => Err(Error::Data(format!(
            "clip {:?} has no visual features; set no_visual to run without them",
            clip.record.clip_id
        ))),
    }
}
