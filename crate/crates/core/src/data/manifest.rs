//! Dataset manifests, song-disjoint splits and clip segmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::motion::{check_motion_duration, load_motion};
use super::npy::read_npy;
use crate::audio::{load_wav_canonical, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::{MotionRepr, MotionSequence, VisualFeatureSequence, VISUAL_DIM};

/// Slack used when comparing clip boundaries in seconds.
const TIME_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub song_id: String,
    pub genre: String,
    /// Paths are relative to the dataset root.
    pub audio: PathBuf,
    pub motion: PathBuf,
    pub motion_repr: MotionRepr,
    #[serde(default)]
    pub visual: Option<PathBuf>,
    pub start: f64,
    pub end: f64,
}

impl ClipRecord {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Dataset root relative to the manifest file's directory.
    #[serde(default = "default_root")]
    pub root: PathBuf,
    pub clip_seconds: f64,
    pub fps: f64,
    pub sample_rate: u32,
    /// Length of the window each visual feature vector summarizes.
    pub visual_window_seconds: f64,
    pub genres: Vec<String>,
    pub train: Vec<ClipRecord>,
    pub val: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
    /// Absolute dataset root, resolved on load.
    #[serde(skip)]
    pub base: PathBuf,
}

fn default_root() -> PathBuf {
    PathBuf::from(".")
}

/// One loaded clip, cut to the record's time span.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub record: ClipRecord,
    pub audio: Waveform,
    pub motion: MotionSequence,
    pub visual: Option<VisualFeatureSequence>,
}

fn songs(records: &[ClipRecord]) -> BTreeSet<&str> {
    records.iter().map(|r| r.song_id.as_str()).collect()
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[ClipRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base.join(rel)
    }

    pub fn records(&self) -> impl Iterator<Item = &ClipRecord> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Structural checks that need no file access.
    pub fn check(&self) -> Result<()> {
        if !(self.clip_seconds > 0.0 && self.fps > 0.0 && self.visual_window_seconds > 0.0) {
            return Err(Error::Data("clip length, fps and visual window must be positive".into()));
        }
        let train = songs(&self.train);
        for (name, other) in [("val", &self.val), ("test", &self.test)] {
            if let Some(s) = songs(other).intersection(&train).next() {
                return Err(Error::Data(format!("song {s:?} appears in both train and {name}")));
            }
        }
        if let Some(s) = songs(&self.val).intersection(&songs(&self.test)).next() {
            return Err(Error::Data(format!("song {s:?} appears in both val and test")));
        }
        let mut ids = BTreeSet::new();
        for r in self.records() {
            if !ids.insert(&r.clip_id) {
                return Err(Error::Data(format!("duplicate clip id {:?}", r.clip_id)));
            }
            if (r.duration() - self.clip_seconds).abs() > TIME_EPS || r.start < -TIME_EPS {
                return Err(Error::Data(format!(
                    "clip {:?} spans {:.3}..{:.3} s, expected {} s",
                    r.clip_id, r.start, r.end, self.clip_seconds
                )));
            }
            if !self.genres.contains(&r.genre) {
                return Err(Error::Data(format!("clip {:?} has unknown genre {:?}", r.clip_id, r.genre)));
            }
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        for r in self.records() {
            for p in [Some(&r.audio), Some(&r.motion), r.visual.as_ref()].into_iter().flatten() {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Data(format!("clip {:?} references missing file {}", r.clip_id, full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads one clip. Audio comes back at the canonical rate, motion at
    /// 60 fps, visual windows covering the clip span.
    pub fn load_clip(&self, r: &ClipRecord) -> Result<ClipData> {
        let song = load_wav_canonical(self.resolve(&r.audio))?;
        let start = (r.start * SAMPLE_RATE as f64).round() as usize;
        let len = (self.clip_seconds * SAMPLE_RATE as f64).round() as usize;
        if start + len > song.len() + 1 {
            return Err(Error::Data(format!("clip {:?} runs past the end of its audio", r.clip_id)));
        }
        let audio = song.segment(start, len);

        let full = load_motion(&self.resolve(&r.motion), r.motion_repr)?;
        check_motion_duration(&full, song.duration_seconds())?;
        let m0 = (r.start * full.frame_rate).round() as usize;
        let mlen = (self.clip_seconds * full.frame_rate).round() as usize;
        let motion = MotionSequence {
            channels: cut_columns(&full.channels, m0, mlen),
            ..full
        };

        let visual = match &r.visual {
            Some(p) => {
                let vf = load_visual_features(&self.resolve(p))?;
                let w0 = (r.start / self.visual_window_seconds + TIME_EPS).floor() as usize;
                let w1 = (r.end / self.visual_window_seconds - TIME_EPS).ceil() as usize;
                Some(VisualFeatureSequence {
                    features: cut_columns(&vf.features, w0, w1.max(w0 + 1) - w0),
                })
            }
            None => None,
        };
        Ok(ClipData {
            record: r.clone(),
            audio,
            motion,
            visual,
        })
    }

    /// Number of visual windows in one clip.
    pub fn visual_windows(&self) -> usize {
        (self.clip_seconds / self.visual_window_seconds - TIME_EPS).ceil() as usize
    }
}

/// Columns `start..start + len`, repeating the last column past the end.
fn cut_columns(x: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
    let n = x.ncols();
    if start + len <= n {
        return x.slice(s![.., start..start + len]).to_owned();
    }
    Array2::from_shape_fn((x.nrows(), len), |(c, t)| x[[c, (start + t).min(n - 1)]])
}

/// Reads and validates a manifest, checking split disjointness, clip
/// lengths and that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    m.base = dir.join(&m.root);
    m.check()?;
    m.check_files()?;
    Ok(m)
}

/// `[1024, T_v]` features from a `(T_v, 1024)` array file.
pub fn load_visual_features(path: &Path) -> Result<VisualFeatureSequence> {
    let a = read_npy(path)?;
    if a.ncols() != VISUAL_DIM {
        return Err(Error::Data(format!(
            "{}: visual features have dimension {}, expected {VISUAL_DIM}",
            path.display(),
            a.ncols()
        )));
    }
    Ok(VisualFeatureSequence { features: a.reversed_axes().as_standard_layout().to_owned() })
}

/// Fixed-stride windows of `clip_seconds` over the record's span.
pub fn segment_clips(record: &ClipRecord, clip_seconds: f64, stride_seconds: f64) -> Result<Vec<ClipRecord>> {
    if !(clip_seconds > 0.0 && stride_seconds > 0.0) {
        return Err(Error::Config("clip length and stride must be positive".into()));
    }
    let dur = record.duration();
    if dur + TIME_EPS < clip_seconds {
        return Err(Error::Data(format!(
            "{:?} lasts {dur:.3} s, shorter than one {clip_seconds} s clip",
            record.clip_id
        )));
    }
    let n = ((dur - clip_seconds) / stride_seconds + TIME_EPS).floor() as usize + 1;
    Ok((0..n)
        .map(|i| {
            let start = record.start + i as f64 * stride_seconds;
            ClipRecord {
                clip_id: format!("{}_{i:03}", record.clip_id),
                start,
                end: start + clip_seconds,
                ..record.clone()
            }
        })
        .collect())
}

/// Records partitioned into train/val/test.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitRecords {
    pub train: Vec<ClipRecord>,
    pub val: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
}

/// Partitions songs (not clips) by `ratios` (train, val, test) after a
/// seeded shuffle of the sorted song ids. Every split with a positive ratio
/// receives at least one song.
pub fn split_by_song(records: &[ClipRecord], ratios: [f64; 3], seed: u64) -> Result<SplitRecords> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut ids: Vec<&str> = songs(records).into_iter().collect();
    let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
    if ids.len() < wanted.max(2) {
        return Err(Error::Data(format!("{} songs cannot fill {wanted} splits", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: f64 = ratios.iter().sum();
    let n = ids.len();
    let mut counts: Vec<usize> = ratios.iter().map(|r| ((r / total) * n as f64).floor() as usize).collect();
    // Largest remainders first, then make sure no requested split is empty.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = ratios[a] / total * n as f64 - counts[a] as f64;
        let rb = ratios[b] / total * n as f64 - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    let mut assign = BTreeMap::new();
    let mut k = 0;
    for (split, &c) in [Split::Train, Split::Val, Split::Test].iter().zip(&counts) {
        for id in &ids[k..k + c] {
            assign.insert(*id, *split);
        }
        k += c;
    }
    Ok(partition(records, |r| assign[r.song_id.as_str()]))
}

/// Partitions by explicit song assignment lists. Songs on no list are
/// dropped; a song on two lists is an error.
pub fn split_from_lists(records: &[ClipRecord], train: &[String], val: &[String], test: &[String]) -> Result<SplitRecords> {
    let mut assign: BTreeMap<&str, Split> = BTreeMap::new();
    for (split, list) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
        for s in list {
            if let Some(prev) = assign.insert(s.as_str(), split) {
                if prev != split {
                    return Err(Error::Data(format!("song {s:?} is assigned to two splits")));
                }
            }
        }
    }
    let kept: Vec<ClipRecord> = records.iter().filter(|r| assign.contains_key(r.song_id.as_str())).cloned().collect();
    Ok(partition(&kept, |r| assign[r.song_id.as_str()]))
}

fn partition(records: &[ClipRecord], which: impl Fn(&ClipRecord) -> Split) -> SplitRecords {
    let mut out = SplitRecords::default();
    for r in records {
        match which(r) {
            Split::Train => out.train.push(r.clone()),
            Split::Val => out.val.push(r.clone()),
            Split::Test => out.test.push(r.clone()),
        }
    }
    out
}
