//! Beat coverage/hit scores and retrieval-based genre accuracy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{detect_beats, mel_spectrogram, onset_strength, MelParams, ThresholdPolicy, Waveform};
use crate::codec::CodecLevel;
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::training::{clip_visual, generate_music, load_split_clips, Checkpoint};

/// Default beat alignment tolerance in seconds.
pub const DEFAULT_TOLERANCE: f64 = 0.070;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatScores {
    /// Generated beats over ground-truth beats; may exceed 1.
    pub coverage: f64,
    /// Aligned beats over ground-truth beats.
    pub hit: f64,
    pub generated_beats: usize,
    pub gt_beats: usize,
    pub aligned_beats: usize,
}

/// Size of a one-to-one matching of `a` to `b` within `tol`, taking the
/// closest remaining pair first.
pub fn match_beats(a: &[f64], b: &[f64], tol: f64) -> usize {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let d = (x - y).abs();
            if d <= tol {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut n = 0;
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            n += 1;
        }
    }
    n
}

/// Compares detected beats of two clips of (nearly) equal duration; the
/// longer one is cropped to the shorter.
pub fn beat_scores(generated: &Waveform, gt: &Waveform, tolerance_s: f64) -> Result<BeatScores> {
    if generated.sample_rate() != gt.sample_rate() {
        return Err(Error::InvalidInput("clips differ in sample rate".into()));
    }
    let (lg, lt) = (generated.len(), gt.len());
    if lg.abs_diff(lt) as f64 > 0.05 * lg.max(lt) as f64 {
        return Err(Error::InvalidInput(format!("clip lengths differ: {lg} vs {lt} samples")));
    }
    let n = lg.min(lt);
    let beats = |w: &Waveform| -> Result<Vec<f64>> {
        let env = onset_strength(&w.truncated(n))?;
        Ok(detect_beats(&env, ThresholdPolicy::default()).times)
    };
    let (bg, bt) = (beats(generated)?, beats(gt)?);
    if bt.is_empty() {
        return Err(Error::InvalidInput("no beats detected in the ground truth".into()));
    }
    let aligned = match_beats(&bg, &bt, tolerance_s);
    Ok(BeatScores {
        coverage: bg.len() as f64 / bt.len() as f64,
        hit: aligned as f64 / bt.len() as f64,
        generated_beats: bg.len(),
        gt_beats: bt.len(),
        aligned_beats: aligned,
    })
}

/// Maps a clip to a fixed-length vector.
pub trait AudioEmbedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>>;
}

/// Per-band mean and standard deviation of the log-mel matrix of the
/// peak-normalized clip.
#[derive(Debug, Clone, Copy, Default)]
pub struct MelStatsEmbedder {
    pub params: MelParams,
}

impl AudioEmbedder for MelStatsEmbedder {
    fn name(&self) -> &str {
        "mel-stats"
    }

    fn dim(&self) -> usize {
        2 * self.params.n_mels
    }

    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let params = MelParams {
            sample_rate: w.sample_rate(),
            ..self.params
        };
        let mel = mel_spectrogram(&w.peak_normalized(), &params)?;
        let frames = &mel.frames;
        let n = frames.ncols() as f64;
        // Shifted by the first frame so constant bands give exact statistics.
        let means: Vec<f64> = frames
            .rows()
            .into_iter()
            .map(|r| r[0] + r.iter().map(|v| v - r[0]).sum::<f64>() / n)
            .collect();
        let stds = frames
            .rows()
            .into_iter()
            .zip(&means)
            .map(|(r, m)| (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt());
        Ok(means.iter().copied().chain(stds).collect())
    }
}

/// Gaussian vectors seeded by a hash of the samples: deterministic per
/// clip but unrelated to its content. A chance-level baseline.
#[derive(Debug, Clone, Copy)]
pub struct RandomEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl AudioEmbedder for RandomEmbedder {
    fn name(&self) -> &str {
        "random"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for s in w.samples() {
            h.update(s.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let unit = Normal::new(0.0, 1.0).unwrap();
        Ok((0..self.dim).map(|_| unit.sample(&mut rng)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub embedding: Vec<f64>,
    pub genre: String,
    pub segment_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDatabase {
    entries: Vec<RetrievalEntry>,
    dim: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl RetrievalDatabase {
    pub fn new(entries: Vec<RetrievalEntry>) -> Result<Self> {
        let dim = entries
            .first()
            .map(|e| e.embedding.len())
            .ok_or_else(|| Error::Data("empty retrieval database".into()))?;
        if let Some(e) = entries.iter().find(|e| e.embedding.len() != dim) {
            return Err(Error::Shape(format!(
                "entry {:?} has dimension {}, expected {dim}",
                e.segment_id,
                e.embedding.len()
            )));
        }
        Ok(Self { entries, dim })
    }

    /// Embeds `(clip, genre, segment id)` triples.
    pub fn build<'a>(embedder: &dyn AudioEmbedder, items: impl IntoIterator<Item = (&'a Waveform, &'a str, &'a str)>) -> Result<Self> {
        let entries = items
            .into_iter()
            .map(|(w, genre, id)| {
                Ok(RetrievalEntry {
                    embedding: embedder.embed(w)?,
                    genre: genre.to_string(),
                    segment_id: id.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[RetrievalEntry] {
        &self.entries
    }

    /// Closest entry by Euclidean distance; ties go to the lowest segment id.
    pub fn nearest(&self, query: &[f64]) -> Result<&RetrievalEntry> {
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query has dimension {}, database {}", query.len(), self.dim)));
        }
        let mut best = &self.entries[0];
        let mut best_d = sq_dist(query, &best.embedding);
        for e in &self.entries[1..] {
            let d = sq_dist(query, &e.embedding);
            if d < best_d || (d == best_d && e.segment_id < best.segment_id) {
                best = e;
                best_d = d;
            }
        }
        Ok(best)
    }
}

/// Fraction of `(embedding, genre)` queries whose nearest entry shares
/// their genre.
pub fn genre_accuracy(queries: &[(Vec<f64>, String)], db: &RetrievalDatabase) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("no queries".into()));
    }
    let mut correct = 0;
    for (q, genre) in queries {
        if &db.nearest(q)?.genre == genre {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEvaluation {
    pub clip_id: String,
    pub genre: String,
    pub retrieved_genre: String,
    pub retrieved_segment: String,
    /// `None` when no beats were detected in the ground truth.
    pub beats: Option<BeatScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clip_seconds: f64,
    pub tolerance_s: f64,
    pub embedder: String,
    pub coverage: f64,
    pub hit: f64,
    pub genre_accuracy: f64,
    pub beat_clips: usize,
    pub clips: Vec<ClipEvaluation>,
}

/// A generated clip with its reference.
pub struct EvalItem<'a> {
    pub clip_id: &'a str,
    pub genre: &'a str,
    pub generated: &'a Waveform,
    pub gt: &'a Waveform,
}

/// Mean beat scores over clips with ground-truth beats, and genre accuracy
/// of the generated clips against `db`.
pub fn evaluate_items(
    items: &[EvalItem<'_>],
    db: &RetrievalDatabase,
    embedder: &dyn AudioEmbedder,
    tolerance_s: f64,
    clip_seconds: f64,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut clips = Vec::with_capacity(items.len());
    let (mut cov, mut hit, mut n_beat, mut correct) = (0.0, 0.0, 0, 0);
    for it in items {
        let beats = match beat_scores(it.generated, it.gt, tolerance_s) {
            Ok(b) => Some(b),
            Err(Error::InvalidInput(msg)) if msg.starts_with("no beats") => {
                log::warn!("clip {:?}: {msg}; left out of the beat scores", it.clip_id);
                None
            }
            Err(e) => return Err(e),
        };
        if let Some(b) = beats {
            cov += b.coverage;
            hit += b.hit;
            n_beat += 1;
        }
        let hitrow = db.nearest(&embedder.embed(it.generated)?)?;
        if hitrow.genre == it.genre {
            correct += 1;
        }
        clips.push(ClipEvaluation {
            clip_id: it.clip_id.to_string(),
            genre: it.genre.to_string(),
            retrieved_genre: hitrow.genre.clone(),
            retrieved_segment: hitrow.segment_id.clone(),
            beats,
        });
    }
    if n_beat == 0 {
        return Err(Error::Data("no evaluated clip has detectable ground-truth beats".into()));
    }
    Ok(EvalReport {
        clip_seconds,
        tolerance_s,
        embedder: embedder.name().to_string(),
        coverage: cov / n_beat as f64,
        hit: hit / n_beat as f64,
        genre_accuracy: correct as f64 / items.len() as f64,
        beat_clips: n_beat,
        clips,
    })
}

/// Generates music for every clip of `split` and scores it against the
/// ground truth. The retrieval database holds the train-split ground truth.
pub fn evaluate_run(
    ck: &Checkpoint,
    codec: &CodecLevel,
    manifest: &DatasetManifest,
    split: Split,
    tolerance_s: f64,
    embedder: &dyn AudioEmbedder,
    denoise: bool,
) -> Result<EvalReport> {
    if manifest.split(split).is_empty() {
        return Err(Error::Data(format!("the {split:?} split is empty")));
    }
    let cfg = &ck.config;
    let (_, db_clips) = load_split_clips(manifest, Split::Train, cfg)?;
    let db = RetrievalDatabase::build(
        embedder,
        db_clips
            .iter()
            .map(|c| (&c.audio, c.record.genre.as_str(), c.record.clip_id.as_str())),
    )?;
    let (recut, clips) = load_split_clips(manifest, split, cfg)?;
    let generated = clips
        .iter()
        .map(|c| {
            let v = clip_visual(c, &recut, cfg.no_visual)?;
            Ok(generate_music(ck, codec, &c.motion, &v, denoise)?.audio)
        })
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<EvalItem> = clips
        .iter()
        .zip(&generated)
        .map(|(c, g)| EvalItem {
            clip_id: &c.record.clip_id,
            genre: &c.record.genre,
            generated: g,
            gt: &c.audio,
        })
        .collect();
    evaluate_items(&items, &db, embedder, tolerance_s, cfg.clip_seconds)
}
