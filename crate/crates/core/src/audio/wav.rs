//! RIFF/WAVE reading (PCM 16/24/32-bit integer, 32-bit float, any channel
//! count) and 16-bit mono writing.

use std::fs;
use std::path::Path;

use super::{resample, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Loads a WAV file at its native rate; channels are averaged to mono and
/// integer samples scaled by `1 / 2^(bits-1)`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::UnsupportedAudio(m) => Error::UnsupportedAudio(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads and resamples to the canonical 22050 Hz.
pub fn load_wav_canonical(path: impl AsRef<Path>) -> Result<Waveform> {
    let w = load_wav(path)?;
    if w.sample_rate() == SAMPLE_RATE {
        Ok(w)
    } else {
        resample(&w, SAMPLE_RATE)
    }
}

fn decode(bytes: &[u8]) -> Result<Waveform> {
    let bad = |m: &str| Error::UnsupportedAudio(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = (body_start + size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("truncated fmt chunk"));
                }
                let mut tag = u16_at(body, 0);
                if tag == FORMAT_EXTENSIBLE {
                    if body.len() < 26 {
                        return Err(bad("truncated extensible fmt chunk"));
                    }
                    tag = u16_at(body, 24);
                }
                format = Some(Format {
                    tag,
                    channels: u16_at(body, 2),
                    sample_rate: u32_at(body, 4),
                    bits: u16_at(body, 14),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }
    let format = format.ok_or_else(|| bad("missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if format.channels == 0 || format.sample_rate == 0 {
        return Err(bad("zero channels or sample rate"));
    }
    let width = match (format.tag, format.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_PCM, 24) => 3,
        (FORMAT_PCM, 32) | (FORMAT_FLOAT, 32) => 4,
        (tag, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "format tag {tag} with {bits} bits per sample"
            )))
        }
    };
    let channels = format.channels as usize;
    let frame = width * channels;
    let frames = data.len() / frame;
    if frames == 0 {
        return Err(bad("zero-length audio"));
    }
    let read = |i: usize| -> f64 {
        let b = &data[i * width..(i + 1) * width];
        match (format.tag, width) {
            (FORMAT_PCM, 2) => i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0,
            (FORMAT_PCM, 3) => {
                let v = i32::from_le_bytes([0, b[0], b[1], b[2]]) >> 8;
                v as f64 / 8_388_608.0
            }
            (FORMAT_PCM, 4) => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64 / 2_147_483_648.0,
            _ => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        }
    };
    let samples = (0..frames)
        .map(|f| (0..channels).map(|c| read(f * channels + c)).sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, format.sample_rate)
}

fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes 16-bit PCM mono, little endian. Samples outside [-1, 1] clip.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data_len = (w.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + w.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in w.samples() {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
