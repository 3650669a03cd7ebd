//! Pose file formats: COCO-17 keypoints and SMPL axis-angle + translation.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MotionRepr, MotionSequence};

/// Rate every motion sequence is resampled to on load.
pub const MOTION_FPS: f64 = 60.0;
pub const KEYPOINT_JOINTS: usize = 17;
const SMPL_POSE: usize = 72;
const SMPL_TRANS: usize = 3;

/// Per frame, 17 `[x, y, confidence]` triples in pixels; `null` frames or
/// joints (or zero confidence) mark missing detections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointFile {
    pub fps: f64,
    pub width: f64,
    pub height: f64,
    pub frames: Vec<Option<Vec<Option<[f64; 3]>>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmplFile {
    pub fps: f64,
    pub poses: Vec<Vec<f64>>,
    pub trans: Vec<Vec<f64>>,
}

fn bad(path: &Path, what: &str) -> Error {
    Error::Data(format!("{}: {what}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| bad(path, &e.to_string()))
}

fn keypoint_channels(path: &Path, f: &KeypointFile) -> Result<Array2<f64>> {
    if !(f.width > 0.0 && f.height > 0.0) {
        return Err(bad(path, "frame dimensions must be positive"));
    }
    let mut out = Array2::zeros((2 * KEYPOINT_JOINTS, f.frames.len()));
    for (t, frame) in f.frames.iter().enumerate() {
        let Some(joints) = frame else { continue };
        if joints.len() != KEYPOINT_JOINTS {
            return Err(bad(path, &format!("frame {t} has {} joints, expected {KEYPOINT_JOINTS}", joints.len())));
        }
        for (j, kp) in joints.iter().enumerate() {
            if let Some([x, y, c]) = *kp {
                if c > 0.0 {
                    out[[2 * j, t]] = x / f.width;
                    out[[2 * j + 1, t]] = y / f.height;
                }
            }
        }
    }
    Ok(out)
}

fn smpl_channels(path: &Path, f: &SmplFile) -> Result<Array2<f64>> {
    if f.poses.len() != f.trans.len() {
        return Err(bad(path, &format!("{} pose frames vs {} translation frames", f.poses.len(), f.trans.len())));
    }
    let mut out = Array2::zeros((SMPL_POSE + SMPL_TRANS, f.poses.len()));
    for (t, (p, tr)) in f.poses.iter().zip(&f.trans).enumerate() {
        if p.len() != SMPL_POSE || tr.len() != SMPL_TRANS {
            return Err(bad(path, &format!("frame {t} has {} pose and {} translation values", p.len(), tr.len())));
        }
        for (c, v) in p.iter().chain(tr).enumerate() {
            out[[c, t]] = *v;
        }
    }
    Ok(out)
}

/// Nearest-frame resampling of `[C, T]` from `fps` to [`MOTION_FPS`].
fn to_motion_rate(x: Array2<f64>, fps: f64) -> Array2<f64> {
    if fps == MOTION_FPS {
        return x;
    }
    let n = x.ncols();
    let out_len = ((n as f64) * MOTION_FPS / fps).round() as usize;
    Array2::from_shape_fn((x.nrows(), out_len), |(c, j)| {
        let src = ((j as f64 * fps / MOTION_FPS).floor() as usize).min(n - 1);
        x[[c, src]]
    })
}

/// Loads a pose file as `[C_m, T]` channels at [`MOTION_FPS`]. Keypoints are
/// normalized by the frame dimensions; missing joints are zero.
pub fn load_motion(path: &Path, repr: MotionRepr) -> Result<MotionSequence> {
    let (channels, fps) = match repr {
        MotionRepr::Keypoints2d => {
            let f: KeypointFile = read_json(path)?;
            (keypoint_channels(path, &f)?, f.fps)
        }
        MotionRepr::Smpl => {
            let f: SmplFile = read_json(path)?;
            (smpl_channels(path, &f)?, f.fps)
        }
    };
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(bad(path, &format!("invalid frame rate {fps}")));
    }
    if channels.ncols() == 0 {
        return Err(bad(path, "no frames"));
    }
    Ok(MotionSequence {
        channels: to_motion_rate(channels, fps),
        frame_rate: MOTION_FPS,
        representation: repr,
    })
}

/// Rejects sequences whose duration differs from `seconds` by more than 10%.
pub fn check_motion_duration(m: &MotionSequence, seconds: f64) -> Result<()> {
    let have = m.frames() as f64 / m.frame_rate;
    if (have - seconds).abs() > 0.1 * seconds {
        return Err(Error::Data(format!(
            "motion covers {have:.3} s but the audio lasts {seconds:.3} s"
        )));
    }
    Ok(())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
