//! Dataset manifests, pose and feature loaders, clip segmentation and the
//! synthetic toy corpus.

mod manifest;
mod motion;
mod npy;
mod toy;

pub use manifest::{
    load_manifest, load_visual_features, segment_clips, split_by_song, split_from_lists, ClipData, ClipRecord,
    DatasetManifest, Split, SplitRecords,
};
pub use motion::{check_motion_duration, load_motion, save_json, KeypointFile, SmplFile, KEYPOINT_JOINTS, MOTION_FPS};
pub use npy::{read_npy, write_npy};
pub use toy::{click_times, synth_toy_dataset, toy_motion, toy_song, GenreSpec, ToyConfig, CLICK_OFFSET};
