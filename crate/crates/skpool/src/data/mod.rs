//! Clip data model, on-disk format, keypoint clouds, synthetic motion data,
//! and detection-error injectors.

mod cloud;
mod corrupt;
mod records;
mod synth;

pub use cloud::{build_cloud, build_cloud_with, AbsentKeypoints, KeypointCloud};
pub use corrupt::{
    corrupt_clip_fn, corrupt_clip_fp, inject_false_negatives, inject_false_positives,
    shuffle_tracking,
};
pub use records::{load_clips, save_clips, ClipRecord, FrameRecord, InstanceRecord, Keypoint};
pub use synth::{gen_synthetic, gen_synthetic_multi, SynthConfig, PERSON_KEYPOINTS};

/// Keypoints on an object contour: eight extreme points.
pub const OBJECT_KEYPOINTS: usize = 8;
