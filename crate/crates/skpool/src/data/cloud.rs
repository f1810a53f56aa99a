//! Flattening a clip into the point-cloud input consumed by the network.

use crate::error::{Error, Result};

use super::records::ClipRecord;

/// How absent keypoints enter the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentKeypoints {
    /// Emit absent keypoints as all-zero feature rows, mirroring how false
    /// negatives are represented. Keeps the keypoint count uniform per
    /// instance.
    #[default]
    KeepZeroed,
    /// Drop absent keypoints entirely (ablation mode). Instances and frames
    /// left with no rows are dropped with them.
    Drop,
}

/// A clip as a flat keypoint cloud: one 4-channel feature row per keypoint
/// plus parallel group-index arrays.
///
/// Feature channels are `(x, y, confidence, category / max(num_categories - 1, 1))`,
/// all in `[0, 1]`. Rows are grouped two ways: by instance slot (a unique id
/// per `(frame, instance)` pair) and by frame slot. Instance slots are nested
/// within frames: all rows of a slot share one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointCloud {
    pub clip_id: String,
    /// Video-level class label.
    pub label: usize,
    /// N x 4 row-major features.
    pub features: Vec<f64>,
    /// Compact frame slot of each row (0..num_frames).
    pub frame_of: Vec<usize>,
    /// Instance slot of each row (0..num_instance_slots).
    pub instance_slot_of: Vec<usize>,
    /// Keypoint type of each row: its index within the instance's list.
    pub keypoint_type_of: Vec<usize>,
    pub num_frames: usize,
    pub num_instance_slots: usize,
    /// Compact frame slot of each instance slot.
    pub slot_frame: Vec<usize>,
    /// Original `frame_idx` of each instance slot, used by time encoding.
    pub slot_frame_idx: Vec<usize>,
    /// Position of each instance slot within its frame's instance list.
    pub slot_instance_pos: Vec<usize>,
    /// Per-instance ground-truth class, when the clip carries one.
    pub slot_label: Vec<Option<usize>>,
}

impl KeypointCloud {
    pub fn num_rows(&self) -> usize {
        self.frame_of.len()
    }

    /// Reorder rows by `perm` (`new row i = old row perm[i]`), keeping all
    /// per-row arrays aligned. Slot metadata is untouched, so the permutation
    /// must keep rows within their instance slots for the cloud to stay valid.
    pub fn permute_rows(&self, perm: &[usize]) -> KeypointCloud {
        assert_eq!(perm.len(), self.num_rows());
        let mut out = self.clone();
        for (new, &old) in perm.iter().enumerate() {
            out.features[new * 4..(new + 1) * 4]
                .copy_from_slice(&self.features[old * 4..(old + 1) * 4]);
            out.frame_of[new] = self.frame_of[old];
            out.instance_slot_of[new] = self.instance_slot_of[old];
            out.keypoint_type_of[new] = self.keypoint_type_of[old];
        }
        out
    }
}

/// Build a cloud with absent keypoints kept as zeroed rows.
pub fn build_cloud(clip: &ClipRecord, num_categories: usize) -> Result<KeypointCloud> {
    build_cloud_with(clip, num_categories, AbsentKeypoints::KeepZeroed)
}

/// Build a cloud with an explicit absent-keypoint policy.
pub fn build_cloud_with(
    clip: &ClipRecord,
    num_categories: usize,
    policy: AbsentKeypoints,
) -> Result<KeypointCloud> {
    if num_categories == 0 {
        return Err(Error::Config("num_categories must be at least 1".into()));
    }
    let category_scale = 1.0 / (num_categories.max(2) - 1) as f64;

    let mut cloud = KeypointCloud {
        clip_id: clip.clip_id.clone(),
        label: clip.label,
        features: Vec::new(),
        frame_of: Vec::new(),
        instance_slot_of: Vec::new(),
        keypoint_type_of: Vec::new(),
        num_frames: 0,
        num_instance_slots: 0,
        slot_frame: Vec::new(),
        slot_frame_idx: Vec::new(),
        slot_instance_pos: Vec::new(),
        slot_label: Vec::new(),
    };

    for frame in &clip.frames {
        let mut frame_has_rows = false;
        for (pos, inst) in frame.instances.iter().enumerate() {
            if inst.category >= num_categories {
                return Err(Error::Validation(format!(
                    "clip {:?} frame {}: category {} not below num_categories {}",
                    clip.clip_id, frame.frame_idx, inst.category, num_categories
                )));
            }
            let kept = inst
                .keypoints
                .iter()
                .enumerate()
                .filter(|(_, kp)| policy == AbsentKeypoints::KeepZeroed || kp.present);
            let mut slot_has_rows = false;
            for (k, kp) in kept {
                if !slot_has_rows {
                    // First row of this instance: open its slot.
                    cloud.slot_frame.push(cloud.num_frames);
                    cloud.slot_frame_idx.push(frame.frame_idx);
                    cloud.slot_instance_pos.push(pos);
                    cloud.slot_label.push(inst.instance_label);
                    slot_has_rows = true;
                }
                let (x, y, c) = if kp.present {
                    (kp.x, kp.y, kp.confidence)
                } else {
                    (0.0, 0.0, 0.0)
                };
                cloud
                    .features
                    .extend_from_slice(&[x, y, c, inst.category as f64 * category_scale]);
                cloud.frame_of.push(cloud.num_frames);
                cloud.instance_slot_of.push(cloud.num_instance_slots);
                cloud.keypoint_type_of.push(k);
            }
            if slot_has_rows {
                cloud.num_instance_slots += 1;
                frame_has_rows = true;
            }
        }
        if frame_has_rows {
            cloud.num_frames += 1;
        }
    }

    if cloud.features.is_empty() {
        return Err(Error::Validation(format!(
            "clip {:?}: no keypoints, cannot build a cloud",
            clip.clip_id
        )));
    }
    Ok(cloud)
}
