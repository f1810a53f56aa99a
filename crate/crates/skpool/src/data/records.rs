//! Clip records and their line-delimited on-disk format.
//!
//! One clip per line, each line a JSON object:
//!
//! ```text
//! {"clip_id": "...", "label": 0, "frames": [{"frame_idx": 0, "instances":
//!   [{"category": 0, "track_id": 0, "instance_label": null,
//!     "keypoints": [[x, y, conf], ...]}]}]}
//! ```
//!
//! Coordinates are already normalized to `[0, 1]`. A missing keypoint is
//! encoded as `[0, 0, 0]`; on load it becomes `present = false`.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One video clip: ordered frames of detected instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Video-level class for recognition. Multi-action clips additionally
    /// carry per-instance labels, which are ground truth for evaluation only.
    pub label: usize,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_idx: usize,
    /// May be empty: no detections in that frame.
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    /// 0 = person; >= 1 = object classes.
    pub category: usize,
    /// Carried through the data model but never consumed by the network.
    pub track_id: Option<i64>,
    /// Per-instance action class; present only in localization ground truth.
    pub instance_label: Option<usize>,
    pub keypoints: Vec<Keypoint>,
}

/// One detected keypoint: normalized coordinates plus a confidence score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub present: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Keypoint {
            x,
            y,
            confidence,
            present: true,
        }
    }

    /// The all-zero encoding of a missing detection.
    pub fn absent() -> Self {
        Keypoint {
            x: 0.0,
            y: 0.0,
            confidence: 0.0,
            present: false,
        }
    }
}

impl Serialize for Keypoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut tup = serializer.serialize_tuple(3)?;
        if self.present {
            tup.serialize_element(&self.x)?;
            tup.serialize_element(&self.y)?;
            tup.serialize_element(&self.confidence)?;
        } else {
            for _ in 0..3 {
                tup.serialize_element(&0.0)?;
            }
        }
        tup.end()
    }
}

impl<'de> Deserialize<'de> for Keypoint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct KeypointVisitor;
        impl<'de> Visitor<'de> for KeypointVisitor {
            type Value = Keypoint;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a [x, y, confidence] triple")
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Keypoint, A::Error> {
                let x: f64 = seq
                    .next_element()?
                    .ok_or_else(|| serde::de::Error::invalid_length(0, &self))?;
                let y: f64 = seq
                    .next_element()?
                    .ok_or_else(|| serde::de::Error::invalid_length(1, &self))?;
                let confidence: f64 = seq
                    .next_element()?
                    .ok_or_else(|| serde::de::Error::invalid_length(2, &self))?;
                if seq.next_element::<f64>()?.is_some() {
                    return Err(serde::de::Error::invalid_length(4, &self));
                }
                let present = !(x == 0.0 && y == 0.0 && confidence == 0.0);
                Ok(Keypoint {
                    x,
                    y,
                    confidence,
                    present,
                })
            }
        }
        deserializer.deserialize_tuple(3, KeypointVisitor)
    }
}

impl ClipRecord {
    /// Enforce the structural invariants of a clip.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Validation(format!(
                "clip {:?}: must contain at least one frame",
                self.clip_id
            )));
        }
        let mut prev: Option<usize> = None;
        for frame in &self.frames {
            if let Some(p) = prev {
                if frame.frame_idx <= p {
                    return Err(Error::Validation(format!(
                        "clip {:?}: frame indices must be strictly increasing ({} after {})",
                        self.clip_id, frame.frame_idx, p
                    )));
                }
            }
            prev = Some(frame.frame_idx);
            for (i, inst) in frame.instances.iter().enumerate() {
                if inst.keypoints.is_empty() {
                    return Err(Error::Validation(format!(
                        "clip {:?} frame {} instance {i}: no keypoints",
                        self.clip_id, frame.frame_idx
                    )));
                }
                for (k, kp) in inst.keypoints.iter().enumerate() {
                    for (field, v) in [("x", kp.x), ("y", kp.y), ("confidence", kp.confidence)] {
                        if !(0.0..=1.0).contains(&v) {
                            return Err(Error::Validation(format!(
                                "clip {:?} frame {} instance {i} keypoint {k}: {field} = {v} outside [0, 1]",
                                self.clip_id, frame.frame_idx
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Total keypoint count (present and absent) across all frames.
    pub fn num_keypoints(&self) -> usize {
        self.frames
            .iter()
            .flat_map(|f| &f.instances)
            .map(|i| i.keypoints.len())
            .sum()
    }

    /// The distinct instance-level classes, sorted. Empty when the clip has
    /// no per-instance annotations.
    pub fn instance_classes(&self) -> Vec<usize> {
        let mut classes: Vec<usize> = self
            .frames
            .iter()
            .flat_map(|f| &f.instances)
            .filter_map(|i| i.instance_label)
            .collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

/// Load and validate every clip of a line-delimited clip file.
///
/// An empty file yields an empty list. Blank lines are skipped.
pub fn load_clips(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut clips = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let clip: ClipRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        clip.validate()?;
        clips.push(clip);
    }
    Ok(clips)
}

/// Write clips in the line-delimited format. Round-trips bit-exactly.
pub fn save_clips(path: impl AsRef<Path>, clips: &[ClipRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for clip in clips {
        serde_json::to_writer(&mut out, clip)
            .map_err(|e| Error::Validation(format!("cannot serialize clip: {e}")))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}
